# Test package for CALNet
