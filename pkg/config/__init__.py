# Default settings for CALNet experiments