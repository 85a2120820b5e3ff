# Cascade attribute learning package