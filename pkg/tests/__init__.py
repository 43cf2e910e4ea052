# Test package for the switching-control solver
