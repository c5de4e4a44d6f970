# Numerical steering modules
