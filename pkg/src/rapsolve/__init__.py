"""Numerical construction of remotely almost periodic solutions of perturbed
nonautonomous ODE systems."""

__version__ = "0.1.0"
