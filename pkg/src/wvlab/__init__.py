"""Numerical laboratory for inverse problems of the strongly damped (Westervelt-type) wave equation."""

__version__ = "0.1.0"
