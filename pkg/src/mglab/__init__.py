"""Meta-gradient laboratory for non-stationary gridworlds."""

__version__ = "0.1.0"
