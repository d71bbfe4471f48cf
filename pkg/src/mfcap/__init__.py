"""Information-capacity calculus for Gaussian mean-field networks."""

__version__ = "0.1.0"
