"""Jensen Effect detection with penalized spline single index models."""

__version__ = "0.1.0"
