"""Cross-entropy policy evaluation with linear and nonlinear value functions."""

__version__ = "0.1.0"
