"""Single-object tracking with a temporal track token, on a from-scratch autodiff engine."""

__version__ = "0.1.0"
