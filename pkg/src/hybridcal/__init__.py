"""Online calibration of neural sub-models coupled to non-differentiable solvers."""

__version__ = "0.1.0"
