"""Multi-pass SGD, homogenized SGD and their deterministic Volterra limits
for high-dimensional l2-regularized least squares."""

__version__ = "0.1.0"
