"""Backend selection for the hot loops.

The compiled Cython extension is used when importable; setting the
environment variable ``HOMSGD_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

if os.environ.get("HOMSGD_PURE_PYTHON", "") not in ("", "0"):
    from homsgd import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from homsgd import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        from homsgd import _kernels_py as _impl
        BACKEND = "python"

sgd_steps = _impl.sgd_steps
hsgd_steps = _impl.hsgd_steps

__all__ = ["BACKEND", "sgd_steps", "hsgd_steps"]
