"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``."""

import math

import numpy as np


def sgd_steps(a, b, x, idx, gammas, shrink):
    """Advance ``x`` in place through ``len(idx)`` single-sample SGD steps.

    Step ``k`` uses row ``idx[k]`` and rate ``gammas[k]``:
    ``x <- (1 - g*shrink) x - g (a_i . x - b_i) a_i`` with ``shrink = delta/n``.
    Returns False if the iterate became non-finite.
    """
    for i, g in zip(idx.tolist(), gammas.tolist()):
        row = a[i]
        r = g * (row @ x - b[i])
        x *= 1.0 - g * shrink
        x -= r * row
    return bool(np.isfinite(x).all())


def hsgd_steps(y, noise, gammas, sig, bt, rate, sb, resid, h, inv_n, noisy):
    """Euler-Maruyama steps of homogenized SGD, vectorized over paths (rows of ``y``)."""
    sqh = math.sqrt(h)
    for k, g in enumerate(gammas.tolist()):
        drift = h * g * (rate * y - sb)
        if noisy:
            e = y * sig - bt
            acc = np.clip(np.einsum("ij,ij->i", e, e) + resid, 0.0, None)
            amp = sqh * g * np.sqrt(acc * inv_n)
            y += amp[:, None] * sig * noise[:, k, :] - drift
        else:
            y -= drift
    return bool(np.isfinite(y).all())
