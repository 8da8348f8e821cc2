# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for SGD and Euler-Maruyama homogenized SGD.

Semantics match :mod:`homsgd._kernels_py` exactly; only the summation order
of dot products may differ (round-off level).
"""

from libc.math cimport sqrt, isfinite
from libc.stdint cimport int64_t


def sgd_steps(const double[:, ::1] a, const double[::1] b, double[::1] x,
              const int64_t[::1] idx, const double[::1] gammas, double shrink):
    """Advance ``x`` in place through ``len(idx)`` single-sample SGD steps.

    Step ``k`` uses row ``idx[k]`` and rate ``gammas[k]``:
    ``x <- (1 - g*shrink) x - g (a_i . x - b_i) a_i`` with ``shrink = delta/n``.
    Returns False if the iterate became non-finite.
    """
    cdef Py_ssize_t k, j, i
    cdef Py_ssize_t d = x.shape[0]
    cdef Py_ssize_t m = idx.shape[0]
    cdef double r, g, s
    cdef bint ok = True
    with nogil:
        for k in range(m):
            i = <Py_ssize_t> idx[k]
            g = gammas[k]
            r = -b[i]
            for j in range(d):
                r = r + a[i, j] * x[j]
            r = g * r
            s = 1.0 - g * shrink
            for j in range(d):
                x[j] = s * x[j] - r * a[i, j]
        for j in range(d):
            if not isfinite(x[j]):
                ok = False
                break
    return ok


def hsgd_steps(double[:, ::1] y, const double[:, :, ::1] noise, const double[::1] gammas,
               const double[::1] sig, const double[::1] bt, const double[::1] rate,
               const double[::1] sb, double resid, double h, double inv_n, bint noisy):
    """Euler-Maruyama steps of homogenized SGD in spectral coordinates.

    ``y`` has one row per path.  With ``L = 1/2 (sum_j (sig_j y_j - bt_j)^2 + resid)``
    each step does
    ``y_j <- y_j - h g (rate_j y_j - sb_j) + sqrt(h) g sqrt(2 L / n) sig_j xi_j``
    where ``xi = noise[p, k]``.  Returns False if any path became non-finite.
    """
    cdef Py_ssize_t p, k, j
    cdef Py_ssize_t npath = y.shape[0]
    cdef Py_ssize_t d = y.shape[1]
    cdef Py_ssize_t m = gammas.shape[0]
    cdef double g, e, acc, amp, sqh = sqrt(h)
    cdef bint ok = True
    with nogil:
        for p in range(npath):
            for k in range(m):
                g = gammas[k]
                if noisy:
                    acc = resid
                    for j in range(d):
                        e = sig[j] * y[p, j] - bt[j]
                        acc = acc + e * e
                    if acc < 0.0:
                        acc = 0.0
                    amp = sqh * g * sqrt(acc * inv_n)
                    for j in range(d):
                        y[p, j] = y[p, j] - h * g * (rate[j] * y[p, j] - sb[j]) + amp * sig[j] * noise[p, k, j]
                else:
                    for j in range(d):
                        y[p, j] = y[p, j] - h * g * (rate[j] * y[p, j] - sb[j])
            for j in range(d):
                if not isfinite(y[p, j]):
                    ok = False
                    break
    return ok
