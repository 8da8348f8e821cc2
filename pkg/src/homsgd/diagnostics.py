"""Numerical audits of resolvent delocalization on concrete instances.

All resolvents are evaluated through the SVD: ``R(z; A A^T) = U diag(1/(z - mu)) U^T``
on the row side and ``R(z; A^T A) = V diag(1/(z - lambda)) V^T`` on the
column side.  Contour points come in conjugate pairs and every reported
quantity is a modulus of a real-matrix resolvent entry, so only the upper
half of the contour is scanned.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from homsgd.errors import InputError
from homsgd.spectral import resolvent_weights

FULL_SCAN_LIMIT = 2000
SAMPLED_PAIRS = 100_000
# sampled pairs gathered per block (each block holds two chunk x n row copies)
_PAIR_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class Contour:
    """Stadium around ``[0, right]`` at distance 1/2, as an open list of complex points.

    Points are equally spaced in arc length starting from the leftmost
    point ``-1/2`` and run counter-clockwise; the loop closes implicitly.
    """

    points: np.ndarray
    right: float

    @property
    def count(self):
        return self.points.size

    def upper_half(self):
        """First half of the loop, which holds one point of each conjugate pair."""
        return self.points[: self.count // 2 + 1]


def stadium_point(right, s):
    """Point at arc length ``s`` along the stadium, counter-clockwise from ``-1/2``."""
    r = 0.5
    q = math.pi * r / 2
    perim = 2 * right + 2 * math.pi * r
    s = s % perim
    if s < q:
        return r * complex(math.cos(math.pi + s / r), math.sin(math.pi + s / r))
    s -= q
    if s < right:
        return complex(s, -r)
    s -= right
    if s < 2 * q:
        phi = -math.pi / 2 + s / r
        return right + r * complex(math.cos(phi), math.sin(phi))
    s -= 2 * q
    if s < right:
        return complex(right - s, r)
    s -= right
    phi = math.pi / 2 + s / r
    return r * complex(math.cos(phi), math.sin(phi))


def build_contour(spec, points=256):
    """Contour enclosing ``[0, 1 + ||A||^2]`` at distance 1/2.

    Doubling ``points`` yields a superset of the previous points, so
    maxima reported on a refined contour never decrease.
    """
    if points < 16:
        raise InputError("contour needs at least 16 points")
    right = 1.0 + spec.op_norm_sq
    perim = 2 * right + math.pi
    pts = np.array([stadium_point(right, k * perim / points) for k in range(points)])
    return Contour(pts, right)


def distance_to_segment(z, right):
    x = np.clip(np.real(z), 0.0, right)
    return np.abs(z - x)


@dataclass
class DelocalizationReport:
    """Maxima of the three row-side resolvent quantities over the contour."""

    max_rb: float
    max_offdiag: float
    max_diag_dev: float
    theta: float
    theta_bound: float
    pass_rb: bool
    pass_offdiag: bool
    pass_diag: bool
    sampled: bool = False

    @property
    def passed(self):
        return self.pass_rb and self.pass_offdiag and self.pass_diag

    def rows(self):
        """``(quantity, value, bound, passed)`` tuples for CSV output."""
        return [
            ("max_rb", self.max_rb, self.theta_bound, self.pass_rb),
            ("max_offdiag", self.max_offdiag, self.theta_bound, self.pass_offdiag),
            ("max_diag_dev", self.max_diag_dev, self.theta_bound, self.pass_diag),
        ]


def _check_theta(theta):
    if not 0 < theta < 0.5:
        raise InputError("theta must lie in (0, 1/2)")


def _row_maxima(spec, u2, bt, z, pairs):
    u, w = resolvent_weights(spec, "rows", z)
    rb = float(np.max(np.abs(u @ (w * bt))))
    diag = u2 @ w
    dev = float(np.max(np.abs(diag - w.mean())))
    if u.shape[0] < 2:
        return rb, 0.0, dev
    if pairs is None:
        # separate real GEMMs on contiguous operands (a strided .real view is far slower)
        full = np.hypot((u * w.real) @ u.T, (u * w.imag) @ u.T)
        np.fill_diagonal(full, 0.0)
        off = float(full.max())
    else:
        left, right = pairs
        off = 0.0
        for lo in range(0, left.size, _PAIR_CHUNK):
            ul, ur = u[left[lo:lo + _PAIR_CHUNK]], u[right[lo:lo + _PAIR_CHUNK]]
            vals = np.hypot(np.einsum("ij,ij->i", ul * w.real, ur), np.einsum("ij,ij->i", ul * w.imag, ur))
            off = max(off, float(vals.max()))
    return rb, off, dev


def check_delocalization(spec, b, theta, contour, workers=1, seed=0):
    """Audit ``|e_i^T R b|``, ``|e_i^T R e_j|`` (i != j) and ``|R_ii - tr R / n|``.

    Every maximum is compared with ``n^(theta - 1/2)``.  Off-diagonal
    entries are scanned exhaustively for ``n <= 2000``; above that a fixed
    random sample of 1e5 pairs is used and ``sampled`` is set.
    """
    _check_theta(theta)
    b = np.asarray(b, dtype=np.float64)
    n = spec.n
    if b.shape != (n,):
        raise InputError(f"b must have length {n}")
    u = spec.u_full
    bt = u.T @ b
    u2 = u * u
    pairs = None
    if n > FULL_SCAN_LIMIT:
        rng = np.random.default_rng(seed)
        left = rng.integers(0, n, SAMPLED_PAIRS)
        right = (left + rng.integers(1, n, SAMPLED_PAIRS)) % n
        pairs = (left, right)
    zs = contour.upper_half()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            res = list(pool.map(lambda z: _row_maxima(spec, u2, bt, z, pairs), zs))
    else:
        res = [_row_maxima(spec, u2, bt, z, pairs) for z in zs]
    rb, off, dev = (max(col) for col in zip(*res))
    bound = n ** (theta - 0.5)
    return DelocalizationReport(rb, off, dev, theta, bound, rb < bound, off < bound, dev < bound, pairs is not None)


@dataclass
class InitReport:
    max_value: float
    bound: float
    passed: bool


def check_init(spec, x0, theta, contour):
    """Audit ``max_z max_i |e_i^T R(z; A^T A) x0|`` against ``n^(theta - 1/2)``."""
    _check_theta(theta)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (spec.d,):
        raise InputError(f"x0 must have length {spec.d}")
    xt = spec.v_full.T @ x0
    best = 0.0
    for z in contour.upper_half():
        v, w = resolvent_weights(spec, "columns", z)
        best = max(best, float(np.max(np.abs(v @ (w * xt)))))
    bound = spec.n ** (theta - 0.5)
    return InitReport(best, bound, best <= bound)


@dataclass
class KeyLemmaReport:
    max_deviation: float
    bound: float
    passed: bool
    pairs: int
    epsilon: float


def check_statistic_keylemma(spec, stat, epsilon, contour, pairs=64, seed=0):
    """Audit ``|e_i^T A T_hat A^T e_i - tr(A T_hat A^T)/n|`` against ``||T|| n^(-epsilon)``.

    ``T_hat = R(z) T R(y) + R(y) T R(z)`` with column-side resolvents.  In
    the singular frame ``V^T T_hat V = T' * (D_z D_y^T + D_y D_z^T)`` where
    ``T' = V^T T V`` and ``D`` holds ``1/(z - lambda)``; the diagonal of
    ``A T_hat A^T`` is then ``rowsum((U_m S) * U_m)`` with ``S_kl = sigma_k
    sigma_l (V^T T_hat V)_kl``.  ``pairs`` contour pairs are drawn with a
    seeded generator.
    """
    if not epsilon > 0:
        raise InputError("epsilon must be positive")
    if pairs < 1:
        raise InputError("pairs must be >= 1")
    n, m = spec.n, spec.rank_dim
    t_op = float(np.linalg.norm(stat.hessian, 2)) if stat.dim else 0.0
    bound = t_op * n ** (-epsilon)
    if t_op == 0.0:
        return KeyLemmaReport(0.0, bound, True, 0, epsilon)
    v = spec.v_full
    tp = (v.T @ stat.hessian @ v)[:m, :m]
    sig = spec.singulars
    um = spec.u_full[:, :m]
    rng = np.random.default_rng(seed)
    pts = contour.points
    chosen = rng.integers(0, pts.size, size=(pairs, 2))
    worst = 0.0
    for iz, iy in chosen:
        dz = resolvent_weights(spec, "columns", pts[iz])[1][:m]
        dy = resolvent_weights(spec, "columns", pts[iy])[1][:m]
        mix = np.outer(dz, dy)
        mix = mix + mix.T
        s = (sig[:, None] * sig[None, :]) * tp * mix
        left = (um @ np.ascontiguousarray(s.real)) + 1j * (um @ np.ascontiguousarray(s.imag))
        diag = np.einsum("ik,ik->i", left, um)
        dev = float(np.max(np.abs(diag - np.trace(s) / n)))
        worst = max(worst, dev)
    return KeyLemmaReport(worst, bound, worst <= bound, int(pairs), epsilon)


def resolvent_matrix(spec, side, z):
    """Dense resolvent ``(z I - M)^{-1}`` for ``M = A A^T`` (``side="rows"``) or ``A^T A``."""
    basis, w = resolvent_weights(spec, side, z)
    return (basis * w) @ basis.T
