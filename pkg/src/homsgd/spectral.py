"""Least-squares problem container, its full SVD, and resolvent entries.

The problem is ``f(x) = 1/2 ||A x - b||^2 + delta/2 ||x||^2`` with
``A`` of shape ``(n, d)``.  Everything downstream (gradient flow, Volterra
kernels, homogenized SGD, resolvent audits) works in the eigenbasis of
``A^T A`` produced by :func:`decompose`.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from homsgd.errors import InputError, NumericError, PoleError

POLE_TOL = 1e-12


def _frozen(array):
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Problem:
    """An l2-regularized least-squares instance.

    Parameters
    ----------
    a_matrix : array_like, shape (n, d)
    b_vector : array_like, shape (n,)
    delta : float
        Regularization strength, ``delta >= 0``.
    """

    a_matrix: np.ndarray
    b_vector: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=np.float64)
        b = np.asarray(self.b_vector, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InputError(f"a_matrix must be a non-empty 2-D array, got shape {a.shape}")
        if b.shape != (a.shape[0],):
            raise InputError(f"b_vector must have shape ({a.shape[0]},), got {b.shape}")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise InputError("a_matrix and b_vector must be finite")
        delta = float(self.delta)
        if not np.isfinite(delta) or delta < 0:
            raise InputError(f"delta must be finite and >= 0, got {self.delta}")
        object.__setattr__(self, "a_matrix", _frozen(a))
        object.__setattr__(self, "b_vector", _frozen(b))
        object.__setattr__(self, "delta", delta)

    @property
    def n(self):
        return self.a_matrix.shape[0]

    @property
    def d(self):
        return self.a_matrix.shape[1]


@dataclass(frozen=True, eq=False)
class Spectral:
    """Full singular value decomposition ``A = U Sigma V^T`` plus ``U^T b``.

    ``eigenvalues`` holds the ``d`` eigenvalues of ``A^T A`` (zero padded);
    ``row_eigenvalues`` the ``n`` eigenvalues of ``A A^T``.
    """

    u_full: np.ndarray
    singulars: np.ndarray
    v_full: np.ndarray
    eigenvalues: np.ndarray
    b_spectral: np.ndarray

    @property
    def n(self):
        return self.u_full.shape[0]

    @property
    def d(self):
        return self.v_full.shape[0]

    @property
    def rank_dim(self):
        return min(self.n, self.d)

    @cached_property
    def row_eigenvalues(self):
        out = np.zeros(self.n)
        out[: self.rank_dim] = self.singulars**2
        return out

    @cached_property
    def sigma_padded(self):
        """Singular values padded with zeros to length ``d``."""
        out = np.zeros(self.d)
        out[: self.rank_dim] = self.singulars
        return out

    @cached_property
    def b_padded(self):
        """``U^T b`` restricted to the first ``min(n, d)`` entries, padded to ``d``."""
        out = np.zeros(self.d)
        out[: self.rank_dim] = self.b_spectral[: self.rank_dim]
        return out

    @cached_property
    def sigma_b(self):
        """``Sigma^T U^T b = V^T A^T b`` (length ``d``)."""
        return self.sigma_padded * self.b_padded

    @cached_property
    def residual_b2(self):
        """Energy of ``U^T b`` beyond the first ``min(n, d)`` coordinates."""
        return float(np.sum(self.b_spectral[self.rank_dim:] ** 2))

    @property
    def op_norm_sq(self):
        return float(self.eigenvalues[0]) if self.d else 0.0

    def to_spectral(self, x):
        """Map ``x -> V^T x`` (works row-wise on 2-D input)."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.v_full if x.ndim == 2 else self.v_full.T @ x

    def from_spectral(self, nu):
        """Map ``nu -> V nu`` (works row-wise on 2-D input)."""
        nu = np.asarray(nu, dtype=np.float64)
        return nu @ self.v_full.T if nu.ndim == 2 else self.v_full @ nu

    def spectral_loss(self, nu):
        """Empirical risk ``1/2 ||Sigma nu - U^T b||^2`` for ``nu = V^T x``."""
        nu = np.asarray(nu, dtype=np.float64)
        resid = nu * self.sigma_padded - self.b_padded
        return 0.5 * (np.sum(resid * resid, axis=-1) + self.residual_b2)


def _fix_signs(u, v, m):
    # first non-negligible entry of every right singular vector is positive
    for k in range(v.shape[1]):
        col = v[:, k]
        scale = np.max(np.abs(col))
        first = np.flatnonzero(np.abs(col) > 1e-8 * scale)[0]
        if col[first] < 0:
            v[:, k] = -col
            if k < m:
                u[:, k] = -u[:, k]


def decompose(problem):
    """Compute the full SVD of ``problem.a_matrix``.

    Returns
    -------
    Spectral
        Deterministic for a fixed input thanks to the sign convention on the
        right singular vectors.
    """
    a = problem.a_matrix
    if not np.isfinite(a).all():
        raise InputError("a_matrix has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed to converge: {exc}") from exc
    u = np.array(u)
    v = np.array(vt.T)
    m = s.shape[0]
    _fix_signs(u, v, m)
    eig = np.zeros(a.shape[1])
    eig[:m] = s**2
    return Spectral(
        u_full=_frozen(u),
        singulars=_frozen(s),
        v_full=_frozen(v),
        eigenvalues=_frozen(eig),
        b_spectral=_frozen(u.T @ problem.b_vector),
    )


def _check_x(problem, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != problem.d:
        raise InputError(f"x must have length {problem.d}, got {x.shape[-1]}")
    return x


def loss(problem, x):
    """Empirical risk ``1/2 ||A x - b||^2``."""
    x = _check_x(problem, x)
    r = problem.a_matrix @ x - problem.b_vector
    return 0.5 * float(r @ r)


def objective(problem, x):
    """Regularized objective ``loss(x) + delta/2 ||x||^2``."""
    x = _check_x(problem, x)
    return loss(problem, x) + 0.5 * problem.delta * float(x @ x)


def _side(spec, side):
    if side == "rows":
        return spec.u_full, spec.row_eigenvalues
    if side == "columns":
        return spec.v_full, spec.eigenvalues
    raise InputError(f"side must be 'rows' or 'columns', got {side!r}")


def resolvent_weights(spec, side, z):
    """Return ``(P, 1/(z - lambda))`` for the chosen side, checking for poles."""
    basis, lam = _side(spec, side)
    z = complex(z)
    gap = np.abs(z - lam)
    if gap.size and gap.min() < POLE_TOL:
        raise PoleError(f"z={z} lies within {POLE_TOL} of an eigenvalue")
    return basis, 1.0 / (z - lam)


def resolvent_entry(spec, side, z, i, j):
    """Entry ``e_i^T R(z; M) e_j`` (or ``e_i^T R(z; M) v`` for vector ``j``).

    ``M`` is ``A A^T`` for ``side="rows"`` and ``A^T A`` for
    ``side="columns"``; ``R(z; M) = (z I - M)^{-1}``.
    """
    basis, w = resolvent_weights(spec, side, z)
    if np.ndim(j) == 0:
        return complex(np.sum(basis[i] * w * basis[j]))
    v = np.asarray(j, dtype=np.float64)
    if v.shape != (basis.shape[0],):
        raise InputError(f"vector argument must have length {basis.shape[0]}")
    return complex(np.sum(basis[i] * w * (basis.T @ v)))
