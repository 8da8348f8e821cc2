"""Quadratic statistics ``R(x) = 1/2 x^T T x + u^T x + c`` and risk constructors."""

import math
from dataclasses import dataclass

import numpy as np

from homsgd.errors import InputError
from homsgd.generators import STREAM_MOMENTS, make_rng

H2_WARNING_THRESHOLD = 1e3


@dataclass(frozen=True, eq=False)
class QuadraticStatistic:
    """A quadratic observable of the iterate.

    Parameters
    ----------
    hessian : ndarray, shape (d, d)
        Symmetric matrix ``T``.
    gradient0 : ndarray, shape (d,)
        Gradient at the origin ``u``.
    constant : float
        Value at the origin ``c``.
    label : str
    """

    hessian: np.ndarray
    gradient0: np.ndarray
    constant: float = 0.0
    label: str = "statistic"

    def __post_init__(self):
        t = np.array(self.hessian, dtype=np.float64)
        u = np.array(self.gradient0, dtype=np.float64)
        d = u.shape[0] if u.ndim == 1 else -1
        if t.shape != (d, d):
            raise InputError(f"hessian shape {t.shape} incompatible with gradient length {d}")
        if not (np.isfinite(t).all() and np.isfinite(u).all() and np.isfinite(self.constant)):
            raise InputError("statistic entries must be finite")
        scale = max(1.0, float(np.max(np.abs(t))) if t.size else 1.0)
        if np.max(np.abs(t - t.T), initial=0.0) > 1e-12 * scale:
            raise InputError("hessian must be symmetric")
        t = 0.5 * (t + t.T)
        t.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "hessian", t)
        object.__setattr__(self, "gradient0", u)
        object.__setattr__(self, "constant", float(self.constant))

    @property
    def dim(self):
        return self.gradient0.shape[0]


def evaluate(stat, x):
    """Value of ``stat`` at ``x``; 2-D ``x`` is evaluated row by row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stat.dim:
        raise InputError(f"x must have length {stat.dim}, got {x.shape[-1]}")
    if x.ndim == 1:
        return 0.5 * float(x @ stat.hessian @ x) + float(stat.gradient0 @ x) + stat.constant
    quad = np.einsum("ij,ij->i", x @ stat.hessian, x)
    return 0.5 * quad + x @ stat.gradient0 + stat.constant


def h2_norm(stat):
    """``||T||_op + ||u|| + |c|``."""
    op = float(np.linalg.norm(stat.hessian, 2)) if stat.dim else 0.0
    return op + float(np.linalg.norm(stat.gradient0)) + abs(stat.constant)


def mse_to_signal(beta, label="mse"):
    """``1/2 ||x - beta||^2``."""
    beta = np.asarray(beta, dtype=np.float64)
    return QuadraticStatistic(np.eye(beta.shape[0]), -beta, 0.5 * float(beta @ beta), label)


def _check_psd(mat, name):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InputError(f"{name} must be square")
    eig = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if eig.size and eig[0] < -1e-10 * max(1.0, abs(eig[-1])):
        raise InputError(f"{name} is not positive semi-definite")
    return mat


def population_risk(cov_f, beta, eta2, label="population_risk"):
    """Linear-regression population risk ``1/2 eta^2 + 1/2 (beta - x)^T Sigma_f (beta - x)``.

    Passing a shifted test covariance gives the out-of-distribution risk.
    """
    cov_f = _check_psd(cov_f, "cov_f")
    beta = np.asarray(beta, dtype=np.float64)
    if eta2 < 0:
        raise InputError("eta2 must be >= 0")
    sb = cov_f @ beta
    return QuadraticStatistic(cov_f, -sb, 0.5 * float(beta @ sb) + 0.5 * eta2, label)


def loss_as_statistic(problem, regularized=False, label=None):
    """Empirical risk ``1/2 ||A x - b||^2`` (plus ``delta/2 ||x||^2`` if ``regularized``)."""
    a, b = problem.a_matrix, problem.b_vector
    t = a.T @ a
    if regularized:
        t = t + problem.delta * np.eye(problem.d)
    if label is None:
        label = "objective" if regularized else "loss"
    return QuadraticStatistic(t, -(a.T @ b), 0.5 * float(b @ b), label)


@dataclass(frozen=True, eq=False)
class RfMoments:
    """Monte Carlo estimates of the random-features moment matrices.

    ``sigma_sigma`` estimates ``E[s^T s | W]`` and ``sigma_hat`` estimates
    ``E[X_i^T s | W]`` where ``s = sigma(X_i W / sqrt(n0))``.
    """

    sigma_sigma: np.ndarray
    sigma_hat: np.ndarray
    mc_samples: int
    standard_error_bound: float


def estimate_rf_moments(w, cov_f, act, mc_samples, seed, batch=2048):
    """Estimate ``Sigma_sigma(W)`` and ``sigma_hat(W)`` from fresh rows ``X_i``.

    The standard error bound is the largest entrywise sample standard error
    over both matrices.
    """
    w = np.asarray(w, dtype=np.float64)
    n0, d = w.shape
    if mc_samples < 100:
        raise InputError("mc_samples must be >= 100")
    if cov_f.dimension != n0:
        raise InputError("cov_f dimension must equal the number of rows of W")
    rng = make_rng(seed, STREAM_MOMENTS)
    scale = 1.0 / math.sqrt(n0)
    ss = np.zeros((d, d))
    ss2 = np.zeros((d, d))
    xs = np.zeros((n0, d))
    xs2 = np.zeros((n0, d))
    done = 0
    while done < mc_samples:
        m = min(batch, mc_samples - done)
        x = cov_f.sample_rows(rng, m)
        s = act(x @ w * scale)
        ss += s.T @ s
        xs += x.T @ s
        sq = s * s
        ss2 += sq.T @ sq
        xs2 += (x * x).T @ sq
        done += m
    ss /= mc_samples
    xs /= mc_samples
    var_ss = np.clip(ss2 / mc_samples - ss * ss, 0.0, None) / (mc_samples - 1)
    var_xs = np.clip(xs2 / mc_samples - xs * xs, 0.0, None) / (mc_samples - 1)
    se = math.sqrt(max(var_ss.max(initial=0.0), var_xs.max(initial=0.0)))
    ss = 0.5 * (ss + ss.T)
    return RfMoments(ss, xs, int(mc_samples), se)


def rf_population_risk(moments, cov_f, beta, eta, label="rf_test_risk"):
    """Random-features test risk ``eta^2 + beta^T Sigma_f beta + x^T Sigma_sigma x - 2 beta^T sigma_hat x``.

    This risk has no 1/2 prefactor; it is stored as ``T = 2 Sigma_sigma``,
    ``u = -2 sigma_hat^T beta`` so that the common ``1/2 x^T T x`` convention
    evaluates it exactly.
    """
    beta = np.asarray(beta, dtype=np.float64)
    cov_f = np.asarray(cov_f, dtype=np.float64)
    n0, d = moments.sigma_hat.shape
    if beta.shape != (n0,) or cov_f.shape != (n0, n0):
        raise InputError("beta / cov_f dimensions do not match the moment estimates")
    return QuadraticStatistic(
        2.0 * moments.sigma_sigma,
        -2.0 * (moments.sigma_hat.T @ beta),
        eta**2 + float(beta @ cov_f @ beta),
        label,
    )


def rf_risk_standard_error(w, cov_f, act, beta, eta, xs, mc_samples, seed):
    """Monte Carlo standard error of the test risk at each row of ``xs``.

    Uses fresh samples ``(X_i, noise)``; the per-sample loss
    ``(X_i beta + eta w - s_i x)^2`` has the test risk as its mean, so
    ``std / sqrt(m)`` is the estimation error scale for that risk value.
    """
    w = np.asarray(w, dtype=np.float64)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n0 = w.shape[0]
    rng = make_rng(seed, STREAM_MOMENTS, 1)
    x = cov_f.sample_rows(rng, mc_samples)
    s = act(x @ w / math.sqrt(n0))
    resid = (x @ beta + eta * rng.standard_normal(mc_samples))[:, None] - s @ xs.T
    sq = resid * resid
    return sq.std(axis=0, ddof=1) / math.sqrt(mc_samples)
