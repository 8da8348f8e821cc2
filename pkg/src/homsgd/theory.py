"""Deterministic predictions: gradient flow, Volterra curves, limits, thresholds.

Everything is evaluated in the eigenbasis of ``A^T A``.  With
``a_j = lambda_j + delta`` the gradient flow at integrated learning rate
``Gamma`` is

    nu_j(Gamma) = exp(-a_j Gamma) nu0_j + sigma_j (U^T b)_j (1 - exp(-a_j Gamma)) / a_j

and the Volterra kernel for a statistic with spectral Hessian diagonal
``d_j`` is ``K(t, s) = gamma(s)^2 / n * sum_j d_j lambda_j exp(-2 a_j (Gamma(t) - Gamma(s)))``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from homsgd.errors import InputError
from homsgd.schedules import big_gamma as schedule_big_gamma
from homsgd.schedules import gamma as schedule_gamma

DIVERGENCE_LEVEL = 1e12
_SERIES_CUTOFF = 1e-6


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Time points with cached ``gamma`` and ``Gamma`` values."""

    points: np.ndarray
    gamma_values: np.ndarray
    big_gamma_values: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 1 or pts[0] != 0.0 or np.any(np.diff(pts) <= 0):
            raise InputError("grid points must start at 0 and increase strictly")

    @property
    def size(self):
        return self.points.size

    @property
    def h(self):
        """Uniform spacing, or ``None`` for a non-uniform grid."""
        if self.points.size < 2:
            return None
        steps = np.diff(self.points)
        return float(steps.mean()) if np.allclose(steps, steps[0], rtol=1e-9, atol=0) else None


def grid_from_points(schedule, points):
    points = np.asarray(points, dtype=np.float64)
    return TimeGrid(
        points,
        np.asarray(schedule_gamma(schedule, points), dtype=np.float64),
        np.asarray(schedule_big_gamma(schedule, points), dtype=np.float64),
    )


def default_step(horizon):
    return min(1e-2, horizon / 2000.0)


def make_grid(schedule, horizon, h=None):
    """Uniform grid on ``[0, horizon]`` with spacing at most ``h``.

    The default spacing is ``min(1e-2, horizon / 2000)``.
    """
    if not horizon > 0:
        raise InputError("horizon must be positive")
    if h is None:
        h = default_step(horizon)
    if not h > 0:
        raise InputError("grid step must be positive")
    count = max(1, int(math.ceil(horizon / h - 1e-9)))
    return grid_from_points(schedule, np.linspace(0.0, horizon, count + 1))


def _check_grid(grid, schedule):
    expected = np.asarray(schedule_gamma(schedule, grid.points))
    if not np.allclose(expected, grid.gamma_values, rtol=1e-12, atol=1e-15):
        raise InputError("grid was built for a different schedule")


@dataclass(frozen=True, eq=False)
class SpectralStatProjection:
    """A quadratic statistic expressed in the eigenbasis of ``A^T A``.

    ``hess_diag`` holds ``(V^T T V)_jj``, the only part entering the kernel.
    """

    hess_diag: np.ndarray
    hess: np.ndarray
    grad: np.ndarray
    const: float
    label: str = ""

    def evaluate(self, nu):
        nu = np.asarray(nu, dtype=np.float64)
        if nu.ndim == 1:
            return 0.5 * float(nu @ self.hess @ nu) + float(self.grad @ nu) + self.const
        return 0.5 * np.einsum("ij,ij->i", nu @ self.hess, nu) + nu @ self.grad + self.const


def project_statistic(spec, stat):
    """Rotate ``stat`` into spectral coordinates ``nu = V^T x``."""
    if stat.dim != spec.d:
        raise InputError(f"statistic dimension {stat.dim} != d={spec.d}")
    v = spec.v_full
    hess = v.T @ stat.hessian @ v
    hess = 0.5 * (hess + hess.T)
    return SpectralStatProjection(np.diag(hess).copy(), hess, v.T @ stat.gradient0, stat.constant, stat.label)


def _flow_factors(rate, big_gamma):
    """``exp(-rate*Gamma)`` and ``(1 - exp(-rate*Gamma)) / rate`` with the rate -> 0 limit.

    ``big_gamma`` may be a scalar, an array (broadcast against a trailing
    spectral axis) or ``inf``.
    """
    bg = np.asarray(big_gamma, dtype=np.float64)[..., None]
    if np.all(np.isinf(bg)):
        decay = np.where(rate > 0, 0.0, 1.0) * np.ones_like(bg)
        safe = np.where(rate > 0, rate, 1.0)
        # rate == 0 coordinates carry no forcing (sigma_j = 0), so their factor is irrelevant
        return decay, np.where(rate > 0, 1.0 / safe, 0.0) * np.ones_like(bg)
    x = rate * bg
    decay = np.exp(-x)
    safe = np.where(rate > 0, rate, 1.0)
    factor = np.where(x < _SERIES_CUTOFF, bg * (1.0 - 0.5 * x), -np.expm1(-x) / safe)
    return decay, factor


def gradient_flow_spectral(spec, delta, nu0, big_gamma):
    """Spectral gradient-flow state(s) at integrated time(s) ``big_gamma``."""
    rate = spec.eigenvalues + delta
    decay, factor = _flow_factors(rate, big_gamma)
    return decay * nu0 + factor * spec.sigma_b


def gradient_flow_state(spec, delta, x0, big_gamma_t):
    """Gradient flow ``X^gf`` at integrated time ``big_gamma_t`` (``inf`` gives the limit)."""
    if big_gamma_t < 0:
        raise InputError("big_gamma_t must be >= 0")
    nu0 = spec.to_spectral(x0)
    return spec.from_spectral(gradient_flow_spectral(spec, delta, nu0, float(big_gamma_t)))


def forcing(spec, delta, x0, stat, grid):
    """``R(X^gf_{Gamma(t)})`` on the grid.

    ``stat`` may be a :class:`QuadraticStatistic`, a
    :class:`SpectralStatProjection`, or the string ``"loss"`` (empirical risk
    evaluated spectrally).
    """
    nu = gradient_flow_spectral(spec, delta, spec.to_spectral(x0), grid.big_gamma_values)
    if isinstance(stat, str):
        if stat != "loss":
            raise InputError(f"unknown named statistic {stat!r}")
        return spec.spectral_loss(nu)
    proj = stat if isinstance(stat, SpectralStatProjection) else project_statistic(spec, stat)
    return proj.evaluate(nu)


def kernel(spec, delta, proj, t, s, schedule):
    """Volterra kernel ``K(t, s)`` for a statistic with spectral Hessian diagonal ``proj.hess_diag``."""
    if t < s:
        raise InputError("kernel requires t >= s")
    g = float(schedule_gamma(schedule, s))
    dgam = float(schedule_big_gamma(schedule, t)) - float(schedule_big_gamma(schedule, s))
    lam = spec.eigenvalues
    weights = proj.hess_diag * lam
    return g * g / spec.n * float(weights @ np.exp(-2.0 * (lam + delta) * dgam))


def loss_kernel(spec, delta, t, s, schedule):
    """Kernel for the empirical risk itself (``d_j = lambda_j``)."""
    lam = spec.eigenvalues
    fake = SpectralStatProjection(lam, np.diag(lam), np.zeros_like(lam), 0.0, "loss")
    return kernel(spec, delta, fake, t, s, schedule)


@dataclass
class VolterraResult:
    """Solution of the loss Volterra equation on a grid."""

    values: np.ndarray
    forcing: np.ndarray
    diverged: bool = False
    reason: str = ""


def _march(grid, lam, delta, weights, n, forcing_values, psi=None):
    """Trapezoidal marching for ``F(t_i) = g(t_i) + int_0^{t_i} K(t_i, s) Psi(s) ds``.

    With ``psi=None`` the unknown is ``Psi`` itself (implicit diagonal).
    The convolution sum is carried as one exponentially-decaying
    accumulator per eigenvalue, so the cost is ``O(G d)``.
    """
    pts = grid.points
    bg = grid.big_gamma_values
    g2 = grid.gamma_values**2
    steps = np.diff(pts)
    rate2 = 2.0 * (lam + delta)
    wsum = float(weights.sum())
    size = pts.size
    out = np.full(size, np.nan)
    out[0] = forcing_values[0]
    acc = np.zeros_like(lam)
    diverged, reason = False, ""
    for i in range(1, size):
        src = out if psi is None else psi
        prev_w = 0.5 * (steps[i - 2] if i >= 2 else 0.0) + 0.5 * steps[i - 1]
        acc = np.exp(-rate2 * (bg[i] - bg[i - 1])) * (acc + prev_w * g2[i - 1] * src[i - 1])
        conv = float(weights @ acc) / n
        diag = 0.5 * steps[i - 1] * g2[i] * wsum / n
        if psi is None:
            denom = 1.0 - diag
            if denom <= 0.0:
                diverged, reason = True, "grid too coarse: 1 - (h/2) K(t, t) <= 0"
                break
            out[i] = (forcing_values[i] + conv) / denom
        else:
            out[i] = forcing_values[i] + conv + diag * psi[i]
        if not np.isfinite(out[i]) or abs(out[i]) > DIVERGENCE_LEVEL:
            diverged, reason = True, "solution exceeded divergence level"
            break
    return out, diverged, reason


def solve_psi(spec, delta, x0, schedule, grid):
    """Expected training loss ``Psi`` solving the loss Volterra equation.

    Returns
    -------
    VolterraResult
        ``values`` is NaN after a divergence stop.
    """
    _check_grid(grid, schedule)
    g = forcing(spec, delta, x0, "loss", grid)
    lam = spec.eigenvalues
    values, diverged, reason = _march(grid, lam, delta, lam * lam, spec.n, g)
    return VolterraResult(values, g, diverged, reason)


def solve_omega(spec, delta, x0, schedule, grid, psi, stat):
    """Expected statistic ``Omega`` (integrand uses ``Psi``, so no implicit solve)."""
    _check_grid(grid, schedule)
    psi = np.asarray(getattr(psi, "values", psi), dtype=np.float64)
    if psi.shape != grid.points.shape:
        raise InputError("psi must live on the same grid")
    proj = stat if isinstance(stat, SpectralStatProjection) else project_statistic(spec, stat)
    g = forcing(spec, delta, x0, proj, grid)
    lam = spec.eigenvalues
    values, _, _ = _march(grid, lam, delta, proj.hess_diag * lam, spec.n, g, psi=psi)
    return values


def _loss_trace(spec, delta):
    lam = spec.eigenvalues
    pos = lam > 0
    return float(np.sum(lam[pos] ** 2 / (lam[pos] + delta)))


def convergence_threshold(spec, delta):
    """Largest limiting learning rate with kernel mass below one: ``2n / sum lambda^2/(lambda+delta)``."""
    q = _loss_trace(spec, delta)
    return math.inf if q == 0.0 else 2.0 * spec.n / q


def kernel_mass(spec, delta, gamma_value):
    """``int_0^inf K(t) dt`` for constant learning rate ``gamma_value``."""
    return gamma_value / (2.0 * spec.n) * _loss_trace(spec, delta)


def limiting_values(spec, delta, gamma_limit, loss_gf_inf, stat_proj=None):
    """Limiting loss ``Psi_inf`` and excess risk ``Omega_inf - R(X^gf_inf)``.

    Returns ``(loss_gf_inf, 0)`` when ``gamma_limit == 0`` and ``(inf, inf)``
    when ``gamma_limit`` is at or above the convergence threshold.
    """
    if gamma_limit < 0:
        raise InputError("gamma_limit must be >= 0")
    if gamma_limit == 0:
        return float(loss_gf_inf), 0.0
    if gamma_limit >= convergence_threshold(spec, delta):
        return math.inf, math.inf
    psi_inf = loss_gf_inf / (1.0 - gamma_limit / (2.0 * spec.n) * _loss_trace(spec, delta))
    if stat_proj is None:
        return psi_inf, 0.0
    lam = spec.eigenvalues
    pos = lam > 0
    tr = float(np.sum(stat_proj.hess_diag[pos] * lam[pos] / (lam[pos] + delta)))
    return psi_inf, gamma_limit / (2.0 * spec.n) * psi_inf * tr


def expected_generative_forcing(spec, delta, energies, grid, which="loss", test_hess_diag=None, test_const=0.0):
    """Gradient-flow forcing averaged over the generative randomness.

    Parameters
    ----------
    energies : tuple
        ``(R, noise_sq_norm, R_hat)``: ``||beta||^2``, the realized ``||xi||^2``
        and ``E ||x0||^2``; ``beta``, ``xi`` and ``x0`` are isotropic.
    which : {"loss", "mse_risk", "population_risk"}
        ``population_risk`` needs ``test_hess_diag`` = diag of ``V^T Sigma V``
        for the test covariance and adds ``test_const`` (e.g. ``eta^2 / 2``).
    """
    r_sig, r_noise, r_init = (float(e) for e in energies)
    if min(r_sig, r_noise, r_init) < 0:
        raise InputError("energies must be >= 0")
    n, d, m = spec.n, spec.d, spec.rank_dim
    lam = spec.eigenvalues
    decay, factor = _flow_factors(lam + delta, grid.big_gamma_values)
    lc = lam * factor
    decay2 = decay * decay
    if which == "loss":
        sig_term = np.sum(lam * (lc - 1.0) ** 2, axis=-1)
        noise_term = np.sum((lc[..., :m] - 1.0) ** 2, axis=-1) + (n - m)
        init_term = np.sum(lam * decay2, axis=-1)
        return r_sig / (2 * d) * sig_term + r_noise / (2 * n) * noise_term + r_init / (2 * d) * init_term
    if which == "mse_risk":
        weights, const = np.ones(d), 0.0
    elif which == "population_risk":
        if test_hess_diag is None:
            raise InputError("population_risk needs test_hess_diag")
        weights, const = np.asarray(test_hess_diag, dtype=np.float64), float(test_const)
    else:
        raise InputError(f"unknown forcing kind {which!r}")
    sig_term = np.sum(weights * (lc - 1.0) ** 2, axis=-1)
    noise_term = np.sum(weights * lc * factor, axis=-1)
    init_term = np.sum(weights * decay2, axis=-1)
    return r_sig / (2 * d) * sig_term + r_noise / (2 * n) * noise_term + r_init / (2 * d) * init_term + const


@dataclass
class TheoryCurves:
    """``Psi`` and ``Omega`` for several statistics on one grid."""

    grid: TimeGrid
    psi: np.ndarray
    omega_per_stat: np.ndarray
    forcing_loss: np.ndarray
    forcing_stat: np.ndarray
    labels: list = field(default_factory=list)
    diverged: bool = False


def theory_curves(spec, delta, x0, schedule, grid, stats):
    """Solve for ``Psi`` once and ``Omega`` for every statistic in ``stats``."""
    sol = solve_psi(spec, delta, x0, schedule, grid)
    projs = [s if isinstance(s, SpectralStatProjection) else project_statistic(spec, s) for s in stats]
    omegas, forcings = [], []
    for proj in projs:
        forcings.append(forcing(spec, delta, x0, proj, grid))
        omegas.append(solve_omega(spec, delta, x0, schedule, grid, sol.values, proj))
    shape = (grid.size, len(projs))
    return TheoryCurves(
        grid,
        sol.values,
        np.column_stack(omegas) if omegas else np.empty(shape),
        sol.forcing,
        np.column_stack(forcings) if forcings else np.empty(shape),
        [p.label for p in projs],
        sol.diverged,
    )
