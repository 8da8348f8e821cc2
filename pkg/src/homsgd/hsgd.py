"""Euler-Maruyama integration of homogenized SGD in spectral coordinates.

The state is ``Y = V^T X``.  In that basis the diffusion matrix is diagonal,
so one step costs ``O(d)``:

    Y <- Y - h g [(lambda + delta) Y - sigma * bt] + sqrt(h) g sqrt(2 L(Y) / n) sigma * xi

with ``L(Y) = 1/2 (sum_j (sigma_j Y_j - bt_j)^2 + ||bt beyond rank||^2)``.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from homsgd import kernels
from homsgd.errors import InputError
from homsgd.generators import STREAM_HSGD, make_rng
from homsgd.schedules import gamma as schedule_gamma
from homsgd.sgd import DIVERGENCE_LEVEL, Trajectory
from homsgd.theory import SpectralStatProjection, project_statistic

MAX_STEP = 0.1
# cap on doubles of pre-drawn noise held at once
_NOISE_BUDGET = 1 << 21
# paths integrated together; fixed so that results do not depend on the worker count
PATH_BLOCK = 8


def default_step(n):
    return min(1.0 / (4.0 * n), 1e-3)


@dataclass(frozen=True)
class SdeConfig:
    """Integrator settings.

    Parameters
    ----------
    step_h : float or None
        Step in epoch units; ``None`` picks ``min(1/(4n), 1e-3)``.
    noise_enabled : bool
        ``False`` drops the diffusion term (gradient flow by Euler).
    seed : int
        Master seed; path ``p`` uses its own stream derived from it.
    """

    step_h: float = None
    noise_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.step_h is not None:
            h = float(self.step_h)
            if not (h > 0 and h <= MAX_STEP):
                raise InputError(f"step_h must lie in (0, {MAX_STEP}], got {self.step_h}")
            object.__setattr__(self, "step_h", h)

    def resolved_step(self, n):
        return self.step_h if self.step_h is not None else default_step(n)


def clock(horizon, h, record_dt=None):
    """Effective step, steps per record and number of records.

    The step is shrunk so that it divides ``record_dt`` exactly; the
    horizon is then rounded to a whole number of records.
    """
    if not horizon > 0:
        raise InputError("horizon must be positive")
    if record_dt is None:
        record_dt = h
    if record_dt < h * (1 - 1e-12):
        raise InputError("record_dt must be >= step_h")
    stride = max(1, int(math.ceil(record_dt / h - 1e-9)))
    h_eff = record_dt / stride
    records = max(1, int(round(horizon / record_dt)))
    return h_eff, stride, records


def _projections(spec, stats):
    return [s if isinstance(s, SpectralStatProjection) else project_statistic(spec, s) for s in stats]


def _eval(projs, y):
    with np.errstate(over="ignore", invalid="ignore"):
        return np.column_stack([p.evaluate(y) for p in projs]) if projs else np.empty((y.shape[0], 0))


def _run_group(spec, delta, gammas, y0, projs, noisy, h, stride, records, rngs):
    """Integrate a group of paths.

    Returns values ``(P, records + 1, S)``, the last valid record per path
    and per-path divergence flags.
    """
    npath, d = y0.shape
    y = np.array(y0, dtype=np.float64)
    values = np.full((npath, records + 1, len(projs)), np.nan)
    values[:, 0] = _eval(projs, y)
    stop = np.full(npath, records, dtype=np.int64)
    diverged = np.zeros(npath, dtype=bool)
    alive = np.arange(npath)
    sig = np.ascontiguousarray(spec.sigma_padded)
    bt = np.ascontiguousarray(spec.b_padded)
    rate = np.ascontiguousarray(spec.eigenvalues + delta)
    sb = np.ascontiguousarray(spec.sigma_b)
    resid = spec.residual_b2
    inv_n = 1.0 / spec.n
    chunk = max(1, min(stride, _NOISE_BUDGET // max(1, npath * d)))
    empty = np.empty((npath, 0, d))
    for r in range(1, records + 1):
        ya = np.ascontiguousarray(y[alive])
        base = (r - 1) * stride
        for lo in range(0, stride, chunk):
            hi = min(stride, lo + chunk)
            g = gammas[base + lo: base + hi]
            if noisy:
                noise = np.stack([rngs[p].standard_normal((hi - lo, d)) for p in alive])
            else:
                noise = empty[: alive.size]
            kernels.hsgd_steps(ya, noise, g, sig, bt, rate, sb, resid, h, inv_n, noisy)
        y[alive] = ya
        vals = _eval(projs, ya)
        values[alive, r] = vals
        bad = ~np.isfinite(vals).all(axis=1) | (np.abs(vals) > DIVERGENCE_LEVEL).any(axis=1)
        bad |= ~np.isfinite(ya).all(axis=1)
        if bad.any():
            stop[alive[bad]] = r
            diverged[alive[bad]] = True
            alive = alive[~bad]
            if alive.size == 0:
                break
    return values, stop, diverged


def run_hsgd_ensemble(spec, problem_delta, schedule, x0, horizon, stats, cfg, n_paths=1,
                      record_dt=None, workers=1, stream=()):
    """Integrate ``n_paths`` independent HSGD paths from the same ``x0``.

    Parameters
    ----------
    record_dt : float, optional
        Recording interval in epoch units (default: every step).  The step
        size is adjusted down so that records fall exactly on ``k *
        record_dt``, matching the SGD clock when ``record_dt = stride / n``.
    workers : int
        Threads used for blocks of ``PATH_BLOCK`` paths; results do not
        depend on it.
    stream : tuple of int
        Extra spawn key shared by all paths (path ``p`` appends ``p``).

    Returns
    -------
    list of Trajectory
    """
    if n_paths < 1:
        raise InputError("n_paths must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (spec.d,):
        raise InputError(f"x0 must have length {spec.d}")
    h, stride, records = clock(horizon, cfg.resolved_step(spec.n), record_dt)
    total = stride * records
    gammas = np.asarray(schedule_gamma(schedule, np.arange(total) * h), dtype=np.float64).reshape(-1)
    projs = _projections(spec, stats)
    y0 = np.tile(spec.to_spectral(x0), (n_paths, 1))
    rngs = [make_rng(cfg.seed, STREAM_HSGD, *stream, p) for p in range(n_paths)]
    times = np.arange(records + 1) * (stride * h)

    groups = [np.arange(lo, min(lo + PATH_BLOCK, n_paths)) for lo in range(0, n_paths, PATH_BLOCK)]
    workers = max(1, min(int(workers), len(groups)))

    def work(group):
        return _run_group(spec, problem_delta, gammas, y0[group], projs, cfg.noise_enabled,
                          h, stride, records, [rngs[p] for p in group])

    if workers == 1:
        results = [work(g) for g in groups]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, groups))

    labels = [p.label for p in projs]
    out = []
    for group, (values, stop, diverged) in zip(groups, results):
        for k, p in enumerate(group):
            end = stop[k] + 1
            meta = {"path": int(p), "step_h": h, "steps": total, "record_stride": stride,
                    "noise_enabled": bool(cfg.noise_enabled), "backend": kernels.BACKEND}
            out.append(Trajectory(times[:end].copy(), values[k, :end].copy(), labels, int(cfg.seed), meta,
                                  bool(diverged[k])))
    return out


def run_hsgd(spec, problem_delta, schedule, x0, horizon, stats, cfg, record_dt=None, stream=()):
    """Single HSGD path driven by the same random stream as path 0 of :func:`run_hsgd_ensemble`."""
    return run_hsgd_ensemble(spec, problem_delta, schedule, x0, horizon, stats, cfg, 1, record_dt,
                             1, stream)[0]
