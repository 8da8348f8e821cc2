"""Single-sample multi-pass SGD on the epoch clock ``t = k / n``."""

from dataclasses import dataclass, field

import numpy as np

from homsgd import kernels
from homsgd.errors import InputError
from homsgd.generators import STREAM_SGD, make_rng
from homsgd.schedules import gamma as schedule_gamma
from homsgd.statistics import evaluate

DIVERGENCE_LEVEL = 1e12
_NORM_GUARD = 1e24


@dataclass
class Trajectory:
    """Recorded statistics of one optimizer path.

    ``values[i, s]`` is statistic ``labels[s]`` at ``times[i]``.  When
    ``diverged`` is set the arrays stop at the first record where a statistic
    left ``[-1e12, 1e12]`` (that record is kept).
    """

    times: np.ndarray
    values: np.ndarray
    labels: list
    seed: int
    meta: dict = field(default_factory=dict)
    diverged: bool = False

    def column(self, label):
        return self.values[:, self.labels.index(label)]


def record_steps(total_steps, stride):
    """Step indices at which statistics are recorded: ``0, stride, ...`` and the last step."""
    steps = list(range(0, total_steps + 1, stride))
    if steps[-1] != total_steps:
        steps.append(total_steps)
    return np.asarray(steps, dtype=np.int64)


def truncate_divergent(times, values):
    """Cut at the first record with a non-finite or huge statistic."""
    bad = ~np.isfinite(values) | (np.abs(values) > DIVERGENCE_LEVEL)
    rows = np.flatnonzero(bad.any(axis=1))
    if rows.size == 0:
        return times, values, False
    stop = rows[0] + 1
    return times[:stop], values[:stop], True


def run_sgd(problem, schedule, x0, horizon, stats, seed, record_stride=1, stream=(0,)):
    """Run ``floor(horizon * n)`` SGD steps and record ``stats``.

    At step ``k`` a row ``i_k`` is drawn uniformly with replacement and
    ``x <- x - gamma(k/n) [a_i (a_i . x - b_i) + delta/n x]``.

    Parameters
    ----------
    problem : Problem
    schedule : Schedule
    x0 : array_like, shape (d,)
    horizon : float
        Final epoch time ``T > 0``.
    stats : list of QuadraticStatistic
    seed : int
        Master seed; row indices come from its SGD stream.
    record_stride : int
        Record every ``record_stride`` steps (plus step 0 and the last step).
    stream : tuple of int
        Extra spawn key so that several runs can share one master seed.

    Returns
    -------
    Trajectory
        Divergence truncates the trajectory and sets ``diverged``.
    """
    n, d = problem.n, problem.d
    x = np.array(x0, dtype=np.float64)
    if x.shape != (d,):
        raise InputError(f"x0 must have length {d}")
    if not horizon > 0:
        raise InputError("horizon must be positive")
    if record_stride < 1:
        raise InputError("record_stride must be >= 1")
    total = int(np.floor(horizon * n + 1e-9))
    steps = record_steps(total, int(record_stride))
    rng = make_rng(seed, STREAM_SGD, *stream)
    idx = rng.integers(0, n, size=total, dtype=np.int64)
    gammas = np.asarray(schedule_gamma(schedule, np.arange(total) / n), dtype=np.float64).reshape(-1)
    a = np.ascontiguousarray(problem.a_matrix)
    b = np.ascontiguousarray(problem.b_vector)
    shrink = problem.delta / n

    snaps = np.empty((steps.size, d))
    snaps[0] = x
    filled = 1
    for r in range(1, steps.size):
        lo, hi = steps[r - 1], steps[r]
        ok = kernels.sgd_steps(a, b, x, idx[lo:hi], gammas[lo:hi], shrink)
        snaps[r] = x
        filled = r + 1
        if not ok or float(x @ x) > _NORM_GUARD:
            break
    times = steps[:filled] / n
    snaps = snaps[:filled]
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.column_stack([evaluate(s, snaps) for s in stats]) if stats else np.empty((filled, 0))
    times, values, diverged = truncate_divergent(times, values)
    diverged = diverged or filled < steps.size
    meta = {"n": n, "d": d, "steps": total, "record_stride": int(record_stride), "backend": kernels.BACKEND}
    return Trajectory(times, values, [s.label for s in stats], int(seed), meta, diverged)
