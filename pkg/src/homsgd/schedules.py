"""Learning-rate schedules ``gamma(t)`` on the epoch clock and their integrals.

All functions accept scalars or numpy arrays for ``t``.
"""

from dataclasses import dataclass, field

import numpy as np

from homsgd.errors import InputError

KINDS = ("constant", "rational_decay", "exponential_to_limit", "piecewise_constant")


@dataclass(frozen=True)
class Schedule:
    """A learning-rate schedule.

    Parameters by kind:

    * ``constant``: ``gamma``
    * ``rational_decay``: ``c``, ``s`` with ``gamma(t) = c / (1 + t/s)``
    * ``exponential_to_limit``: ``limit``, ``initial``, ``s`` with
      ``gamma(t) = limit + (initial - limit) exp(-t/s)``
    * ``piecewise_constant``: ``breaks`` (increasing, > 0) and ``values``
      (one more than ``breaks``); right-continuous.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        p = dict(self.params)
        if self.kind == "constant":
            _need(p, "gamma")
            _nonneg(p, "gamma")
        elif self.kind == "rational_decay":
            _need(p, "c", "s")
            _nonneg(p, "c")
            _positive(p, "s")
        elif self.kind == "exponential_to_limit":
            _need(p, "limit", "initial", "s")
            _nonneg(p, "limit")
            _nonneg(p, "initial")
            _positive(p, "s")
        elif self.kind == "piecewise_constant":
            _need(p, "breaks", "values")
            breaks = tuple(float(x) for x in p["breaks"])
            values = tuple(float(x) for x in p["values"])
            if len(values) != len(breaks) + 1:
                raise InputError("piecewise_constant needs len(values) == len(breaks) + 1")
            if any(b <= 0 for b in breaks) or any(np.diff(breaks) <= 0):
                raise InputError("piecewise_constant breaks must be positive and increasing")
            if any(v < 0 or not np.isfinite(v) for v in values):
                raise InputError("piecewise_constant values must be finite and >= 0")
            p["breaks"], p["values"] = breaks, values
        else:
            raise InputError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "params", p)

    def to_mapping(self):
        out = {"kind": self.kind}
        for k, v in self.params.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_mapping(cls, mapping):
        mapping = dict(mapping)
        kind = mapping.pop("kind", None)
        if kind is None:
            raise InputError("schedule needs a 'kind'")
        return cls(kind, mapping)


def _need(p, *keys):
    missing = [k for k in keys if k not in p]
    if missing:
        raise InputError(f"schedule missing parameters {missing}")


def _nonneg(p, key):
    p[key] = float(p[key])
    if not np.isfinite(p[key]) or p[key] < 0:
        raise InputError(f"schedule parameter {key} must be finite and >= 0")


def _positive(p, key):
    p[key] = float(p[key])
    if not np.isfinite(p[key]) or p[key] <= 0:
        raise InputError(f"schedule parameter {key} must be finite and > 0")


def constant(gamma):
    return Schedule("constant", {"gamma": gamma})


def rational_decay(c, s):
    return Schedule("rational_decay", {"c": c, "s": s})


def exponential_to_limit(limit, initial, s):
    return Schedule("exponential_to_limit", {"limit": limit, "initial": initial, "s": s})


def piecewise_constant(breaks, values):
    return Schedule("piecewise_constant", {"breaks": breaks, "values": values})


def _as_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise InputError("schedule time must be >= 0")
    return t


def _scalar_or_array(value, t):
    return float(value) if np.ndim(t) == 0 else value


def gamma(schedule, t):
    """Learning rate at epoch time ``t``."""
    t = _as_time(t)
    p = schedule.params
    if schedule.kind == "constant":
        out = np.full_like(t, p["gamma"])
    elif schedule.kind == "rational_decay":
        out = p["c"] / (1.0 + t / p["s"])
    elif schedule.kind == "exponential_to_limit":
        out = p["limit"] + (p["initial"] - p["limit"]) * np.exp(-t / p["s"])
    else:
        seg = np.searchsorted(np.asarray(p["breaks"]), t, side="right")
        out = np.asarray(p["values"])[seg]
    return _scalar_or_array(out, t)


def big_gamma(schedule, t):
    """Integrated learning rate ``Gamma(t) = int_0^t gamma(s) ds`` in closed form."""
    t = _as_time(t)
    p = schedule.params
    if schedule.kind == "constant":
        out = p["gamma"] * t
    elif schedule.kind == "rational_decay":
        out = p["c"] * p["s"] * np.log1p(t / p["s"])
    elif schedule.kind == "exponential_to_limit":
        out = p["limit"] * t - p["s"] * (p["initial"] - p["limit"]) * np.expm1(-t / p["s"])
    else:
        breaks = np.asarray(p["breaks"])
        values = np.asarray(p["values"])
        starts = np.concatenate(([0.0], breaks))
        ends = np.concatenate((breaks, [np.inf]))
        tt = t[..., None]
        covered = np.clip(np.minimum(tt, ends) - starts, 0.0, None)
        out = covered @ values
    return _scalar_or_array(out, t)


def gamma_limit(schedule):
    """``lim_{t -> inf} gamma(t)``."""
    p = schedule.params
    if schedule.kind == "constant":
        return p["gamma"]
    if schedule.kind == "rational_decay":
        return 0.0
    if schedule.kind == "exponential_to_limit":
        return p["limit"]
    return p["values"][-1]


def gamma_sup(schedule):
    """``sup_t gamma(t)``."""
    p = schedule.params
    if schedule.kind == "constant":
        return p["gamma"]
    if schedule.kind == "rational_decay":
        return p["c"]
    if schedule.kind == "exponential_to_limit":
        return max(p["limit"], p["initial"])
    return max(p["values"])
