"""Experiment configuration: parsing, defaults per recipe, validation.

Configurations are TOML files (see ``configs/SCHEMA.md``).  Data file
paths are relative to the config file, ``output_dir`` to the working
directory.  A
``manifest.json`` written by a previous run is accepted as well; its
``config`` entry is the fully resolved configuration.
"""

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from homsgd.errors import ConfigError, InputError
from homsgd.schedules import Schedule

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RECIPES = ("gaussian_mse", "erm_risk", "ood_risk", "random_features", "custom")

STATISTICS_BY_RECIPE = {
    "gaussian_mse": ("loss", "objective", "mse", "population_risk"),
    "erm_risk": ("loss", "objective", "mse", "population_risk"),
    "ood_risk": ("loss", "objective", "mse", "population_risk", "ood_risk"),
    "random_features": ("loss", "objective", "rf_test_risk"),
    "custom": ("loss", "objective", "mse"),
}

DEFAULT_STATISTICS = {
    "gaussian_mse": ["loss", "mse"],
    "erm_risk": ["loss", "population_risk"],
    "ood_risk": ["loss", "population_risk", "ood_risk"],
    "random_features": ["loss", "rf_test_risk"],
    "custom": ["loss", "objective"],
}

_SECTIONS = {
    "dimensions": ("n", "d", "n0"),
    "covariance": ("kind", "scale", "eigenvalues", "matrix", "normalize_trace"),
    "targets": ("signal_energy", "noise_energy", "init_energy"),
    "problem": ("delta",),
    "run": ("horizon", "runs", "hsgd_runs", "record_every", "theory_step", "hsgd_step", "statistics"),
    "ood": ("kind", "scale", "eigenvalues", "matrix", "normalize_trace"),
    "random_features": ("activation", "mc_samples", "eta", "post_scale"),
    "custom": ("matrix_file", "format", "b_file"),
    "diagnostics": ("enabled", "theta", "contour_points", "epsilon", "pairs", "checks"),
}
_TOP_LEVEL = ("recipe", "seed", "output_dir", "schedule") + tuple(_SECTIONS)
_DIAG_CHECKS = ("delocalization", "init", "keylemma")


def _section(mapping, name):
    sec = mapping.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a table")
    unknown = sorted(set(sec) - set(_SECTIONS[name]))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown key")
    return sec


def _number(sec, key, path, default=None, minimum=None, strict=False, required=False):
    if key not in sec or sec[key] is None:
        if required:
            raise ConfigError(path, "required")
        return default
    value = sec[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(path, f"must be {'>' if strict else '>='} {minimum}")
    return value


def _integer(sec, key, path, default=None, minimum=0, required=False):
    if key not in sec or sec[key] is None:
        if required:
            raise ConfigError(path, "required")
        return default
    value = sec[key]
    if isinstance(value, bool) or not isinstance(value, int) and not (isinstance(value, float) and value.is_integer()):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def _covariance(sec, path, default_scale):
    """Normalize a covariance table into a plain mapping."""
    kind = sec.get("kind", "identity_scaled")
    out = {"kind": kind}
    if kind == "identity_scaled":
        out["scale"] = _number(sec, "scale", f"{path}.scale", default_scale, minimum=0.0)
    elif kind == "diagonal":
        eig = sec.get("eigenvalues")
        if not isinstance(eig, list) or not eig:
            raise ConfigError(f"{path}.eigenvalues", "required list of numbers for kind 'diagonal'")
        out["eigenvalues"] = [_number({"v": v}, "v", f"{path}.eigenvalues", minimum=0.0) for v in eig]
    elif kind == "dense":
        mat = sec.get("matrix")
        if not isinstance(mat, list) or not mat or not all(isinstance(r, list) for r in mat):
            raise ConfigError(f"{path}.matrix", "required nested list for kind 'dense'")
        out["matrix"] = [[_number({"v": v}, "v", f"{path}.matrix") for v in row] for row in mat]
    else:
        raise ConfigError(f"{path}.kind", f"unknown covariance kind {kind!r}")
    norm = sec.get("normalize_trace")
    if norm is not None:
        out["normalize_trace"] = _number(sec, "normalize_trace", f"{path}.normalize_trace", minimum=0.0, strict=True)
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description (all defaults filled in)."""

    recipe: str
    seed: int
    n: int
    d: int
    n0: int = None
    covariance: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    delta: float = 0.0
    schedule: Schedule = None
    horizon: float = 1.0
    runs: int = 0
    hsgd_runs: int = 0
    record_every: float = 0.01
    theory_step: float = None
    hsgd_step: float = None
    statistics: list = field(default_factory=list)
    ood: dict = None
    random_features: dict = None
    custom: dict = None
    diagnostics: dict = field(default_factory=dict)
    output_dir: str = "out"

    @classmethod
    def from_mapping(cls, mapping, base_dir=None):
        """Validate ``mapping`` and fill recipe defaults.

        Raises
        ------
        ConfigError
            With the dotted path of the first offending field.
        """
        if not isinstance(mapping, dict):
            raise ConfigError("<root>", "configuration must be a table")
        unknown = sorted(set(mapping) - set(_TOP_LEVEL))
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
        recipe = mapping.get("recipe")
        if recipe not in RECIPES:
            raise ConfigError("recipe", f"must be one of {list(RECIPES)}, got {recipe!r}")
        seed = _integer(mapping, "seed", "seed", 0)
        if seed >= 2**64:
            raise ConfigError("seed", "must fit in 64 bits")
        output_dir = mapping.get("output_dir", "out")
        if not isinstance(output_dir, str) or not output_dir:
            raise ConfigError("output_dir", "must be a non-empty string")

        dims = _section(mapping, "dimensions")
        cov = _section(mapping, "covariance")
        tgt = _section(mapping, "targets")
        prob = _section(mapping, "problem")
        run = _section(mapping, "run")
        diag = _section(mapping, "diagnostics")

        n0 = None
        rf = custom = ood = None
        if recipe == "random_features":
            n = _integer(dims, "n", "dimensions.n", 1200, minimum=1)
            d = _integer(dims, "d", "dimensions.d", round(n * 5 / 3), minimum=1)
            n0 = _integer(dims, "n0", "dimensions.n0", max(1, d // 2), minimum=1)
            sec = _section(mapping, "random_features")
            act = sec.get("activation", "normalized_relu")
            if act not in ("normalized_relu", "tanh", "identity"):
                raise ConfigError("random_features.activation", f"unknown activation {act!r}")
            post = sec.get("post_scale", "unit_rows")
            if post not in ("unit_rows", "inv_sqrt_n", "none"):
                raise ConfigError("random_features.post_scale", "must be unit_rows, inv_sqrt_n or none")
            rf = {
                "activation": act,
                "mc_samples": _integer(sec, "mc_samples", "random_features.mc_samples", 200_000, minimum=100),
                "eta": _number(sec, "eta", "random_features.eta", 0.0, minimum=0.0),
                "post_scale": post,
            }
            cov_out = _covariance(cov, "covariance", 1.0)
            defaults = {"delta": 0.0, "gamma": 1.5, "horizon": 8.0, "runs": 5, "targets": (1.0, 0.0, 0.0)}
        elif recipe == "custom":
            sec = _section(mapping, "custom")
            mfile = sec.get("matrix_file")
            if not isinstance(mfile, str):
                raise ConfigError("custom.matrix_file", "required path")
            fmt = sec.get("format", "csv_with_header")
            if fmt not in ("csv_with_header", "raw_binary_f64_row_major"):
                raise ConfigError("custom.format", f"unknown format {fmt!r}")
            bfile = sec.get("b_file")
            if bfile is not None and not isinstance(bfile, str):
                raise ConfigError("custom.b_file", "must be a path")
            if base_dir is not None:
                mfile = str(Path(base_dir) / mfile) if not Path(mfile).is_absolute() else mfile
                if bfile is not None and not Path(bfile).is_absolute():
                    bfile = str(Path(base_dir) / bfile)
            custom = {"matrix_file": mfile, "format": fmt, "b_file": bfile}
            # shape comes from the file; recorded after loading
            n = _integer(dims, "n", "dimensions.n", 0)
            d = _integer(dims, "d", "dimensions.d", 0)
            cov_out = {}
            if "schedule" not in mapping:
                raise ConfigError("schedule", "required for recipe 'custom'")
            defaults = {"delta": 0.0, "gamma": None, "horizon": 5.0, "runs": 1, "targets": (1.0, 0.0, 0.0)}
        else:
            d = _integer(dims, "d", "dimensions.d", 400, minimum=1)
            n = _integer(dims, "n", "dimensions.n", max(1, round(0.9 * d)), minimum=1)
            cov_out = _covariance(cov, "covariance", 1.0 / d)
            if recipe == "ood_risk":
                if "ood" not in mapping:
                    raise ConfigError("ood", "required for recipe 'ood_risk'")
                ood = _covariance(_section(mapping, "ood"), "ood", 1.0 / d)
            defaults = {"delta": 0.1, "gamma": 0.8, "horizon": 5.0, "runs": 10, "targets": (1.0, 2.25, 4.0)}
        if "n0" in dims and recipe != "random_features":
            raise ConfigError("dimensions.n0", "only used by recipe 'random_features'")

        r_def, nz_def, init_def = defaults["targets"]
        targets = {
            "signal_energy": _number(tgt, "signal_energy", "targets.signal_energy", r_def, minimum=0.0),
            "noise_energy": _number(tgt, "noise_energy", "targets.noise_energy", nz_def, minimum=0.0),
            "init_energy": _number(tgt, "init_energy", "targets.init_energy", init_def, minimum=0.0),
        }
        delta = _number(prob, "delta", "problem.delta", defaults["delta"], minimum=0.0)

        sched_map = mapping.get("schedule", {"kind": "constant", "gamma": defaults["gamma"]})
        if not isinstance(sched_map, dict):
            raise ConfigError("schedule", "must be a table")
        try:
            schedule = Schedule.from_mapping(sched_map)
        except InputError as exc:
            raise ConfigError("schedule", str(exc)) from None

        horizon = _number(run, "horizon", "run.horizon", defaults["horizon"], minimum=0.0, strict=True)
        runs = _integer(run, "runs", "run.runs", defaults["runs"])
        hsgd_runs = _integer(run, "hsgd_runs", "run.hsgd_runs", runs)
        record_every = _number(run, "record_every", "run.record_every", 0.01, minimum=0.0, strict=True)
        theory_step = _number(run, "theory_step", "run.theory_step", None, minimum=0.0, strict=True)
        hsgd_step = _number(run, "hsgd_step", "run.hsgd_step", None, minimum=0.0, strict=True)
        if hsgd_step is not None and hsgd_step > 0.1:
            raise ConfigError("run.hsgd_step", "must be <= 0.1")
        stats = run.get("statistics", DEFAULT_STATISTICS[recipe])
        if not isinstance(stats, list) or not stats or not all(isinstance(s, str) for s in stats):
            raise ConfigError("run.statistics", "must be a non-empty list of names")
        allowed = STATISTICS_BY_RECIPE[recipe]
        for k, s in enumerate(stats):
            if s not in allowed:
                raise ConfigError(f"run.statistics[{k}]", f"{s!r} not available for recipe {recipe!r}; choose from {list(allowed)}")
        if len(set(stats)) != len(stats):
            raise ConfigError("run.statistics", "duplicate names")

        checks = diag.get("checks", list(_DIAG_CHECKS))
        if not isinstance(checks, list) or any(c not in _DIAG_CHECKS for c in checks):
            raise ConfigError("diagnostics.checks", f"must be a list drawn from {list(_DIAG_CHECKS)}")
        enabled = diag.get("enabled", False)
        if not isinstance(enabled, bool):
            raise ConfigError("diagnostics.enabled", "must be true or false")
        theta = _number(diag, "theta", "diagnostics.theta", 0.4)
        if not 0 < theta < 0.5:
            raise ConfigError("diagnostics.theta", "must lie in (0, 1/2)")
        diagnostics = {
            "enabled": enabled,
            "theta": theta,
            "contour_points": _integer(diag, "contour_points", "diagnostics.contour_points", 256, minimum=16),
            "epsilon": _number(diag, "epsilon", "diagnostics.epsilon", 0.2, minimum=0.0, strict=True),
            "pairs": _integer(diag, "pairs", "diagnostics.pairs", 64, minimum=1),
            "checks": list(checks),
        }
        return cls(recipe, seed, n, d, n0, cov_out, targets, delta, schedule, horizon, runs, hsgd_runs,
                   record_every, theory_step, hsgd_step, list(stats), ood, rf, custom, diagnostics, output_dir)

    def to_mapping(self):
        """Resolved configuration as plain data (round-trips through :meth:`from_mapping`)."""
        dims = {"n": self.n, "d": self.d}
        if self.n0 is not None:
            dims["n0"] = self.n0
        out = {
            "recipe": self.recipe,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dimensions": dims,
            "targets": dict(self.targets),
            "problem": {"delta": self.delta},
            "schedule": self.schedule.to_mapping(),
            "run": {
                "horizon": self.horizon,
                "runs": self.runs,
                "hsgd_runs": self.hsgd_runs,
                "record_every": self.record_every,
                "statistics": list(self.statistics),
            },
            "diagnostics": dict(self.diagnostics),
        }
        if self.covariance:
            out["covariance"] = dict(self.covariance)
        if self.theory_step is not None:
            out["run"]["theory_step"] = self.theory_step
        if self.hsgd_step is not None:
            out["run"]["hsgd_step"] = self.hsgd_step
        if self.ood is not None:
            out["ood"] = dict(self.ood)
        if self.random_features is not None:
            out["random_features"] = dict(self.random_features)
        if self.custom is not None:
            out["custom"] = {k: v for k, v in self.custom.items() if v is not None}
        return out


def load_config(path):
    """Read a TOML config or a ``manifest.json`` and validate it.

    Raises
    ------
    OSError
        The file cannot be read.
    ConfigError
        Parse or validation failure.
    """
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".json":
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict) or "config" not in data:
            raise ConfigError("config", "manifest has no 'config' entry")
        # a manifest stores absolute or already-resolved paths
        return ExperimentConfig.from_mapping(data["config"])
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from None
    return ExperimentConfig.from_mapping(data, base_dir=path.parent)
