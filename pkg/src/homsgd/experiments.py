"""Experiment recipes, shared clock, runs and CSV/JSON outputs."""

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from homsgd import __version__, diagnostics, kernels
from homsgd import generators as gen
from homsgd import statistics as st
from homsgd import theory
from homsgd.errors import ConfigError, InputError
from homsgd.hsgd import SdeConfig, run_hsgd_ensemble
from homsgd.schedules import big_gamma, gamma_limit
from homsgd.sgd import run_sgd
from homsgd.spectral import Problem, decompose

WORKERS_ENV = "HOMSGD_WORKERS"

TRAJECTORY_HEADER = ("run_id", "t", "stat_label", "value", "source")
METRICS_HEADER = ("metric", "stat_label", "run_id", "t", "value")
LIMITS_HEADER = ("stat_label", "threshold", "gamma_limit", "psi_inf", "excess_risk_inf", "risk_gf_inf", "big_gamma_T")
DIAGNOSTICS_HEADER = ("check", "quantity", "value", "bound", "passed", "detail")
COMPARE_HEADER = ("left", "right", "stat_label", "sup_abs_diff", "mean_abs_diff")


def worker_count(environ=None):
    """Worker threads from ``HOMSGD_WORKERS`` (default 1)."""
    environ = os.environ if environ is None else environ
    raw = environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"expected a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(WORKERS_ENV, "must be >= 1")
    return value


def covariance_from_mapping(mapping, dimension, path):
    """Build a :class:`CovarianceSpec`, reporting problems at ``path``."""
    try:
        kind = mapping["kind"]
        if kind == "identity_scaled":
            cov = gen.CovarianceSpec.identity_scaled(dimension, mapping["scale"])
        elif kind == "diagonal":
            cov = gen.CovarianceSpec.diagonal(mapping["eigenvalues"])
        else:
            cov = gen.CovarianceSpec.dense(mapping["matrix"])
        if cov.dimension != dimension:
            raise ConfigError(path, f"covariance dimension {cov.dimension} does not match {dimension}")
        if "normalize_trace" in mapping:
            cov = cov.rescaled(mapping["normalize_trace"])
    except InputError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None
    return cov


@dataclass
class Instance:
    """A concrete problem plus everything needed to observe it."""

    problem: Problem
    spectral: object
    x0: np.ndarray
    stats: list
    beta: np.ndarray = None
    info: dict = field(default_factory=dict)

    @property
    def labels(self):
        return [s.label for s in self.stats]


def _activation(name):
    return gen.Activation.identity() if name == "identity" else gen.Activation.by_name(name)


def build_instance(cfg):
    """Generate (or load) the problem described by ``cfg``.

    ``cfg.n`` and ``cfg.d`` are filled in from the matrix file for the
    ``custom`` recipe.
    """
    seed = cfg.seed
    tg = cfg.targets
    info = {}
    cov = None
    if cfg.recipe == "random_features":
        rf = cfg.random_features
        cov = covariance_from_mapping(cfg.covariance, cfg.n0, "covariance")
        act = _activation(rf["activation"])
        a, w, x = gen.random_features_design(cfg.n, cfg.n0, cfg.d, cov, act, seed)
        beta = gen.random_signal(cfg.n0, tg["signal_energy"], seed)
        b = x @ beta
        if rf["eta"] > 0:
            b = b + rf["eta"] * gen.make_rng(seed, gen.STREAM_FEATURE_NOISE).standard_normal(cfg.n)
        scale = {"unit_rows": 1.0 / math.sqrt(cfg.d), "inv_sqrt_n": 1.0 / math.sqrt(cfg.n), "none": 1.0}[rf["post_scale"]]
        problem = Problem(a * scale, b * scale, cfg.delta)
        x0 = gen.random_init(cfg.d, tg["init_energy"], seed)
        moments = None
        if "rf_test_risk" in cfg.statistics:
            moments = st.estimate_rf_moments(w, cov, act, rf["mc_samples"], seed)
            info["rf_moments_se"] = moments.standard_error_bound
            info["rf_mc_samples"] = moments.mc_samples
        info.update({"w": w, "x": x, "cov_f": cov, "activation": act, "moments": moments, "eta": rf["eta"]})
    elif cfg.recipe == "custom":
        c = cfg.custom
        a = gen.load_matrix(c["matrix_file"], c["format"])
        cfg.n, cfg.d = a.shape
        if c["b_file"] is not None:
            b = gen.load_matrix(c["b_file"], c["format"])
            if b.shape not in ((cfg.n, 1), (1, cfg.n)):
                raise ConfigError("custom.b_file", f"expected a single column of length {cfg.n}, got {b.shape}")
            b, beta = b.reshape(-1), None
        else:
            spec = gen.GenerativeTargetSpec(tg["signal_energy"], tg["noise_energy"], tg["init_energy"])
            b, beta, _ = gen.generative_targets(a, spec, seed)
        problem = Problem(a, b, cfg.delta)
        x0 = gen.random_init(cfg.d, tg["init_energy"], seed)
    else:
        cov = covariance_from_mapping(cfg.covariance, cfg.d, "covariance")
        a = gen.gaussian_design(cfg.n, cfg.d, cov, seed)
        spec = gen.GenerativeTargetSpec(tg["signal_energy"], tg["noise_energy"], tg["init_energy"])
        b, beta, _ = gen.generative_targets(a, spec, seed)
        problem = Problem(a, b, cfg.delta)
        x0 = gen.random_init(cfg.d, tg["init_energy"], seed)
        info["cov"] = cov
    spectral = decompose(problem)
    stats = [_statistic(name, k, cfg, problem, beta, cov, info) for k, name in enumerate(cfg.statistics)]
    return Instance(problem, spectral, x0, stats, beta, info)


def _statistic(name, k, cfg, problem, beta, cov, info):
    path = f"run.statistics[{k}]"
    if name == "loss":
        return st.loss_as_statistic(problem)
    if name == "objective":
        return st.loss_as_statistic(problem, regularized=True)
    if name == "mse":
        if beta is None:
            raise ConfigError(path, "'mse' needs a known signal (no b_file)")
        return st.mse_to_signal(beta)
    eta2 = cfg.targets["noise_energy"] / cfg.n
    if name == "population_risk":
        return st.population_risk(cov.matrix(), beta, eta2)
    if name == "ood_risk":
        test_cov = covariance_from_mapping(cfg.ood, cfg.d, "ood")
        return st.population_risk(test_cov.matrix(), beta, eta2, label="ood_risk")
    if name == "rf_test_risk":
        return st.rf_population_risk(info["moments"], info["cov_f"].matrix(), beta, info["eta"])
    raise ConfigError(path, f"unknown statistic {name!r}")


@dataclass(frozen=True)
class Clock:
    """Common recording grid: ``t_r = r * stride / n`` for ``r = 0..records``."""

    n: int
    stride: int
    records: int

    @property
    def record_dt(self):
        return self.stride / self.n

    @property
    def horizon(self):
        return self.records * self.stride / self.n

    @property
    def times(self):
        return np.arange(self.records + 1) * self.stride / self.n


def make_clock(n, horizon, record_every):
    """Round ``record_every`` to whole SGD steps and ``horizon`` to whole records."""
    stride = max(1, int(round(record_every * n)))
    records = max(1, int(round(horizon * n / stride)))
    return Clock(n, stride, records)


def theory_grid(schedule, clock, step=None):
    """Uniform theory grid refining the clock; every ``q``-th point is a record time."""
    if step is None:
        step = theory.default_step(clock.horizon)
    q = max(1, int(math.ceil(clock.record_dt / step - 1e-9)))
    points = np.arange(clock.records * q + 1) * clock.stride / (clock.n * q)
    return theory.grid_from_points(schedule, points), q


def simulate_sgd(inst, schedule, clock, runs, seed, workers=1):
    """``runs`` independent SGD runs on the clock; run ``r`` uses seed stream ``r``."""
    total_horizon = clock.horizon

    def one(r):
        return run_sgd(inst.problem, schedule, inst.x0, total_horizon, inst.stats, seed, clock.stride, stream=(r,))

    if workers > 1 and runs > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(runs)))
    return [one(r) for r in range(runs)]


def simulate_hsgd(inst, schedule, clock, paths, seed, step=None, workers=1):
    """``paths`` HSGD paths recorded on the clock (path ``p`` pairs with SGD run ``p``)."""
    if paths == 0:
        return []
    cfg = SdeConfig(step, True, seed)
    trajs = run_hsgd_ensemble(inst.spectral, inst.problem.delta, schedule, inst.x0, clock.horizon, inst.stats,
                              cfg, paths, clock.record_dt, workers)
    canonical = clock.times
    for tr in trajs:
        tr.times = canonical[: tr.times.size].copy()
    return trajs


@dataclass
class TheoryOnClock:
    times: np.ndarray
    psi: np.ndarray
    omega: np.ndarray
    forcing: np.ndarray
    labels: list
    diverged: bool
    curves: object


def solve_theory(inst, schedule, clock, step=None):
    grid, q = theory_grid(schedule, clock, step)
    curves = theory.theory_curves(inst.spectral, inst.problem.delta, inst.x0, schedule, grid, inst.stats)
    return TheoryOnClock(clock.times, curves.psi[::q], curves.omega_per_stat[::q], curves.forcing_stat[::q],
                         curves.labels, curves.diverged, curves)


def limit_rows(inst, schedule, horizon):
    """One row per statistic with threshold, gamma limit and limiting values."""
    spec, delta = inst.spectral, inst.problem.delta
    thr = theory.convergence_threshold(spec, delta)
    gl = gamma_limit(schedule)
    nu_inf = theory.gradient_flow_spectral(spec, delta, spec.to_spectral(inst.x0), math.inf)
    loss_inf = float(spec.spectral_loss(nu_inf))
    rows = []
    for stat in inst.stats:
        proj = theory.project_statistic(spec, stat)
        psi_inf, excess = theory.limiting_values(spec, delta, gl, loss_inf, proj)
        rows.append((stat.label, thr, gl, psi_inf, excess, float(proj.evaluate(nu_inf)), float(big_gamma(schedule, horizon))))
    return rows


def mean_curve(trajs, records):
    """Mean over runs that cover the full clock; ``None`` if none do."""
    full = [t.values for t in trajs if not t.diverged and t.values.shape[0] == records + 1]
    if not full:
        return None
    return np.mean(np.stack(full), axis=0)


def comparison_metrics(sgd, hsgd, th, labels, records):
    """Rows of ``(metric, stat_label, run_id, t, value)``."""
    rows = []
    mean = mean_curve(sgd, records)
    for s, label in enumerate(labels):
        if mean is not None and not th.diverged:
            rows.append(("sup_dev_sgd_vs_theory", label, "", "", float(np.max(np.abs(mean[:, s] - th.omega[:, s])))))
        hmean = mean_curve(hsgd, records)
        if hmean is not None and not th.diverged:
            rows.append(("sup_dev_hsgd_vs_theory", label, "", "", float(np.max(np.abs(hmean[:, s] - th.omega[:, s])))))
        for r, (a, b) in enumerate(zip(sgd, hsgd)):
            m = min(a.values.shape[0], b.values.shape[0])
            dev = float(np.max(np.abs(a.values[:m, s] - b.values[:m, s])))
            rows.append(("sup_dev_sgd_vs_hsgd", label, r, "", dev))
        full = [t.values[:, s] for t in sgd if t.values.shape[0] == records + 1]
        if len(full) >= 2:
            stack = np.stack(full)
            spread = stack.max(axis=0) - stack.min(axis=0)
            rows.append(("sup_across_run_range", label, "", "", float(spread.max())))
            for t, v in zip(th.times, spread):
                rows.append(("across_run_range", label, "", t, float(v)))
    for r, tr in enumerate(sgd):
        rows.append(("diverged_sgd", "", r, "", float(tr.diverged)))
    for r, tr in enumerate(hsgd):
        rows.append(("diverged_hsgd", "", r, "", float(tr.diverged)))
    rows.append(("diverged_theory", "", "", "", float(th.diverged)))
    return rows


def diagnostic_rows(inst, opts):
    """Rows of ``(check, quantity, value, bound, passed, detail)``."""
    spec = inst.spectral
    contour = diagnostics.build_contour(spec, opts["contour_points"])
    rows = []
    if "delocalization" in opts["checks"]:
        rep = diagnostics.check_delocalization(spec, inst.problem.b_vector, opts["theta"], contour)
        detail = "sampled" if rep.sampled else "full"
        for q, v, bound, ok in rep.rows():
            rows.append(("delocalization", q, v, bound, ok, detail))
    if "init" in opts["checks"]:
        rep = diagnostics.check_init(spec, inst.x0, opts["theta"], contour)
        rows.append(("init", "max_rx0", rep.max_value, rep.bound, rep.passed, ""))
    if "keylemma" in opts["checks"]:
        for stat in inst.stats:
            rep = diagnostics.check_statistic_keylemma(spec, stat, opts["epsilon"], contour, opts["pairs"])
            rows.append(("keylemma", stat.label, rep.max_deviation, rep.bound, rep.passed, f"pairs={rep.pairs}"))
    for stat in inst.stats:
        h2 = st.h2_norm(stat)
        rows.append(("h2_norm", stat.label, h2, st.H2_WARNING_THRESHOLD, h2 <= st.H2_WARNING_THRESHOLD, ""))
    return rows


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def trajectory_rows(sgd, hsgd, th, labels):
    for source, trajs in (("sgd", sgd), ("hsgd", hsgd)):
        for r, tr in enumerate(trajs):
            for i, t in enumerate(tr.times):
                for s, label in enumerate(labels):
                    yield (r, float(t), label, float(tr.values[i, s]), source)
    for i, t in enumerate(th.times):
        yield (0, float(t), "loss", float(th.psi[i]), "theory_psi")
    for source, arr in (("theory_omega", th.omega), ("theory_forcing", th.forcing)):
        for s, label in enumerate(labels):
            for i, t in enumerate(th.times):
                yield (0, float(t), label, float(arr[i, s]), source)


@dataclass
class ExperimentResult:
    config: object
    instance: Instance
    clock: Clock
    sgd: list
    hsgd: list
    theory: TheoryOnClock
    limits: list
    metrics: list
    diagnostics: list
    output_dir: Path


def _seed_lineage(cfg, clock):
    return {
        "master": cfg.seed,
        "derivation": "numpy SeedSequence(master, spawn_key=stream)",
        "streams": {
            "design": [gen.STREAM_DESIGN],
            "features_x": [gen.STREAM_FEATURES_X],
            "features_w": [gen.STREAM_FEATURES_W],
            "beta": [gen.STREAM_BETA],
            "noise": [gen.STREAM_NOISE],
            "init": [gen.STREAM_INIT],
            "moments": [gen.STREAM_MOMENTS],
            "feature_noise": [gen.STREAM_FEATURE_NOISE],
        },
        "sgd_runs": [[gen.STREAM_SGD, r] for r in range(cfg.runs)],
        "hsgd_paths": [[gen.STREAM_HSGD, p] for p in range(cfg.hsgd_runs)],
        "clock": {"stride": clock.stride, "records": clock.records, "record_dt": clock.record_dt,
                  "horizon": clock.horizon},
    }


def run_experiment(cfg, workers=None, output_dir=None, diagnostics_only=False):
    """Run every part of ``cfg`` and write the output files.

    Parameters
    ----------
    cfg : ExperimentConfig
    workers : int, optional
        Defaults to :func:`worker_count`.  Outputs do not depend on it.
    output_dir : str, optional
        Overrides ``cfg.output_dir``.
    diagnostics_only : bool
        Only build the instance and write ``diagnostics.csv`` (plus manifest).

    Returns
    -------
    ExperimentResult
    """
    start = time.perf_counter()
    workers = worker_count() if workers is None else int(workers)
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    inst = build_instance(cfg)
    clock = make_clock(inst.problem.n, cfg.horizon, cfg.record_every)
    out.mkdir(parents=True, exist_ok=True)

    diag_rows = []
    if diagnostics_only or cfg.diagnostics.get("enabled"):
        diag_rows = diagnostic_rows(inst, cfg.diagnostics)
        write_csv(out / "diagnostics.csv", DIAGNOSTICS_HEADER, diag_rows)

    sgd = hsgd = []
    th = None
    limits = metrics = []
    if not diagnostics_only:
        sgd = simulate_sgd(inst, cfg.schedule, clock, cfg.runs, cfg.seed, workers)
        hsgd = simulate_hsgd(inst, cfg.schedule, clock, cfg.hsgd_runs, cfg.seed, cfg.hsgd_step, workers)
        th = solve_theory(inst, cfg.schedule, clock, cfg.theory_step)
        limits = limit_rows(inst, cfg.schedule, clock.horizon)
        metrics = comparison_metrics(sgd, hsgd, th, inst.labels, clock.records)
        write_csv(out / "trajectories.csv", TRAJECTORY_HEADER, trajectory_rows(sgd, hsgd, th, inst.labels))
        write_csv(out / "metrics.csv", METRICS_HEADER, metrics)
        write_csv(out / "limits.csv", LIMITS_HEADER, limits)

    manifest = {
        "config": cfg.to_mapping(),
        "seeds": _seed_lineage(cfg, clock),
        "version": __version__,
        "backend": kernels.BACKEND,
        "workers": workers,
        "wall_clock_seconds": time.perf_counter() - start,
        "outputs": sorted(p.name for p in out.glob("*.csv")),
    }
    if "rf_moments_se" in inst.info:
        manifest["rf_moments"] = {"mc_samples": inst.info["rf_mc_samples"],
                                  "standard_error_bound": inst.info["rf_moments_se"]}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ExperimentResult(cfg, inst, clock, sgd, hsgd, th, limits, metrics, diag_rows, out)


def read_trajectories(path):
    """Load ``trajectories.csv`` into ``{(source, stat_label): (times, mean values)}``.

    Values are averaged over ``run_id`` at each time; runs that stop early
    (divergence) are excluded from the mean.
    """
    series = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRAJECTORY_HEADER:
            raise InputError(f"{path}: header must be {','.join(TRAJECTORY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise InputError(f"{path}:{lineno}: expected 5 fields")
            run_id, t, label, value, source = row
            try:
                t, value = float(t), float(value)
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric t or value") from None
            series.setdefault((source, label), {}).setdefault(run_id, []).append((t, value))
    out = {}
    for key, runs in series.items():
        longest = max(len(v) for v in runs.values())
        full = [np.array(v) for v in runs.values() if len(v) == longest]
        times = full[0][:, 0]
        for arr in full[1:]:
            if not np.array_equal(arr[:, 0], times):
                raise InputError(f"{path}: runs of {key} do not share a time grid")
        out[key] = (times, np.mean([arr[:, 1] for arr in full], axis=0))
    return out


def _pairs_within(series):
    for (source, label) in sorted(series):
        if source in ("sgd", "hsgd"):
            if ("theory_omega", label) in series:
                yield (source, label), ("theory_omega", label)
        if source == "sgd" and ("hsgd", label) in series:
            yield (source, label), ("hsgd", label)
    if ("theory_psi", "loss") in series and ("theory_omega", "loss") in series:
        yield ("theory_psi", "loss"), ("theory_omega", "loss")


def compare_files(paths):
    """Pointwise comparison of trajectory files.

    Within each file, simulator means are compared with theory and with
    each other; across files, every series present in both is compared.

    Returns
    -------
    list of tuple
        ``(left, right, stat_label, sup_abs_diff, mean_abs_diff)`` where
        ``left``/``right`` read ``file#source``.
    """
    loaded = [(str(p), read_trajectories(p)) for p in paths]
    rows = []

    def diff(name_a, a, name_b, b, label):
        (ta, va), (tb, vb) = a, b
        if ta.shape != tb.shape or not np.allclose(ta, tb, rtol=0, atol=1e-12):
            raise InputError(f"time grids differ between {name_a} and {name_b}")
        d = np.abs(va - vb)
        rows.append((name_a, name_b, label, float(d.max()), float(d.mean())))

    for name, series in loaded:
        for ka, kb in _pairs_within(series):
            diff(f"{name}#{ka[0]}", series[ka], f"{name}#{kb[0]}", series[kb], ka[1])
    for i in range(len(loaded)):
        for j in range(i + 1, len(loaded)):
            (na, sa), (nb, sb) = loaded[i], loaded[j]
            for key in sorted(set(sa) & set(sb)):
                diff(f"{na}#{key[0]}", sa[key], f"{nb}#{key[0]}", sb[key], key[1])
    return rows


def threshold_report(inst, schedule):
    """Threshold, limiting learning rate and a regime label."""
    spec, delta = inst.spectral, inst.problem.delta
    thr = theory.convergence_threshold(spec, delta)
    gl = gamma_limit(schedule)
    if gl == 0:
        regime = "decaying"
    elif gl < thr:
        regime = "convergent"
    else:
        regime = "divergent"
    return {"threshold": thr, "gamma_limit": gl, "regime": regime,
            "kernel_mass": theory.kernel_mass(spec, delta, gl)}
