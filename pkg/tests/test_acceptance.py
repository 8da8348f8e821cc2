"""End-to-end acceptance checks.

Each test prints a single ``PASS``/``FAIL criterion k`` line (also collected
into the terminal summary) before asserting.
"""

import math
import time

import numpy as np
import pytest

from homsgd import experiments as E
from homsgd import generators as gen
from homsgd import schedules as S
from homsgd import statistics as st
from homsgd import theory as T
from homsgd.config import ExperimentConfig
from homsgd.diagnostics import build_contour, check_delocalization, check_init
from homsgd.hsgd import SdeConfig, run_hsgd
from homsgd.sgd import run_sgd
from homsgd.spectral import Problem, decompose

pytestmark = pytest.mark.slow

FIG1_DIMS = (100, 400, 1600)
FIG1_RUNS = 10


def _fig1_config(d, seed=7):
    return ExperimentConfig.from_mapping({
        "recipe": "gaussian_mse",
        "seed": seed,
        "dimensions": {"d": d},
        "run": {"horizon": 5.0, "theory_step": 5e-3, "statistics": ["mse"]},
    })


@pytest.fixture(scope="module")
def fig1():
    """SGD, HSGD and theory MSE curves for the three dimensions."""
    out = {}
    sgd_seconds = 0.0
    for d in FIG1_DIMS:
        cfg = _fig1_config(d)
        start = time.perf_counter()
        inst = E.build_instance(cfg)
        clock = E.make_clock(inst.problem.n, cfg.horizon, cfg.record_every)
        sgd = E.simulate_sgd(inst, cfg.schedule, clock, FIG1_RUNS, cfg.seed)
        th = E.solve_theory(inst, cfg.schedule, clock, 5e-3)
        sgd_seconds += time.perf_counter() - start
        hsgd = E.simulate_hsgd(inst, cfg.schedule, clock, FIG1_RUNS, cfg.seed)
        out[d] = {
            "sgd": np.stack([t.values[:, 0] for t in sgd]),
            "hsgd": np.stack([t.values[:, 0] for t in hsgd]),
            "omega": th.omega[:, 0],
        }
    out["seconds"] = sgd_seconds
    return out


def test_criterion_01_concentration(fig1, report):
    ranges = {d: float(np.max(np.ptp(fig1[d]["sgd"], axis=0))) for d in FIG1_DIMS}
    big = fig1[FIG1_DIMS[-1]]
    omega = big["omega"]
    dev = float(np.max(np.abs(big["sgd"].mean(axis=0) - omega)))
    tol = 0.05 * (1.0 + float(omega.max()))
    ok = ranges[1600] < ranges[100] and dev <= tol and fig1["seconds"] <= 180.0
    report(1, ok, f"range d=100 {ranges[100]:.4f} > d=1600 {ranges[1600]:.4f}; "
                  f"sup|mean-Omega| {dev:.4f} <= {tol:.4f}; {fig1['seconds']:.1f}s")
    assert ok


def test_criterion_02_coupling(fig1, report):
    med = [float(np.median(np.max(np.abs(fig1[d]["sgd"] - fig1[d]["hsgd"]), axis=1))) for d in FIG1_DIMS]
    ok = all(a > b for a, b in zip(med, med[1:]))
    report(2, ok, "median sup|R_sgd - R_hsgd| " + ", ".join(f"d={d}: {m:.4f}" for d, m in zip(FIG1_DIMS, med)))
    assert ok


def test_criterion_03_hsgd_mean_matches_psi(report):
    cfg = ExperimentConfig.from_mapping({
        "recipe": "gaussian_mse", "seed": 3, "dimensions": {"d": 200},
        "run": {"horizon": 3.0, "statistics": ["loss"]},
    })
    inst = E.build_instance(cfg)
    clock = E.make_clock(inst.problem.n, 3.0, 0.01)
    trajs = E.simulate_hsgd(inst, cfg.schedule, clock, 200, 11, step=2.5e-4)
    vals = np.stack([t.values[:, 0] for t in trajs])
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
    psi = E.solve_theory(inst, cfg.schedule, clock).psi
    inside = np.abs(mean - psi) <= 3.0 * se + 1e-12
    frac = float(inside.mean())
    ok = frac >= 0.95
    report(3, ok, f"{frac:.2%} of {inside.size} grid points within 3 SE (need 95%)")
    assert ok


def _noisy_d50():
    cfg = ExperimentConfig.from_mapping({
        "recipe": "erm_risk", "seed": 5, "dimensions": {"d": 50}, "problem": {"delta": 0.5},
        "run": {"statistics": ["loss", "population_risk"]},
    })
    return E.build_instance(cfg)


def test_criterion_04_limiting_loss(report):
    inst = _noisy_d50()
    spec, delta = inst.spectral, inst.problem.delta
    gamma = 0.5 * T.convergence_threshold(spec, delta)
    rate = 2.0 * (spec.eigenvalues.min() + delta) * gamma
    horizon = math.log(1e8) / rate
    assert math.exp(-rate * horizon) < 1e-4
    sched = S.constant(gamma)
    psi = T.solve_psi(spec, delta, inst.x0, sched, T.make_grid(sched, horizon))
    psi_inf = E.limit_rows(inst, sched, horizon)[0][3]
    rel = abs(psi.values[-1] - psi_inf) / psi_inf

    # scalar golden case: lambda = delta = b = gamma = 1, x0 = 0
    one = decompose(Problem(np.ones((1, 1)), np.ones(1), 1.0))
    sched1 = S.constant(1.0)
    grid1 = T.make_grid(sched1, 60.0, 1e-3)
    p1 = T.solve_psi(one, 1.0, np.zeros(1), sched1, grid1)
    unit = st.QuadraticStatistic(np.eye(1), np.zeros(1), 0.0, "unit")
    om = T.solve_omega(one, 1.0, np.zeros(1), sched1, grid1, p1, unit)
    f = T.forcing(one, 1.0, np.zeros(1), unit, grid1)
    lim_psi, lim_ex = T.limiting_values(one, 1.0, 1.0, 0.125, T.project_statistic(one, unit))
    golden = max(abs(p1.values[-1] - 1 / 6), abs(om[-1] - f[-1] - 1 / 24), abs(lim_psi - 1 / 6), abs(lim_ex - 1 / 24))
    ok = rel <= 0.01 and golden <= 1e-3
    report(4, ok, f"|Psi(T)-Psi_inf|/Psi_inf {rel:.2e} <= 1e-2 at T={horizon:.2f}; scalar golden err {golden:.1e}")
    assert ok


def test_criterion_05_divergence_above_threshold(report):
    inst = _noisy_d50()
    spec, delta = inst.spectral, inst.problem.delta
    gamma = 1.1 * T.convergence_threshold(spec, delta)
    sched = S.constant(gamma)
    horizon = 5.0
    loss_gf_inf = float(spec.spectral_loss(T.gradient_flow_spectral(spec, delta, spec.to_spectral(inst.x0), math.inf)))
    psi = T.solve_psi(spec, delta, inst.x0, sched, T.make_grid(sched, horizon)).values
    bound = 10.0 * psi[0]
    tail = psi[3 * psi.size // 4:]
    theory_ok = np.isfinite(psi[-1]) and psi[-1] > bound and bool(np.all(np.diff(tail) > 0))
    tr = run_sgd(inst.problem, sched, inst.x0, horizon, [st.loss_as_statistic(inst.problem)], 1,
                 record_stride=inst.problem.n // 10)
    sgd_ok = tr.diverged or float(tr.values[-1, 0]) > bound
    ok = loss_gf_inf > 0 and theory_ok and sgd_ok
    report(5, ok, f"Psi(0) {psi[0]:.3g} -> Psi(T) {psi[-1]:.3g} (bound {bound:.3g}); "
                  f"SGD diverged={tr.diverged} last {tr.values[-1, 0]:.3g}")
    assert ok


def test_criterion_06_drift_only_hsgd_is_gradient_flow(report):
    cfg = _fig1_config(100, seed=2)
    inst = E.build_instance(cfg)
    spec, delta = inst.spectral, inst.problem.delta
    sched = cfg.schedule
    loss = st.loss_as_statistic(inst.problem)
    exact = T.forcing(spec, delta, inst.x0, loss, T.grid_from_points(sched, np.array([0.0, 2.0])))[-1]
    errors = []
    for h in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
        tr = run_hsgd(spec, delta, sched, inst.x0, 2.0, [loss], SdeConfig(h, False, 0), record_dt=2.0)
        errors.append(abs(float(tr.values[-1, 0]) - exact))
    ratios = [a / b for a, b in zip(errors, errors[1:])]
    ok = all(1.7 <= r <= 2.3 for r in ratios)
    report(6, ok, "error ratios " + ", ".join(f"{r:.4f}" for r in ratios) + " in [1.7, 2.3]")
    assert ok


def _neumann_oracle(a, b, delta, x0, sched, horizon, h, terms=10):
    """Neumann series of the scalar loss equation with a dense trapezoid quadrature."""
    lam = a * a
    rate = lam + delta
    t = np.arange(int(round(horizon / h)) + 1) * h
    big = S.big_gamma(sched, t)
    gam = S.gamma(sched, t)
    xstar = a * b / rate
    x = xstar + (x0 - xstar) * np.exp(-rate * big)
    g = 0.5 * (a * x - b) ** 2
    k = gam[None, :] ** 2 * lam**2 * np.exp(-2.0 * rate * (big[:, None] - big[None, :]))
    k = np.tril(k)
    w = np.full(t.size, h)
    w[0] = 0.5 * h
    quad = k * w[None, :]
    np.fill_diagonal(quad, 0.5 * h * np.diag(k))
    quad[0, 0] = 0.0
    total = g.copy()
    term = g.copy()
    for _ in range(terms):
        term = quad @ term
        total += term
    return t, total


def test_criterion_07_volterra_convergence_and_oracle(report):
    ratios = []
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        a = rng.standard_normal((30, 20)) / math.sqrt(20)
        b = 0.5 * rng.standard_normal(30)
        spec = decompose(Problem(a, b, 0.1))
        x0 = 2.0 * rng.standard_normal(20) / math.sqrt(20)
        sched = S.constant(0.5 * T.convergence_threshold(spec, 0.1))
        vals = [T.solve_psi(spec, 0.1, x0, sched, T.make_grid(sched, 2.0, 0.02 / 2**k)).values[-1] for k in range(4)]
        diffs = np.diff(vals)
        ratios.extend(diffs[:-1] / diffs[1:])
    rich_ok = all(3.5 <= r <= 4.5 for r in ratios)

    a, b, delta, x0 = 0.7, 0.9, 1.0, 0.4
    sched = S.rational_decay(1.0, 1.0)
    h = 2.5e-4
    t, oracle = _neumann_oracle(a, b, delta, x0, sched, 1.0, h)
    spec = decompose(Problem(np.array([[a]]), np.array([b]), delta))
    psi = T.solve_psi(spec, delta, np.array([x0]), sched, T.grid_from_points(sched, t)).values
    gap = float(np.max(np.abs(psi - oracle)))
    ok = rich_ok and gap <= 1e-6
    report(7, ok, "Richardson ratios " + ", ".join(f"{r:.3f}" for r in ratios) + f"; Neumann gap {gap:.1e} <= 1e-6")
    assert ok


def test_criterion_08_generative_forcing_oracle(report):
    n, d, draws = 60, 50, 200
    energies = (1.0, 2.25, 4.0)
    delta = 0.1
    a = gen.gaussian_design(n, d, gen.CovarianceSpec.identity_scaled(d, 1.0 / d), 8)
    sched = S.constant(0.8)
    grid = T.make_grid(sched, 5.0, 0.1)
    loss_f = np.empty((draws, grid.size))
    mse_f = np.empty((draws, grid.size))
    spec = None
    for k in range(draws):
        beta = gen.random_signal(d, energies[0], 1000 + k)
        noise = gen.random_signal(n, energies[1], 1000 + k, gen.STREAM_NOISE)
        x0 = gen.random_init(d, energies[2], 1000 + k)
        spec = decompose(Problem(a, a @ beta + noise, delta))
        loss_f[k] = T.forcing(spec, delta, x0, "loss", grid)
        mse_f[k] = T.forcing(spec, delta, x0, st.mse_to_signal(beta), grid)
    worst = 0.0
    for emp, which in ((loss_f, "loss"), (mse_f, "mse_risk")):
        expected = T.expected_generative_forcing(spec, delta, energies, grid, which)
        se = emp.std(axis=0, ddof=1) / math.sqrt(draws)
        worst = max(worst, float(np.max(np.abs(emp.mean(axis=0) - expected) / se)))
    ok = worst <= 3.0
    report(8, ok, f"max |mean - expected| / SE over {grid.size} points x 2 statistics = {worst:.2f} <= 3")
    assert ok


def test_criterion_09_delocalization(report):
    n = d = 1000
    theta = 0.4
    a = gen.gaussian_design(n, d, gen.CovarianceSpec.identity_scaled(d, 1.0 / d), 9)
    b, _, _ = gen.generative_targets(a, gen.GenerativeTargetSpec(1.0, 2.25, 4.0), 9)
    spec = decompose(Problem(a, b, 0.0))
    rep = check_delocalization(spec, b, theta, build_contour(spec))

    m = 200
    eye = decompose(Problem(np.eye(m), np.zeros(m), 0.0))
    e1 = np.zeros(m)
    e1[0] = 1.0
    bad_b = check_delocalization(eye, e1, theta, build_contour(eye))
    bad_x0 = check_init(eye, e1, theta, build_contour(eye))
    ok = rep.passed and not bad_b.passed and not bad_x0.passed
    report(9, ok, f"Gaussian maxima ({rep.max_rb:.3f}, {rep.max_offdiag:.3f}, {rep.max_diag_dev:.3f}) "
                  f"< {rep.theta_bound:.3f}; localized b max {bad_b.max_rb:.2f} and x0 max {bad_x0.max_value:.2f} flagged")
    assert ok


def test_criterion_10_random_features(report):
    mc = 20_000
    cfg = ExperimentConfig.from_mapping({
        "recipe": "random_features", "seed": 4,
        "schedule": {"kind": "constant", "gamma": 1.5},
        "dimensions": {"n": 1200, "d": 2000, "n0": 1000},
        "problem": {"delta": 0.0},
        "random_features": {"mc_samples": mc, "eta": 0.0},
        "run": {"horizon": 8.0, "runs": 5, "hsgd_runs": 0, "statistics": ["rf_test_risk"]},
    })
    inst = E.build_instance(cfg)
    clock = E.make_clock(inst.problem.n, cfg.horizon, cfg.record_every)
    sgd = E.simulate_sgd(inst, cfg.schedule, clock, 5, cfg.seed)
    th = E.solve_theory(inst, cfg.schedule, clock)
    omega = th.omega[:, 0]
    dev = float(np.max(np.abs(E.mean_curve(sgd, clock.records)[:, 0] - omega)))
    spec = inst.spectral
    gf = np.stack([T.gradient_flow_state(spec, 0.0, inst.x0, g) for g in S.big_gamma(cfg.schedule, clock.times[::10])])
    info = inst.info
    se = float(np.max(st.rf_risk_standard_error(info["w"], info["cov_f"], info["activation"], inst.beta, 0.0,
                                                 gf, mc, cfg.seed)))
    tol = 0.1 * (1.0 + float(omega.max())) + 3.0 * se

    slow = S.constant(0.25)
    th_slow = E.solve_theory(inst, slow, E.make_clock(inst.problem.n, 8.0, cfg.record_every))
    gap = float(np.max(np.abs(th_slow.omega[:, 0] - th_slow.forcing[:, 0]) / (1.0 + th_slow.omega[:, 0])))
    ok = dev <= tol and gap <= 0.05
    report(10, ok, f"sup|mean SGD - Omega| {dev:.4f} <= {tol:.4f} (SE {se:.4f}); "
                   f"gamma=0.25 vs gradient flow {gap:.4f} <= 0.05 relative")
    assert ok


def test_criterion_11_excess_risk_closure(report):
    inst = _noisy_d50()
    spec, delta = inst.spectral, inst.problem.delta
    gamma = 0.5 * T.convergence_threshold(spec, delta)
    horizon = math.log(1e8) / (2.0 * (spec.eigenvalues.min() + delta) * gamma)
    sched = S.constant(gamma)
    curves = T.theory_curves(spec, delta, inst.x0, sched, T.make_grid(sched, horizon), inst.stats)
    k = curves.labels.index("population_risk")
    excess_inf = E.limit_rows(inst, sched, horizon)[k][4]
    got = curves.omega_per_stat[-1, k] - curves.forcing_stat[-1, k]
    rel = abs(got - excess_inf) / excess_inf
    ok = rel <= 0.02
    report(11, ok, f"|(Omega-forcing)(T) - excess_inf|/excess_inf {rel:.2e} <= 2e-2")
    assert ok
