import math

import numpy as np
import pytest

from homsgd import schedules as S
from homsgd import statistics as st
from homsgd.errors import InputError
from homsgd.generators import STREAM_SGD, make_rng
from homsgd.sgd import record_steps, run_sgd
from homsgd.spectral import Problem


def _problem(seed=0, n=20, d=8, delta=0.1):
    rng = np.random.default_rng(seed)
    return Problem(rng.standard_normal((n, d)) / math.sqrt(d), rng.standard_normal(n), delta)


def test_scalar_exact_step():
    p = Problem(np.ones((1, 1)), np.ones(1), 0.0)
    tr = run_sgd(p, S.constant(1.0), np.zeros(1), 1.0, [st.loss_as_statistic(p)], 0)
    np.testing.assert_allclose(tr.times, [0.0, 1.0])
    np.testing.assert_allclose(tr.values[:, 0], [0.5, 0.0])


def test_pure_shrinkage_annihilates():
    n = 4
    p = Problem(np.zeros((n, 3)), np.zeros(n), float(n))
    stat = st.QuadraticStatistic(np.eye(3), np.zeros(3), 0.0, "norm")
    tr = run_sgd(p, S.constant(1.0), np.array([1.0, -2.0, 3.0]), 1.0 / n, [stat], 0)
    assert tr.values[-1, 0] == 0.0


def test_determinism_and_streams():
    p = _problem()
    stats = [st.loss_as_statistic(p)]
    x0 = np.ones(p.d)
    a = run_sgd(p, S.constant(0.5), x0, 3.0, stats, 5, record_stride=7)
    b = run_sgd(p, S.constant(0.5), x0, 3.0, stats, 5, record_stride=7)
    c = run_sgd(p, S.constant(0.5), x0, 3.0, stats, 5, record_stride=7, stream=(1,))
    assert np.array_equal(a.values, b.values) and np.array_equal(a.times, b.times)
    assert not np.array_equal(a.values, c.values)


def test_record_times():
    p = _problem(n=10)
    tr = run_sgd(p, S.constant(0.3), np.zeros(p.d), 2.05, [st.loss_as_statistic(p)], 1, record_stride=3)
    np.testing.assert_array_equal(tr.times * 10, record_steps(20, 3))
    assert tr.times[0] == 0.0 and tr.times[-1] == 2.0
    assert np.all(np.diff(tr.times) > 0)


def test_zero_learning_rate_keeps_statistics():
    p = _problem()
    x0 = np.arange(p.d, dtype=float)
    stats = [st.loss_as_statistic(p), st.mse_to_signal(np.ones(p.d))]
    tr = run_sgd(p, S.constant(0.0), x0, 2.0, stats, 3, record_stride=5)
    assert np.all(tr.values == tr.values[0])


def test_matches_dense_reference():
    p = _problem(delta=0.3)
    sched = S.rational_decay(0.9, 0.5)
    x0 = np.random.default_rng(9).standard_normal(p.d)
    horizon = 2.0
    tr = run_sgd(p, sched, x0, horizon, [st.mse_to_signal(np.zeros(p.d))], 4, record_stride=1)
    total = int(horizon * p.n)
    idx = make_rng(4, STREAM_SGD, 0).integers(0, p.n, size=total, dtype=np.int64)
    x = x0.copy()
    for k in range(total):
        g = S.gamma(sched, k / p.n)
        a = p.a_matrix[idx[k]]
        x = x - g * (a @ x - p.b_vector[idx[k]]) * a - g * p.delta / p.n * x
        assert tr.values[k + 1, 0] == pytest.approx(0.5 * x @ x, rel=1e-12, abs=1e-14)


def test_sampling_with_replacement_touches_one_minus_inv_e():
    n = 10_000
    idx = make_rng(0, STREAM_SGD, 0).integers(0, n, size=n)
    frac = np.unique(idx).size / n
    target = 1 - math.exp(-1)
    se = math.sqrt(target * (1 - target) / n)
    assert abs(frac - target) <= 3 * se


def test_divergence_truncates():
    p = _problem(n=10, d=4, delta=0.0)
    tr = run_sgd(p, S.constant(200.0), np.ones(p.d), 50.0, [st.loss_as_statistic(p)], 0, record_stride=1)
    assert tr.diverged
    assert tr.times.size == tr.values.shape[0]
    assert tr.times[-1] < 50.0


@pytest.mark.parametrize("kwargs", [dict(horizon=0.0), dict(record_stride=0), dict(x0=np.zeros(3))])
def test_run_sgd_validation(kwargs):
    p = _problem()
    args = dict(problem=p, schedule=S.constant(0.1), x0=np.zeros(p.d), horizon=1.0,
                stats=[st.loss_as_statistic(p)], seed=0)
    args.update(kwargs)
    with pytest.raises(InputError):
        run_sgd(**args)
