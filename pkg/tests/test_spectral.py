import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hs

from homsgd.errors import InputError, PoleError
from homsgd.spectral import Problem, decompose, loss, objective, resolvent_entry, resolvent_weights


def _random_problem(seed, n, d, delta=0.0):
    rng = np.random.default_rng(seed)
    return Problem(rng.standard_normal((n, d)), rng.standard_normal(n), delta)


def test_identity_decomposition():
    spec = decompose(Problem(np.eye(2), np.array([3.0, -1.0])))
    np.testing.assert_allclose(spec.singulars, [1.0, 1.0])
    np.testing.assert_allclose(spec.eigenvalues, [1.0, 1.0])


def test_diagonal_decomposition():
    spec = decompose(Problem(np.diag([2.0, 1.0]), np.zeros(2)))
    np.testing.assert_allclose(spec.singulars, [2.0, 1.0])
    np.testing.assert_allclose(spec.eigenvalues, [4.0, 1.0])


def test_reconstruction_and_sign_convention():
    p = _random_problem(0, 5, 3)
    spec = decompose(p)
    sig = np.zeros((5, 3))
    sig[:3, :3] = np.diag(spec.singulars)
    np.testing.assert_allclose(spec.u_full @ sig @ spec.v_full.T, p.a_matrix, atol=1e-10)
    for col in spec.v_full.T:
        first = col[np.flatnonzero(np.abs(col) > 1e-8)[0]]
        assert first > 0
    again = decompose(p)
    assert np.array_equal(spec.v_full, again.v_full) and np.array_equal(spec.u_full, again.u_full)


def test_wide_problem_pads_eigenvalues():
    spec = decompose(_random_problem(1, 3, 7))
    assert spec.eigenvalues.shape == (7,)
    assert np.all(spec.eigenvalues[3:] == 0.0)
    assert spec.row_eigenvalues.shape == (3,)


def test_problem_validation():
    with pytest.raises(InputError):
        Problem(np.ones((2, 2)), np.ones(3))
    with pytest.raises(InputError):
        Problem(np.array([[np.nan]]), np.ones(1))
    with pytest.raises(InputError):
        Problem(np.ones((1, 1)), np.ones(1), -1.0)


@pytest.mark.parametrize("a,b,x,expected", [
    (np.eye(2), [0.0, 0.0], [0.0, 0.0], 0.0),
    (np.eye(2), [1.0, 1.0], [0.0, 0.0], 1.0),
    (np.diag([1.0, 2.0]), [1.0, 2.0], [1.0, 1.0], 0.0),
])
def test_loss_examples(a, b, x, expected):
    assert loss(Problem(a, b), np.array(x)) == pytest.approx(expected)


def test_objective_examples():
    p = _random_problem(2, 4, 3)
    x = np.arange(3.0)
    assert objective(p, x) == loss(p, x)
    assert objective(Problem(np.eye(1), np.zeros(1), 2.0), np.ones(1)) == pytest.approx(1.5)
    assert objective(p, np.zeros(3)) == pytest.approx(0.5 * float(p.b_vector @ p.b_vector))
    with pytest.raises(InputError):
        loss(p, np.zeros(4))


@given(hs.integers(0, 10_000), hs.integers(1, 8), hs.integers(1, 8))
def test_spectral_loss_matches_dense(seed, n, d):
    p = _random_problem(seed, n, d)
    spec = decompose(p)
    x = np.random.default_rng(seed + 1).standard_normal(d)
    direct = loss(p, x)
    assert spec.spectral_loss(spec.to_spectral(x)) == pytest.approx(direct, rel=1e-10, abs=1e-12)
    np.testing.assert_allclose(spec.from_spectral(spec.to_spectral(x)), x, atol=1e-12)


def test_resolvent_examples():
    spec = decompose(Problem(np.eye(2), np.zeros(2)))
    assert resolvent_entry(spec, "rows", 2.0, 0, 0) == pytest.approx(1.0)
    assert resolvent_entry(spec, "rows", 2.0, 0, 1) == pytest.approx(0.0)
    with pytest.raises(PoleError):
        resolvent_entry(spec, "rows", 1.0, 0, 0)
    with pytest.raises(InputError):
        resolvent_weights(spec, "diagonal", 2.0)


@pytest.mark.parametrize("side", ["rows", "columns"])
def test_resolvent_matches_dense_inverse(side):
    p = _random_problem(3, 4, 4)
    spec = decompose(p)
    a = p.a_matrix
    m = a @ a.T if side == "rows" else a.T @ a
    z = 3 + 0.5j
    dense = np.linalg.inv(z * np.eye(4) - m)
    for i in range(4):
        for j in range(4):
            assert abs(resolvent_entry(spec, side, z, i, j) - dense[i, j]) <= 1e-10
    v = np.arange(4.0)
    assert abs(resolvent_entry(spec, side, z, 1, v) - (dense @ v)[1]) <= 1e-10


@given(hs.integers(0, 10_000), hs.complex_numbers(min_magnitude=0.1, max_magnitude=5, allow_nan=False,
                                                  allow_infinity=False).filter(lambda z: abs(z.imag) > 0.1))
def test_resolvent_symmetry(seed, z):
    spec = decompose(_random_problem(seed, 5, 4))
    for i in range(5):
        for j in range(i):
            assert abs(resolvent_entry(spec, "rows", z, i, j) - resolvent_entry(spec, "rows", z, j, i)) <= 1e-12


def test_resolvent_difference_identity():
    for seed in range(5):
        spec = decompose(_random_problem(seed, 5, 5))
        z, y = 1.5 + 0.7j, -0.3 + 1.1j
        basis, wz = resolvent_weights(spec, "rows", z)
        _, wy = resolvent_weights(spec, "rows", y)
        rz = (basis * wz) @ basis.T
        ry = (basis * wy) @ basis.T
        np.testing.assert_allclose((rz - ry) / (z - y), -rz @ ry, atol=1e-8)
