import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hs

from homsgd import generators as gen
from homsgd.errors import InputError, MatrixFormatError


def test_zero_covariance_gives_zero_design():
    a = gen.gaussian_design(5, 3, gen.CovarianceSpec.identity_scaled(3, 0.0), 1)
    assert np.all(a == 0.0)


def test_gaussian_design_edge_and_determinism():
    d = 1000
    cov = gen.CovarianceSpec.identity_scaled(d, 1.0 / d)
    a = gen.gaussian_design(d, d, cov, 11)
    assert np.linalg.norm(a, 2) <= 2.2
    assert np.array_equal(a, gen.gaussian_design(d, d, cov, 11))


def test_design_dimension_mismatch():
    with pytest.raises(InputError):
        gen.gaussian_design(3, 4, gen.CovarianceSpec.identity_scaled(5), 0)


def test_covariance_validation():
    with pytest.raises(InputError):
        gen.CovarianceSpec.diagonal([1.0, -1.0])
    with pytest.raises(InputError):
        gen.CovarianceSpec.dense(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(InputError):
        gen.CovarianceSpec.dense(np.array([[1.0, 0.5], [0.0, 1.0]]))
    cov = gen.CovarianceSpec.diagonal([1.0, 3.0]).rescaled(1.0)
    assert cov.trace() == pytest.approx(1.0)


def test_dense_covariance_sampling():
    mat = np.array([[2.0, 0.6], [0.6, 1.0]])
    rows = gen.CovarianceSpec.dense(mat).sample_rows(np.random.default_rng(0), 200_000)
    np.testing.assert_allclose(np.cov(rows.T), mat, atol=0.02)


def test_identity_features_have_unit_variance():
    n, n0, d = 400, 50, 250
    act = gen.Activation.identity()
    a, w, x = gen.random_features_design(n, n0, d, gen.CovarianceSpec.identity_scaled(n0), act, 3)
    np.testing.assert_allclose(a, x @ w / math.sqrt(n0))
    var = a.var()
    se = math.sqrt(2.0 / a.size) * var
    # entries share rows of X and columns of W, so allow for that correlation
    assert abs(var - 1.0) <= 3 * se + 0.05


def test_relu_features_are_centered():
    act = gen.Activation.normalized_relu()
    z = np.random.default_rng(5).standard_normal(400_000)
    s = act(z)
    assert abs(s.mean()) <= 3 * s.std() / math.sqrt(z.size)
    assert s.var() == pytest.approx(1.0, abs=0.01)
    a, _, _ = gen.random_features_design(300, 40, 300, gen.CovarianceSpec.identity_scaled(40), act, 2)
    assert abs(a.mean()) <= 3 * a.std() / math.sqrt(a.shape[0])


def test_tiny_random_features_design_is_exact():
    act = gen.Activation.tanh()
    a, w, x = gen.random_features_design(2, 1, 1, gen.CovarianceSpec.identity_scaled(1), act, 4)
    np.testing.assert_array_equal(a[:, 0], act(x[:, 0] * w[0, 0]))


def test_generative_targets_energies():
    a = np.random.default_rng(0).standard_normal((30, 20))
    b, beta, noise = gen.generative_targets(a, gen.GenerativeTargetSpec(1.5, 2.25, 0.0), 7)
    assert float(noise @ noise) == pytest.approx(2.25, abs=1e-10)
    assert float(beta @ beta) == pytest.approx(1.5, rel=1e-10)
    np.testing.assert_allclose(b, a @ beta + noise)
    b0, beta0, noise0 = gen.generative_targets(a, gen.GenerativeTargetSpec(1.0, 0.0, 0.0), 7)
    assert np.all(noise0 == 0) and np.array_equal(b0, a @ beta0)
    b1, beta1, noise1 = gen.generative_targets(a, gen.GenerativeTargetSpec(0.0, 1.0, 0.0), 7)
    assert np.all(beta1 == 0) and np.array_equal(b1, noise1)
    with pytest.raises(InputError):
        gen.GenerativeTargetSpec(-1.0)


def test_random_init():
    assert np.all(gen.random_init(10, 0.0, 1) == 0)
    d = 400
    x0 = gen.random_init(d, 4.0 * d, 12)
    per = x0 * x0
    assert abs(per.mean() - 4.0) <= 3 * per.std() / math.sqrt(d)
    assert np.array_equal(x0, gen.random_init(d, 4.0 * d, 12))


def test_seed_streams_are_disjoint():
    cov = gen.CovarianceSpec.identity_scaled(5)
    _, w, x = gen.random_features_design(5, 5, 5, cov, gen.Activation.identity(), 0)
    assert not np.allclose(w, x)
    assert gen.make_rng(3, 1).random() != gen.make_rng(3, 2).random()
    assert gen.make_rng(3, 1, 4).random() == gen.make_rng(3, 1, 4).random()


def test_load_csv(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("c0,c1\n1,2\n3,4\n")
    np.testing.assert_array_equal(gen.load_matrix(path), [[1, 2], [3, 4]])


@pytest.mark.parametrize("content,fragment", [
    ("", "line 1"),
    ("a,b\n1,2\n3\n", "line 3"),
    ("a,b\n1,x\n", "line 2"),
    ("a,b\n", "no data"),
])
def test_load_csv_errors(tmp_path, content, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(MatrixFormatError, match=fragment):
        gen.load_matrix(path)


def test_load_binary_errors(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x01\x00")
    with pytest.raises(MatrixFormatError):
        gen.load_matrix(path, "raw_binary_f64_row_major")
    with pytest.raises(InputError):
        gen.load_matrix(path, "npy")


@given(hs.integers(0, 1000), hs.integers(1, 6), hs.integers(1, 6),
       hs.sampled_from(["csv_with_header", "raw_binary_f64_row_major"]))
def test_matrix_round_trip(tmp_path_factory, seed, rows, cols, fmt):
    mat = np.random.default_rng(seed).standard_normal((rows, cols)) * 10.0 ** np.random.default_rng(seed).integers(-5, 5)
    path = tmp_path_factory.mktemp("rt") / "m"
    gen.save_matrix(path, mat, fmt)
    assert np.array_equal(gen.load_matrix(path, fmt), mat)
