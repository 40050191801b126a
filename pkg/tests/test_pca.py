import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synthaug.pca import (
    FeatureMatrix,
    JacobiNotConverged,
    covariance,
    eigen_decompose,
    emit_scatter,
    fit_pca,
    project,
    standardize,
)


def random_symmetric(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    return (a + a.T) / 2


def test_standardize_moments_and_degenerate_column():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(40, 4))
    x[:, 2] = 7.0
    z, params = standardize(x)
    assert np.all(z[:, 2] == 0) and params.degenerate.tolist() == [False, False, True, False]
    live = z[:, [0, 1, 3]]
    assert np.max(np.abs(live.mean(axis=0))) < 1e-10
    assert np.max(np.abs(live.std(axis=0, ddof=1) - 1)) < 1e-10


def test_single_row_rejected():
    with pytest.raises(ValueError):
        standardize(np.ones((1, 3)))
    with pytest.raises(ValueError):
        covariance(np.ones((1, 3)))


def test_covariance_loop_oracle():
    z = np.random.default_rng(1).normal(size=(6, 3))
    n, d = z.shape
    means = [sum(z[i, j] for i in range(n)) / n for j in range(d)]
    oracle = np.array([[sum((z[i, a] - means[a]) * (z[i, b] - means[b]) for i in range(n)) / (n - 1)
                        for b in range(d)] for a in range(d)])
    c = covariance(z)
    assert c.shape == (3, 3)
    assert np.max(np.abs(c - oracle)) < 1e-12


def test_covariance_identical_columns():
    col = np.random.default_rng(2).normal(size=10)
    c = covariance(np.stack([col, col], axis=1))
    assert c[0, 0] == pytest.approx(c[1, 1]) == pytest.approx(c[0, 1])


def test_identity_and_diagonal_spectra():
    pairs = eigen_decompose(np.eye(4))
    assert np.allclose(pairs.values, 1.0)
    pairs = eigen_decompose(np.diag([1.0, 3.0]))
    assert pairs.values.tolist() == [3.0, 1.0]
    np.testing.assert_array_equal(pairs.vectors, [[0.0, 1.0], [1.0, 0.0]])


@pytest.mark.parametrize("n", [5, 64])
def test_jacobi_residual_and_trace(n):
    c = random_symmetric(n, n)
    pairs = eigen_decompose(c)
    resid = np.max(np.abs(c @ pairs.vectors - pairs.vectors * pairs.values))
    assert resid < 1e-8
    assert abs(pairs.values.sum() - np.trace(c)) < 1e-9
    assert np.all(np.diff(pairs.values) <= 0)
    gram = pairs.vectors.T @ pairs.vectors
    assert np.max(np.abs(np.diag(gram) - 1)) < 1e-10
    assert np.max(np.abs(gram - np.diag(np.diag(gram)))) < 1e-8


def test_sign_convention():
    pairs = eigen_decompose(random_symmetric(6, 3))
    for i in range(6):
        v = pairs.vectors[:, i]
        assert v[np.argmax(np.abs(v))] > 0


def test_sweep_limit_and_asymmetry():
    with pytest.raises(JacobiNotConverged):
        eigen_decompose(random_symmetric(8, 4), max_sweeps=1)
    with pytest.raises(ValueError, match="symmetric"):
        eigen_decompose(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_pc1_variance_and_isometry():
    x = np.random.default_rng(5).normal(size=(30, 5)) @ np.random.default_rng(6).normal(size=(5, 5))
    z, _ = standardize(x)
    pairs = eigen_decompose(covariance(z))
    pc1 = project(z, pairs, 1)[:, 0]
    assert abs(pc1.var(ddof=1) - pairs.values[0]) < 1e-8
    full = project(z, pairs, 5)
    d_in = np.linalg.norm(z[:, None] - z[None], axis=-1)
    d_out = np.linalg.norm(full[:, None] - full[None], axis=-1)
    assert np.max(np.abs(d_in - d_out)) < 1e-8
    assert abs(full.var(axis=0, ddof=1).sum() - pairs.values.sum()) < 1e-8
    with pytest.raises(ValueError):
        project(z, pairs, 0)
    with pytest.raises(ValueError):
        project(z, pairs, 6)


def test_diagonal_covariance_selects_coordinates():
    rng = np.random.default_rng(8)
    x = np.stack([rng.normal(0, 1, 500), rng.normal(0, 5, 500)], axis=1)
    x -= x.mean(axis=0)
    pairs = eigen_decompose(np.diag(np.diag(covariance(x))))
    np.testing.assert_allclose(np.abs(project(x, pairs, 2)), np.abs(x[:, ::-1]))


@given(arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 6)),
              elements=st.floats(-100, 100, allow_nan=False)))
@settings(max_examples=40, deadline=None)
def test_eigen_invariants_property(x):
    z, params = standardize(x)
    c = covariance(z)
    assert np.allclose(c, c.T, atol=1e-12, rtol=0) and np.all(np.diag(c) >= 0)
    live = ~params.degenerate
    assert np.allclose(np.diag(c)[live], 1.0, atol=1e-9)
    pairs = eigen_decompose(c)
    assert np.max(np.abs(c @ pairs.vectors - pairs.vectors * pairs.values)) < 1e-8
    assert abs(pairs.values.sum() - np.trace(c)) < 1e-9


def test_feature_matrix_csv_round_trip(tmp_path):
    fm = FeatureMatrix(np.random.default_rng(0).random((4, 3)), ["a", "b", "c", "d"],
                       ["COVID-CXR"] * 2 + ["Normal-CXR"] * 2, ["real", "synthetic", "real", "synthetic"])
    fm.to_csv(tmp_path / "f.csv")
    back = FeatureMatrix.from_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(back.values, fm.values)
    assert back.origins == fm.origins
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 2)), origins=["real", "fake"])


def test_emit_scatter_rows_and_determinism(tmp_path):
    fm = FeatureMatrix(np.random.default_rng(1).random((12, 5)),
                       labels=["COVID-CXR", "Normal-CXR"] * 6, origins=["real"] * 6 + ["synthetic"] * 6)
    scores, _, _ = fit_pca(fm, 2)
    emit_scatter(scores, fm, tmp_path / "a.csv", tmp_path / "a.svg")
    emit_scatter(scores, fm, tmp_path / "b.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 13 and lines[0] == "id,label,origin,pc1,pc2"
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    svg = (tmp_path / "a.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<circle") == 12 + 4
    with pytest.raises(ValueError):
        emit_scatter(scores[:, :1], fm, tmp_path / "c.csv", tmp_path / "c.svg")
