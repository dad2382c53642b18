import numpy as np
import pytest
from hypothesis import given, strategies as st

from pilotann.dataset_io import FlatVectorSet, generate_synthetic
from pilotann.svd_transform import (fit_svd, load_svd, primary_dim_for_ratio, primary_distance,
                                    residual_distance, save_svd, transform_split)


def _spearman(a, b):
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    return np.corrcoef(ra, rb)[0, 1]


def test_axis_aligned(rng):
    X = rng.normal(size=(2000, 2)) * np.array([3.0, 1.0])
    m = fit_svd(FlatVectorSet(X.astype(np.float32)))
    assert abs(m.rotation[0, 0]) > 0.99
    assert m.singular_values[0] >= m.singular_values[1]


def test_rotated_45_degrees(rng):
    X = rng.normal(size=(5000, 2)) * np.array([3.0, 0.5])
    c = np.cos(np.pi / 4)
    R = np.array([[c, -c], [c, c]])
    X = X @ R.T
    m = fit_svd(FlatVectorSet(X.astype(np.float32)))
    # independent oracle: eigenvector of the sample scatter
    w, v = np.linalg.eig(X.T @ X)
    ref = v[:, np.argmax(w)]
    cosang = abs(float(m.rotation[:, 0] @ ref)) / np.linalg.norm(m.rotation[:, 0])
    assert np.degrees(np.arccos(min(1.0, cosang))) < 1.0


@pytest.mark.parametrize("data", ["random", "identical", "rank1"])
def test_orthonormal(rng, data):
    if data == "random":
        X = rng.normal(size=(300, 12))
    elif data == "identical":
        X = np.tile(rng.normal(size=12), (50, 1))
    else:
        X = np.outer(rng.normal(size=80), rng.normal(size=12))
    m = fit_svd(FlatVectorSet(X.astype(np.float32)))
    R = m.rotation.astype(np.float64)
    assert np.abs(R.T @ R - np.eye(12)).max() <= 1e-4
    assert np.all(np.diff(m.singular_values) <= 0) and np.all(m.singular_values >= 0)


def test_sign_convention_and_determinism(rng):
    X = FlatVectorSet(rng.normal(size=(400, 8)).astype(np.float32))
    a, b = fit_svd(X, seed=1), fit_svd(X, seed=1)
    assert np.array_equal(a.rotation, b.rotation)
    for j in range(8):
        col = a.rotation[:, j]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0


def test_sample_cap_is_seeded(rng):
    X = FlatVectorSet(rng.normal(size=(500, 6)).astype(np.float32))
    assert np.array_equal(fit_svd(X, 100, seed=4).rotation, fit_svd(X, 100, seed=4).rotation)


def test_needs_two_rows():
    with pytest.raises(ValueError):
        fit_svd(FlatVectorSet(np.zeros((1, 3), np.float32)))


def test_full_primary_dim_has_empty_residual(rng):
    X = FlatVectorSet(rng.normal(size=(100, 10)).astype(np.float32))
    m = fit_svd(X)
    s = transform_split(m, X, 10)
    assert s.residual_dim == 0
    full = ((X.data[3].astype(np.float64) - X.data[9]) ** 2).sum()
    assert abs(primary_distance(s.primary[3], s.primary[9]) - full) <= 1e-3 * full


def test_identical_vectors_zero_distance(rng):
    x = rng.normal(size=(1, 6)).astype(np.float32)
    X = FlatVectorSet(np.vstack([x, x, rng.normal(size=(5, 6)).astype(np.float32)]))
    s = transform_split(fit_svd(X), X, 3)
    assert primary_distance(s.primary[0], s.primary[1]) == 0
    assert residual_distance(s.residual[0], s.residual[1]) == 0


def test_distance_helpers():
    assert primary_distance([0, 0], [3, 4]) == 25
    assert residual_distance([1.5], [1.5]) == 0
    with pytest.raises(ValueError):
        primary_distance([0, 0], [0, 0, 0])


def test_transform_dimension_mismatch(rng):
    m = fit_svd(FlatVectorSet(rng.normal(size=(20, 4)).astype(np.float32)))
    with pytest.raises(ValueError):
        transform_split(m, np.zeros((2, 5), np.float32))


@given(st.integers(0, 2**31), st.sampled_from([0.25, 0.5, 1.0]))
def test_decomposition(seed, ratio):
    r = np.random.default_rng(seed)
    X = FlatVectorSet((r.normal(size=(60, 16)) * r.uniform(0.1, 10, size=16)).astype(np.float32))
    pd = primary_dim_for_ratio(16, ratio)
    s = transform_split(fit_svd(X), X, pd)
    for _ in range(20):
        i, j = r.integers(0, 60, size=2)
        full = float(((X.data[i].astype(np.float64) - X.data[j]) ** 2).sum())
        parts = primary_distance(s.primary[i], s.primary[j]) + residual_distance(s.residual[i], s.residual[j])
        assert abs(full - parts) <= 1e-3 * max(full, 1e-12)


def test_rank_correlation_grows_with_primary_dim():
    vs = generate_synthetic(3000, 32, 8, 5)
    X = FlatVectorSet(vs.data[:2900])
    Q = vs.data[2900:]
    m = fit_svd(X)
    full = ((X.data[None, :, :].astype(np.float64) - Q[:, None, :]) ** 2).sum(-1)
    means = []
    for ratio in (0.25, 0.5, 1.0):
        pd = primary_dim_for_ratio(32, ratio)
        sx, sq = transform_split(m, X, pd), transform_split(m, Q, pd)
        prim = ((sx.primary[None].astype(np.float64) - sq.primary[:, None]) ** 2).sum(-1)
        means.append(np.mean([_spearman(prim[i], full[i]) for i in range(len(Q))]))
    assert means[0] <= means[1] + 1e-9 <= means[2] + 2e-9
    assert means[2] > 0.999


def test_sidecar_round_trip(tmp_path, rng):
    m = fit_svd(FlatVectorSet(rng.normal(size=(40, 7)).astype(np.float32)), primary_dim=3)
    save_svd(m, tmp_path / "m.svd")
    back = load_svd(tmp_path / "m.svd")
    assert back.primary_dim == 3
    assert np.array_equal(back.rotation, m.rotation)
    assert np.array_equal(back.singular_values, m.singular_values)
    (tmp_path / "bad.svd").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        load_svd(tmp_path / "bad.svd")
