import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fss.data import builtin_templates, generate_synthetic, normalize_dataset
from fss.pcak import kmeans, match_clusters, pca_fit, pca_project, pcak_sort
from fss.tensor import RngStream


def _svd_oracle(X, n):
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    return vt[:n], s[:n] ** 2 / (len(X) - 1)


def test_pca_matches_svd_oracle(rng):
    X = rng.normal(size=(200, 66)) @ rng.normal(size=(66, 66)) * 0.1
    model = pca_fit(X)
    comps, var = _svd_oracle(X, 3)
    np.testing.assert_allclose(model.explained_variance, var, rtol=1e-8)
    for got, want in zip(model.components, comps):
        sign = np.sign(got @ want)
        np.testing.assert_allclose(got, sign * want, atol=1e-8)
    scores = pca_project(model, X)
    oracle = (X - X.mean(axis=0)) @ comps.T
    np.testing.assert_allclose(np.abs(scores), np.abs(oracle), atol=1e-8)


def test_pca_components_orthonormal_and_sorted(rng):
    model = pca_fit(rng.normal(size=(100, 66)) * np.linspace(0.1, 3, 66))
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-8)
    assert np.all(np.diff(model.explained_variance) <= 0)


def test_pca_rank_deficient_plane(rng):
    basis = rng.normal(size=(2, 66))
    X = rng.normal(size=(50, 2)) @ basis
    with pytest.warns(RuntimeWarning):
        model = pca_fit(X)
    assert len(model.components) == 2


def test_pca_reconstruction_monotone(rng):
    X = rng.normal(size=(80, 66))

    def err(n):
        m = pca_fit(X, n)
        rec = pca_project(m, X) @ m.components + m.mean
        return ((X - rec) ** 2).sum()

    assert err(3) <= err(2)


def test_pca_shift_invariance(rng):
    X = rng.normal(size=(60, 66))
    a = pca_project(pca_fit(X), X)
    b = pca_project(pca_fit(X + 7.5), X + 7.5)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_pca_needs_four_windows():
    with pytest.raises(ValueError):
        pca_fit(np.zeros((3, 66)))


def _blobs(rng, per=40):
    centers = np.array([[0, 0, 0], [20, 0, 0], [0, 20, 0]], dtype=float)
    labels = np.repeat(np.arange(3), per)
    return centers[labels] + rng.normal(scale=0.5, size=(len(labels), 3)), labels


def test_kmeans_recovers_blobs(rng):
    X, truth = _blobs(rng)
    res = kmeans(X, 3, rng=RngStream(0))
    mapping = match_clusters(truth, res.labels, 3)
    assert np.array_equal(mapping[res.labels], truth)


def test_kmeans_single_cluster_is_mean(rng):
    X = rng.normal(size=(30, 3))
    res = kmeans(X, 1, restarts=2)
    np.testing.assert_allclose(res.centroids[0], X.mean(axis=0), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 5))
def test_kmeans_inertia_never_increases(seed, k):
    X = np.random.default_rng(seed).normal(size=(40, 3))
    res = kmeans(X, k, restarts=1, rng=RngStream(seed))
    assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))


def test_best_of_restarts_monotone(rng):
    X = rng.normal(size=(60, 3))
    inertias = [kmeans(X, 4, restarts=r, rng=RngStream(3)).inertia for r in (1, 2, 5, 10)]
    assert all(b <= a for a, b in zip(inertias, inertias[1:]))


def test_kmeans_bad_k():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 3)), 3)


def test_match_clusters_permutation():
    truth = np.array([0, 0, 1, 1, 2, 2])
    clusters = np.array([2, 2, 0, 0, 1, 1])
    assert match_clusters(truth, clusters, 3)[clusters].tolist() == truth.tolist()


def test_pcak_noiseless_is_perfect():
    ds = normalize_dataset(generate_synthetic(builtin_templates("easy"), 50, 0.0, seed=0))
    # three distinct points span only a plane
    with pytest.warns(RuntimeWarning, match="rank 2"):
        rep = pcak_sort(ds, seed=0)
    assert rep.accuracy == 1.0


def test_pcak_deterministic():
    ds = normalize_dataset(generate_synthetic(builtin_templates("easy"), 50, 0.1, seed=1))
    a, b = pcak_sort(ds, seed=2), pcak_sort(ds, seed=2)
    assert np.array_equal(a.confusion, b.confusion)
    assert a.confusion.sum() == len(ds)
