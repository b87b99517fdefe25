import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cspipe.represent import (PCAModel, PropensityModel, assemble_features, distance_matrix,
                              fit_pca, fit_propensity, mahalanobis, project,
                              propensity_objective, propensity_scores, represent_cluster,
                              standardize, _design)


# ---------------------------------------------------------------- standardize

def test_standardize_sample_sd():
    z, params = standardize(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    assert np.allclose(z[:, 0], [-1.0, 0.0, 1.0], atol=1e-12)
    assert np.all(z[:, 1] == 0.0) and params.constant.tolist() == [False, True]


def test_standardize_idempotent_and_single_row():
    rng = np.random.default_rng(0)
    z, _ = standardize(rng.normal(size=(50, 4)))
    z2, _ = standardize(z)
    assert np.max(np.abs(z - z2)) < 1e-9
    assert np.allclose(z.mean(0), 0, atol=1e-9) and np.allclose(z.std(0, ddof=1), 1, atol=1e-9)
    with pytest.raises(ValueError):
        standardize(np.ones((1, 3)))


# ---------------------------------------------------------------- PCA

def test_pca_rank_one_line():
    x = np.linspace(-3, 3, 20)
    with pytest.warns(RuntimeWarning):
        m = fit_pca(np.column_stack([x, 2 * x]), n_components=2)
    assert m.n_components == 1
    assert abs(m.explained[0] - 1.0) < 1e-12


def test_pca_isotropic_fractions():
    x = np.random.default_rng(5).standard_normal((10_000, 2))
    m = fit_pca(x, n_components=1)
    assert abs(m.explained[0] - 0.5) < 0.03 and abs(m.explained[1] - 0.5) < 0.03


def test_pca_properties():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 8)) @ rng.normal(size=(8, 8))
    m = fit_pca(x, 5)
    gram = m.loadings @ m.loadings.T
    assert np.max(np.abs(gram - np.eye(5))) < 1e-8
    assert abs(m.explained.sum() - 1.0) < 1e-9
    assert np.all(np.diff(m.explained) <= 1e-15)
    # eigenvalues agree with the covariance spectrum
    ev = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
    assert np.allclose(m.eigenvalues, ev, rtol=1e-9)


def test_projection_contracts():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(100, 6)) * np.arange(1, 7)
    m = fit_pca(x, 3)
    assert np.allclose(project(m, m.mean), 0.0)
    full = project(m, x)
    assert np.array_equal(project(m, x[7]), full[7:8])
    # reconstruction keeps exactly the explained share of total variance
    xc = x - m.mean
    recon = full @ m.loadings
    kept = np.sum(recon ** 2) / np.sum(xc ** 2)
    assert abs(kept - m.explained[:3].sum()) < 1e-9
    with pytest.raises(ValueError):
        project(m, np.zeros((2, 5)))


def test_pca_serialization():
    m = fit_pca(np.random.default_rng(0).normal(size=(30, 4)), 2)
    back = PCAModel.from_dict(m.to_dict())
    assert np.array_equal(back.loadings, m.loadings)
    with pytest.raises(ValueError):
        PCAModel.from_dict({"format": "pca", "version": 99})


# ---------------------------------------------------------------- propensity

def test_zero_coefficients_uniform():
    m = PropensityModel(np.zeros((4, 3)))
    p = propensity_scores(m, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(p, 1 / 3)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = _design(rng.normal(size=(60, 4)))
    y = np.eye(3)[rng.integers(0, 3, 60)]
    w = rng.normal(scale=0.5, size=x.shape[1] * 3)
    _, g = propensity_objective(w, x, y, 1e-4)
    h = 1e-5
    fd = np.array([(propensity_objective(w + h * e, x, y, 1e-4)[0]
                    - propensity_objective(w - h * e, x, y, 1e-4)[0]) / (2 * h)
                   for e in np.eye(len(w))])
    assert np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1e-3)) < 1e-6


def _planted(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    coef = np.array([[0.0, 0.3, -0.2], [0.0, 0.8, -0.5], [0.0, -0.4, 0.6], [0.0, 0.2, 0.3]])
    eta = _design(x) @ coef
    p = np.exp(eta - eta.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    arms = np.array([rng.choice(3, p=row) for row in p])
    return x, arms, coef


def test_planted_coefficients_recovered():
    x, arms, coef = _planted()
    m = fit_propensity(x, arms)
    # the multinomial is identified up to a shared shift per row; compare contrasts
    est = m.coef - m.coef[:, :1]
    assert np.max(np.abs(est - coef)) < 0.1
    assert m.converged and m.grad_norm < 1e-8


def test_objective_trace_non_increasing():
    x, arms, _ = _planted(800, 1)
    m = fit_propensity(x, arms)
    tr = np.array(m.objective_trace)
    assert np.all(np.diff(tr) <= 1e-12)


def test_wide_features_use_quasi_newton_path():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(300, 250))
    arms = rng.integers(0, 3, 300)
    arms[:3] = [0, 1, 2]
    m = fit_propensity(x, arms)
    assert m.converged
    p = propensity_scores(m, x)
    assert np.max(np.abs(p.sum(1) - 1)) < 1e-9
    assert np.all((p > 0) & (p < 1))


def test_missing_arm_rejected():
    with pytest.raises(ValueError):
        fit_propensity(np.zeros((4, 2)), [0, 1, 1, 0])


@given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(x):
    m = PropensityModel(np.random.default_rng(0).normal(size=(4, 3)))
    p = propensity_scores(m, x)
    assert np.all(np.abs(p.sum(1) - 1) < 1e-9)
    assert np.array_equal(propensity_scores(m, x[0]), propensity_scores(m, x[0]))


# ---------------------------------------------------------------- distances

def test_mahalanobis_fixtures():
    assert mahalanobis([1, 2], [1, 2], np.eye(2)) == 0.0
    assert abs(mahalanobis([3, 4], [0, 0], np.eye(2)) - 5.0) < 1e-12
    assert abs(mahalanobis([2, 0], [0, 0], np.diag([4.0, 1.0])) - 1.0) < 1e-9
    with pytest.raises(ValueError):
        mahalanobis([1, 2, 3], [0, 0, 0], np.eye(2))


def test_mahalanobis_matches_scipy():
    from scipy.spatial.distance import mahalanobis as sp_mah
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 4))
    cov = np.cov(rng.normal(size=(50, 4)), rowvar=False)
    vi = np.linalg.inv(cov)
    for x in a:
        assert abs(mahalanobis(x, a[0], cov) - sp_mah(x, a[0], vi)) < 1e-9


def test_singular_covariance_uses_pseudoinverse():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    d = mahalanobis([1.0, 1.0], [0.0, 0.0], cov)
    assert math.isfinite(d) and abs(d - 1.0) < 1e-9


vecs = arrays(np.float64, 3, elements=st.floats(-10, 10))


@given(vecs, vecs, vecs)
@settings(max_examples=60, deadline=None)
def test_mahalanobis_pseudometric(x, y, z):
    cov = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 0.5]])
    dxy, dyx = mahalanobis(x, y, cov), mahalanobis(y, x, cov)
    assert abs(dxy - dyx) < 1e-9 and mahalanobis(x, x, cov) == 0.0
    assert mahalanobis(x, z, cov) <= dxy + mahalanobis(y, z, cov) + 1e-9


def test_distance_matrix_fixtures():
    pa = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
    pb = np.array([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
    d = distance_matrix(pa, pb)
    expect = np.array([[0.0, math.sqrt(0.01 + 0.04 + 0.09)],
                       [math.sqrt(0.16 + 0.01 + 0.09), math.sqrt(0.25 + 0.01 + 0.36)]])
    assert np.allclose(d, expect, atol=1e-12)
    assert np.allclose(np.diag(distance_matrix(pa, pa)), 0.0)
    assert np.array_equal(distance_matrix(pb, pa), d.T)
    cov = np.diag([1.0, 2.0, 3.0])
    dm = distance_matrix(pa, pb, "mahalanobis", cov)
    assert abs(dm[1, 1] - mahalanobis(pa[1], pb[1], cov)) < 1e-12
    with pytest.raises(ValueError):
        distance_matrix(pa, pb, "mahalanobis")


def test_shift_invariance_of_representation_distances():
    rng = np.random.default_rng(8)
    emb = rng.normal(size=(90, 6))
    sc = rng.normal(size=(90, 2))
    arms = np.repeat([0, 1, 2], 30)
    for metric in ("propensity-euclidean", "mahalanobis-on-pca"):
        f1 = assemble_features(emb, sc, ["a", "b"]).values
        sc2 = sc.copy()
        sc2[:, 0] += 1234.5
        f2 = assemble_features(emb, sc2, ["a", "b"]).values
        d1, _ = represent_cluster(f1, arms, metric, n_components=3).distances(arms)
        d2, _ = represent_cluster(f2, arms, metric, n_components=3).distances(arms)
        for k in d1:
            assert np.max(np.abs(d1[k] - d2[k])) < 1e-8
