import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats
from scipy.special import expit

from cspipe.estimator import (DegenerateDataError, DesignMatrix, FitResult,
                              average_treatment_effect, fit_logistic_glmm,
                              fit_negative_binomial, laplace_loglik, nb2_loglik,
                              split_by_toxicity, subset_effect, toxic_followup_curve,
                              variance_inflation, vif_prune)


# ---------------------------------------------------------------- VIF

def test_vif_orthogonal_columns():
    x = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    x = np.column_stack([x, x[:, 0] * x[:, 1]])
    assert np.allclose(variance_inflation(x), 1.0, atol=1e-6)
    kept, names, removed = vif_prune(x, ["a", "b", "c"])
    assert names == ["a", "b", "c"] and removed == []


def test_vif_correlated_pair():
    # exact sample correlation 0.8 by construction
    rng = np.random.default_rng(0)
    z = rng.normal(size=(500, 2))
    z -= z.mean(0)
    q, _ = np.linalg.qr(z)
    a, e = q[:, 0], q[:, 1]
    b = 0.8 * a + 0.6 * e
    v = variance_inflation(np.column_stack([a, b]))
    assert np.allclose(v, 1 / (1 - 0.64), atol=1e-9)
    assert abs(v[0] - 2.78) < 0.005
    assert vif_prune(np.column_stack([a, b]), ["a", "b"])[2] == []


def test_vif_duplicate_removed_first():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 3))
    x = np.column_stack([x, x[:, 1]])
    kept, names, removed = vif_prune(x, ["a", "b", "c", "b2"])
    assert removed[0]["vif"] == "inf" and removed[0]["column"] in ("b", "b2")
    assert len(names) == 3
    with pytest.raises(ValueError):
        vif_prune(x[:, :1], ["a"])


def test_vif_matches_statsmodels():
    from statsmodels.stats.outliers_influence import variance_inflation_factor
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
    xc = np.column_stack([np.ones(300), x])
    ref = [variance_inflation_factor(xc, j) for j in range(1, 5)]
    assert np.allclose(variance_inflation(x), ref, rtol=1e-8)


@given(st.integers(0, 2 ** 31), st.floats(1.5, 10))
@settings(max_examples=25, deadline=None)
def test_vif_prune_terminates_below_threshold(seed, thr):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(80, 3))
    x = np.column_stack([base, base @ rng.normal(size=(3, 3)) + 0.1 * rng.normal(size=(80, 3))])
    kept, names, _ = vif_prune(x, [f"c{k}" for k in range(6)], threshold=thr)
    if kept.shape[1] >= 2:
        assert np.all(variance_inflation(kept) <= thr)


# ---------------------------------------------------------------- logistic GLMM

def laplace_oracle(X, y, clusters, beta, sigma):
    """Per-cluster Laplace approximation written out directly."""
    total = 0.0
    for c in np.unique(clusters):
        m = clusters == c
        eta = X[m] @ beta

        def h(u):
            e = eta + u
            return np.sum(y[m] * e - np.logaddexp(0, e)) - u * u / (2 * sigma ** 2)

        u = optimize.minimize_scalar(lambda v: -h(v), bounds=(-20, 20), method="bounded",
                                     options={"xatol": 1e-12}).x
        w = expit(eta + u)
        curv = np.sum(w * (1 - w)) + 1 / sigma ** 2
        total += h(u) - 0.5 * math.log(sigma ** 2 * curv)
    return total


def planted(seed, G=20, m=60, sigma2=0.5, beta=(-0.3, 0.5, -0.4, 0.8)):
    rng = np.random.default_rng(seed)
    n = G * m
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2)), rng.integers(0, 2, n)])
    cl = np.repeat(np.arange(G), m)
    u = rng.normal(0, math.sqrt(sigma2), G)
    y = (rng.uniform(size=n) < expit(X @ np.array(beta) + u[cl])).astype(float)
    return X, y, cl, np.array(beta)


def test_laplace_loglik_matches_direct_computation():
    X, y, cl, beta = planted(0)
    for sigma in (0.3, 0.7, 1.5):
        ll, _ = laplace_loglik(X, y, cl, beta, sigma)
        assert abs(ll - laplace_oracle(X, y, cl, beta, sigma)) < 1e-6


def test_laplace_gradient_matches_finite_differences():
    X, y, cl, beta = planted(1)
    rng = np.random.default_rng(9)
    for _ in range(3):
        th = np.append(beta + rng.normal(scale=0.2, size=4), rng.uniform(0.3, 1.2))
        _, g = laplace_loglik(X, y, cl, th[:4], th[4])
        fd = np.empty_like(th)
        for k in range(th.size):
            h = 1e-6 * max(1.0, abs(th[k]))
            e = np.zeros_like(th)
            e[k] = h
            fp = laplace_loglik(X, y, cl, (th + e)[:4], (th + e)[4])[0]
            fm = laplace_loglik(X, y, cl, (th - e)[:4], (th - e)[4])[0]
            fd[k] = (fp - fm) / (2 * h)
        assert np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1.0)) < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_zero_variance_matches_plain_logistic(seed):
    import statsmodels.api as sm
    X, y, cl, _ = planted(seed, G=10, m=300, sigma2=0.0)
    fit = fit_logistic_glmm(X, y, cl)
    ref = sm.Logit(y, X).fit(disp=0, tol=1e-12)
    assert np.max(np.abs(fit.coef - ref.params)) < 1e-3


def test_glmm_recovers_planted_model():
    X, y, cl, beta = planted(3, G=50, m=200)
    fit = fit_logistic_glmm(X, y, cl, names=["const", "a", "b", "t"])
    assert fit.converged and fit.grad_norm < 1e-6
    assert np.all(np.abs(fit.coef - beta) < 4 * fit.se)
    assert 0.2 < fit.sigma2 < 1.0
    assert np.all(fit.se > 0)
    assert fit.to_dict()["coefficients"][3]["name"] == "t"


def test_glmm_trace_non_increasing():
    X, y, cl, _ = planted(4)
    fit = fit_logistic_glmm(X, y, cl)
    tr = np.array(fit.trace)
    assert np.all(np.diff(tr) <= 1e-12)


def test_glmm_degenerate_inputs():
    X, y, cl, _ = planted(5)
    with pytest.raises(DegenerateDataError):
        fit_logistic_glmm(X, np.zeros_like(y), cl)
    with pytest.raises(DegenerateDataError):
        fit_logistic_glmm(X, y, np.zeros_like(cl))


def test_separation_warns_and_uses_ridge():
    rng = np.random.default_rng(6)
    x = rng.normal(size=200)
    X = np.column_stack([np.ones(200), x])
    y = (x > 0).astype(float)
    with pytest.warns(RuntimeWarning, match="separation"):
        fit = fit_logistic_glmm(X, y, np.arange(200) % 4)
    assert fit.ridge > 0 and np.all(np.isfinite(fit.coef))


# ---------------------------------------------------------------- negative binomial

def test_nb_loglik_matches_scipy_and_gradient():
    rng = np.random.default_rng(7)
    X = np.column_stack([np.ones(50), rng.normal(size=50)])
    y = rng.poisson(3, 50).astype(float)
    beta, la = np.array([1.0, 0.2]), math.log(0.7)
    ll, g = nb2_loglik(beta, la, X, y)
    mu = np.exp(X @ beta)
    r = 1 / 0.7
    assert abs(ll - stats.nbinom.logpmf(y, r, r / (r + mu)).sum()) < 1e-9
    th = np.append(beta, la)
    fd = [(nb2_loglik((th + e)[:2], (th + e)[2], X, y)[0]
           - nb2_loglik((th - e)[:2], (th - e)[2], X, y)[0]) / 2e-6
          for e in np.eye(3) * 1e-6]
    assert np.max(np.abs(np.array(fd) - g)) < 1e-5


def test_nb_poisson_limit():
    import statsmodels.api as sm
    rng = np.random.default_rng(8)
    X = np.column_stack([np.ones(3000), rng.normal(size=3000)])
    y = rng.poisson(np.exp(0.5 + 0.3 * X[:, 1])).astype(float)
    fit = fit_negative_binomial(X, y)
    ref = sm.GLM(y, X, family=sm.families.Poisson()).fit(tol=1e-12)
    assert np.max(np.abs(fit.coef - ref.params)) < 1e-2


def test_nb_recovers_planted_dispersion():
    rng = np.random.default_rng(9)
    n = 10_000
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n)])
    beta = np.array([0.7, 0.4, -0.3])
    mu = np.exp(X @ beta)
    y = rng.negative_binomial(1.0, 1.0 / (1.0 + mu)).astype(float)   # alpha = 1
    fit = fit_negative_binomial(X, y)
    assert np.max(np.abs(fit.coef - beta)) < 0.05
    assert abs(fit.alpha - 1.0) < 0.05


def test_nb_degenerate():
    X = np.ones((5, 1))
    with pytest.raises(DegenerateDataError):
        fit_negative_binomial(X, np.zeros(5))
    with pytest.raises(DegenerateDataError):
        fit_negative_binomial(X, np.array([1, 2, -1, 0, 0.0]))


def test_nb_random_intercept_runs():
    rng = np.random.default_rng(10)
    cl = np.repeat(np.arange(15), 80)
    X = np.column_stack([np.ones(1200), rng.normal(size=1200)])
    mu = np.exp(0.5 + 0.3 * X[:, 1] + rng.normal(0, 0.5, 15)[cl])
    y = rng.negative_binomial(2.0, 2.0 / (2.0 + mu)).astype(float)
    fit = fit_negative_binomial(X, y, cl, random_intercept=True)
    assert abs(fit.coef[1] - 0.3) < 0.1 and fit.sigma2 > 0.05


# ---------------------------------------------------------------- average treatment effects

def toy_fit(coef, names, cov=None):
    coef = np.asarray(coef, float)
    cov = np.eye(len(coef)) * 1e-4 if cov is None else cov
    return FitResult("logistic-glmm", list(names), coef, cov, 0.0, 0.0, True, 0, 0.0, [])


def toy_design(X, names, interactions=None):
    X = np.asarray(X, float)
    return DesignMatrix(X, list(names), np.zeros(len(X), dtype=np.intp), ["c"],
                        interactions or {})


def test_ate_hand_values():
    d = toy_design([[1, 0], [1, 1], [1, 0]], ["const", "t"])
    e = average_treatment_effect(toy_fit([0.0, 1.0], d.names), d, "t", n_boot=200)
    assert abs(e.ate - (expit(1.0) - 0.5)) < 1e-12
    assert abs(e.ate - 0.2311) < 1e-4
    assert e.ci_low <= e.ate <= e.ci_high
    z = average_treatment_effect(toy_fit([0.3, 0.0], d.names), d, "t", n_boot=0)
    assert z.ate == 0.0


def test_ate_interaction_recomputed():
    d = toy_design([[1, 0, 0.5, 0.0], [1, 1, 0.2, 0.2]], ["const", "t", "tox", "tox_x_t"],
                   {"tox_x_t": ("tox", "t")})
    X1 = d.with_value("t", 1.0)
    assert np.allclose(X1[:, 3], X1[:, 2])
    assert np.allclose(d.with_value("t", 0.0)[:, 3], 0.0)


@given(st.floats(-3, 3), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_ate_sign_and_no_leakage(b, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(20), rng.integers(0, 2, 20), rng.normal(size=20)])
    d = toy_design(X, ["const", "t", "x"])
    fit = toy_fit([0.2, b, -0.5], d.names)
    e = average_treatment_effect(fit, d, "t", n_boot=0)
    assert np.sign(round(e.ate, 15)) == np.sign(round(b, 15)) or abs(b) < 1e-12
    # toggling one unit moves only that unit's prediction
    X1 = d.X.copy()
    X1[3, 1] = 1 - X1[3, 1]
    p0, p1 = expit(d.X @ fit.coef), expit(X1 @ fit.coef)
    changed = np.flatnonzero(p0 != p1)
    assert set(changed.tolist()) <= {3}


def test_bootstrap_reproducible():
    X, y, cl, _ = planted(11)
    fit = fit_logistic_glmm(X, y, cl, names=["const", "a", "b", "t"])
    d = DesignMatrix(X, ["const", "a", "b", "t"], cl, list(range(20)))
    a = average_treatment_effect(fit, d, "t", n_boot=300, seed=5)
    b = average_treatment_effect(fit, d, "t", n_boot=300, seed=5)
    assert (a.ci_low, a.ci_high, a.p_value) == (b.ci_low, b.ci_high, b.p_value)
    with pytest.raises(KeyError):
        average_treatment_effect(fit, d, "nope")


# ---------------------------------------------------------------- subsets

def test_subset_partition_and_threshold_zero():
    from cspipe.synth import SynthSpec, generate_cohort
    from cspipe.pipeline import match_cohort
    units, _ = generate_cohort(SynthSpec(seed=4, n_clusters=3, units_per_cluster=300))
    sample, _ = match_cohort(units)
    toxic = split_by_toxicity(sample, 0.5)
    assert toxic.sum() + (~toxic).sum() == len(sample)
    assert split_by_toxicity(sample, 0.0).all()
    full = subset_effect(sample, 0.0, "toxic-only", min_triplets=10, n_boot=50)
    assert full.n == 3 * len(sample)
    with pytest.raises(Exception, match="triplets"):
        subset_effect(sample, 0.999, "toxic-only", n_boot=10)
    with pytest.raises(ValueError):
        subset_effect(sample, 0.5, "sideways")


# ---------------------------------------------------------------- follow-up curve

def test_followup_fixture():
    replies = [("a", "CS", 0.1), ("b", "CS", 0.2), ("c", "CS", 0.8), ("d", "CS", 0.9)]
    follow = [("a", 0.1), ("b", 0.8), ("c", 0.9), ("d", 0.95)]
    curve = toxic_followup_curve(replies, follow, bins=[0, 0.5, 1.0], threshold=0.7)
    lo, hi = curve.series["CS"]
    assert lo["p"] == 0.5 and hi["p"] == 1.0 and hi["closed"] and not lo["closed"]
    assert "CS" in curve.to_table()
    assert toxic_followup_curve(replies, [], bins=2).series == {}


def test_followup_empty_bin_marked():
    curve = toxic_followup_curve([("a", "X", 0.05)], [("a", 0.9)], bins=4)
    bins = curve.series["X"]
    assert bins[0]["p"] == 1.0 and all(b["empty"] for b in bins[1:])


@given(st.lists(st.tuples(st.sampled_from("ABC"), st.floats(0, 1)), min_size=1, max_size=40),
       st.data())
@settings(max_examples=60, deadline=None)
def test_followup_counts_brute_force(reps, data):
    replies = [(f"r{k}", c, t) for k, (c, t) in enumerate(reps)]
    follow = []
    for rid, _, _ in replies:
        for tox in data.draw(st.lists(st.floats(0, 1), max_size=3)):
            follow.append((rid, tox))
    curve = toxic_followup_curve(replies, follow, bins=5, threshold=0.7)
    edges = np.linspace(0, 1, 6)
    for cls, bins in curve.series.items():
        for k, b in enumerate(bins):
            hi_ok = (lambda t: t <= edges[k + 1]) if k == 4 else (lambda t: t < edges[k + 1])
            members = [rid for rid, c, t in replies if c == cls and edges[k] <= t and hi_ok(t)
                       and any(p == rid for p, _ in follow)]
            assert b["n"] == len(members)
            if members:
                hits = sum(any(p == rid and f > 0.7 for p, f in follow) for rid in members)
                assert b["p"] == hits / len(members) and 0 <= b["p"] <= 1
