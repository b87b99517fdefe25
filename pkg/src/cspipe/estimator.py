"""Outcome models and treatment-effect estimates on the matched sample.

The binary outcome is modeled with a random-intercept logistic regression
whose marginal likelihood is approximated per cluster with Laplace's method;
activity counts use a log-link negative binomial (NB2) model. Average
treatment effects are computed by g-computation (toggling an indicator and
averaging predicted probabilities) with a parametric bootstrap over the
fixed-effect covariance.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse, special, stats

from .ingest import SCALAR_NAMES, Arm

log = logging.getLogger(__name__)

TREATMENT_COLUMNS = ("counterspeech", "hate_reply", "reply_toxicity", "toxicity_x_counterspeech")
INTERACTIONS = {"toxicity_x_counterspeech": ("reply_toxicity", "counterspeech")}
BOUNDARY_SIGMA = 1e-3


class FitError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class DegenerateDataError(ValueError):
    pass


class InsufficientSampleError(ValueError):
    pass


# ---------------------------------------------------------------- design

@dataclass
class DesignMatrix:
    X: np.ndarray
    names: list
    clusters: np.ndarray             # integer codes
    cluster_names: list
    interactions: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("column names must be unique")
        if self.X.shape[1] != len(self.names):
            raise ValueError("names do not match the number of columns")

    @property
    def n(self):
        return self.X.shape[0]

    def index(self, name):
        return self.names.index(name)

    def column(self, name):
        return self.X[:, self.index(name)]

    def with_value(self, name, value):
        """Copy of X with column ``name`` set to ``value`` and every
        interaction involving it recomputed."""
        X = self.X.copy()
        X[:, self.index(name)] = value
        for col, (a, b) in self.interactions.items():
            if name in (a, b) and col in self.names:
                X[:, self.index(col)] = X[:, self.index(a)] * X[:, self.index(b)]
        return X

    def subset(self, rows):
        rows = np.asarray(rows)
        return DesignMatrix(self.X[rows], list(self.names), self.clusters[rows],
                            list(self.cluster_names), dict(self.interactions))


def variance_inflation(matrix):
    """VIF of each column: 1 / (1 - R^2) from regressing it on the others
    (with an intercept). Constant or perfectly explained columns get inf."""
    x = np.asarray(matrix, dtype=np.float64)
    n, p = x.shape
    out = np.empty(p)
    for j in range(p):
        y = x[:, j]
        sst = np.sum((y - y.mean()) ** 2)
        if sst <= 1e-12 * max(1.0, np.sum(y ** 2)):
            out[j] = math.inf
            continue
        others = np.column_stack([np.ones(n), np.delete(x, j, axis=1)])
        beta, *_ = np.linalg.lstsq(others, y, rcond=None)
        r2 = 1.0 - np.sum((y - others @ beta) ** 2) / sst
        out[j] = math.inf if r2 >= 1.0 - 1e-10 else 1.0 / (1.0 - r2)
    return out


def vif_prune(matrix, names, threshold=5.0, protected=()):
    """Drop the highest-VIF column while any VIF exceeds ``threshold``.

    Protected columns take part in the regressions but are never dropped.
    Returns ``(kept matrix, kept names, removal log)``.
    """
    x = np.asarray(matrix, dtype=np.float64)
    names = list(names)
    if x.shape[1] < 2:
        raise ValueError("need at least two columns")
    removed = []
    while x.shape[1] >= 2:
        v = variance_inflation(x)
        cand = [(v[j], -j) for j, nm in enumerate(names) if nm not in protected]
        if not cand:
            break
        worst, negj = max(cand)
        if not worst > threshold:
            break
        j = -negj
        removed.append({"step": len(removed) + 1, "column": names[j],
                        "vif": float(worst) if math.isfinite(worst) else "inf"})
        log.info("VIF pruning: removed %s (VIF %.3g)", names[j], worst)
        x = np.delete(x, j, axis=1)
        names.pop(j)
    return x, names, removed


def _unit_columns(u):
    cs = 1.0 if u.arm == Arm.COUNTERSPEECH else 0.0
    tox = 0.0 if u.reply_toxicity is None else float(u.reply_toxicity)
    return [cs, 1.0 if u.hate_reply_flag else 0.0, tox, tox * cs]


def build_design(units, covariates=SCALAR_NAMES, vif_threshold=5.0, protected=("score",)):
    """Design for the matched units: intercept, treatment columns and the
    confounders that survive VIF pruning (``protected`` ones always stay)."""
    if not units:
        raise InsufficientSampleError("no units")
    cov = np.array([u.covariates.scalars() for u in units])
    idx = [SCALAR_NAMES.index(c) for c in covariates]
    cov = cov[:, idx]
    kept, kept_names, removed = vif_prune(cov, covariates, vif_threshold, protected)
    treat = np.array([_unit_columns(u) for u in units])
    X = np.column_stack([np.ones(len(units)), treat, kept])
    names = ["const", *TREATMENT_COLUMNS, *kept_names]
    cluster_names = sorted({u.cluster_id for u in units})
    lookup = {c: k for k, c in enumerate(cluster_names)}
    codes = np.array([lookup[u.cluster_id] for u in units], dtype=np.intp)
    return DesignMatrix(X, names, codes, cluster_names, dict(INTERACTIONS)), removed


# ---------------------------------------------------------------- fit results

@dataclass
class FitResult:
    family: str
    names: list
    coef: np.ndarray
    cov: np.ndarray
    sigma2: float
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    trace: list
    alpha: float | None = None
    cluster_effects: np.ndarray | None = None
    ridge: float = 0.0
    n: int = 0

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def z(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    @property
    def pvalues(self):
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def coefficient(self, name):
        return float(self.coef[self.names.index(name)])

    def to_dict(self):
        rows = [{"name": nm, "coef": float(b), "se": float(s), "z": float(zz), "p": float(p)}
                for nm, b, s, zz, p in zip(self.names, self.coef, self.se, self.z, self.pvalues)]
        d = {"family": self.family, "coefficients": rows, "sigma2": self.sigma2,
             "loglik": self.loglik, "converged": self.converged, "n_iter": self.n_iter,
             "grad_norm": self.grad_norm, "n": self.n, "ridge": self.ridge}
        if self.alpha is not None:
            d["alpha"] = self.alpha
        return d


class _Scaling:
    """Internal column scaling x' = (x - c) / s, with the map back to the
    original coefficients (beta = J beta')."""

    def __init__(self, X):
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        const = sd < 1e-12
        intercept = np.flatnonzero(const & np.isclose(X[0], 1.0))
        self.c = np.where(const, 0.0, X.mean(axis=0) if intercept.size else 0.0)
        self.s = np.where(const, 1.0, sd)
        p = X.shape[1]
        J = np.diag(1.0 / self.s)
        if intercept.size:
            i0 = intercept[0]
            J[i0, :] -= self.c / self.s
            J[i0, i0] = 1.0
        self.J = J
        self.Xs = (X - self.c) / self.s
        self.intercept = int(intercept[0]) if intercept.size else None
        self.p = p

    def to_original(self, b):
        return self.J @ b

    def cov_to_original(self, c):
        return self.J @ c @ self.J.T

    def ridge_mask(self):
        m = np.ones(self.p)
        if self.intercept is not None:
            m[self.intercept] = 0.0
        return m


def _cluster_codes(clusters):
    clusters = np.asarray(clusters)
    if clusters.dtype.kind in "iu" and clusters.min() >= 0:
        codes = clusters.astype(np.intp)
        return codes, int(codes.max()) + 1
    _, codes = np.unique(clusters, return_inverse=True)
    return codes.astype(np.intp), int(codes.max()) + 1


def _group_matrix(codes, G):
    n = codes.size
    return sparse.csr_matrix((np.ones(n), (codes, np.arange(n))), shape=(G, n))


def _log1pexp(eta):
    return np.logaddexp(0.0, eta)


# ---------------------------------------------------------------- logistic GLMM

class LaplaceLogistic:
    """Laplace-approximated marginal log-likelihood of a random-intercept
    logistic model, with its analytic gradient in (beta, sigma)."""

    def __init__(self, X, y, codes, G):
        self.X = X
        self.y = y.astype(np.float64)
        self.codes = codes
        self.G = G
        self.M = _group_matrix(codes, G)
        self.u = np.zeros(G)

    def _bin(self, v):
        return np.bincount(self.codes, weights=v, minlength=self.G)

    def modes(self, beta, sigma, u0=None):
        """Posterior modes of the cluster intercepts."""
        if sigma == 0.0:
            return np.zeros(self.G)
        s2 = sigma * sigma
        eta0 = self.X @ beta
        u = np.array(self.u if u0 is None else u0, dtype=np.float64)
        for _ in range(200):
            p = special.expit(eta0 + u[self.codes])
            g = self._bin(self.y - p) - u / s2
            h = self._bin(p * (1.0 - p)) + 1.0 / s2
            step = np.clip(g / h, -5.0, 5.0)
            u += step
            if np.max(np.abs(step)) < 1e-12 * (1.0 + np.max(np.abs(u))):
                break
        return u

    def loglik(self, theta, grad=True):
        p_ = self.X.shape[1]
        beta, sigma = theta[:p_], float(theta[p_])
        sigma = abs(sigma)
        u = self.modes(beta, sigma)
        self.u = u
        eta = self.X @ beta + u[self.codes]
        p = special.expit(eta)
        ll_i = self.y * eta - _log1pexp(eta)
        if sigma == 0.0:
            ll = float(np.sum(ll_i))
            if not grad:
                return ll
            g = np.append(self.X.T @ (self.y - p), 0.0)
            return ll, g
        s2 = sigma * sigma
        w = p * (1.0 - p)
        W = self._bin(w)
        A = 1.0 + s2 * W
        ll = float(np.sum(ll_i) - np.sum(u * u) / (2.0 * s2) - 0.5 * np.sum(np.log(A)))
        if not grad:
            return ll
        w1 = w * (1.0 - 2.0 * p)
        sw1 = self._bin(w1)
        du_db = -s2 * np.asarray(self.M @ (w[:, None] * self.X)) / A[:, None]
        dW_db = np.asarray(self.M @ (w1[:, None] * self.X)) + sw1[:, None] * du_db
        g_beta = self.X.T @ (self.y - p) - 0.5 * s2 * np.sum(dW_db / A[:, None], axis=0)
        r = self._bin(self.y - p)
        du_ds = 2.0 * sigma * r / A
        dW_ds = sw1 * du_ds
        g_sigma = np.sum(sigma * r * r - (sigma * W + 0.5 * s2 * dW_ds) / A)
        if theta[p_] < 0:
            g_sigma = -g_sigma
        return ll, np.append(g_beta, g_sigma)


def laplace_loglik(X, y, clusters, beta, sigma):
    """Laplace marginal log-likelihood and gradient at (beta, sigma)."""
    codes, G = _cluster_codes(clusters)
    model = LaplaceLogistic(np.asarray(X, float), np.asarray(y), codes, G)
    return model.loglik(np.append(np.asarray(beta, float), sigma))


def _fd_hessian(grad, x, rel=1e-5):
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        h = rel * max(1.0, abs(x[j]))
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (grad(x + e) - grad(x - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def _safe_inverse(H):
    try:
        return np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(H)


def fit_logistic(X, y, ridge=0.0, mask=None, tol=1e-10, max_iter=100):
    """Plain (fixed-effects) logistic regression by Newton-Raphson."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    p = X.shape[1]
    mask = np.ones(p) if mask is None else mask
    b = np.zeros(p)

    def nll(b):
        eta = X @ b
        return float(np.sum(_log1pexp(eta) - y * eta) + 0.5 * ridge * np.sum(mask * b * b))

    f = nll(b)
    for it in range(max_iter):
        mu = special.expit(X @ b)
        g = X.T @ (mu - y) + ridge * mask * b
        if np.max(np.abs(g)) < tol:
            break
        H = (X * (mu * (1 - mu))[:, None]).T @ X + np.diag(ridge * mask)
        step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            nb = b - t * step
            nf = nll(nb)
            if nf <= f + 1e-12 * abs(f) or t < 1e-10:
                break
            t *= 0.5
        b, f = nb, nf
    mu = special.expit(X @ b)
    H = (X * (mu * (1 - mu))[:, None]).T @ X + np.diag(ridge * mask)
    return b, H, -f, it


def _check_binary(y, clusters):
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise DegenerateDataError("outcomes must be 0/1")
    if y.min() == y.max():
        raise DegenerateDataError("outcomes are all identical")
    codes, G = _cluster_codes(clusters)
    if G < 2 or np.unique(codes).size < 2:
        raise DegenerateDataError("need at least two clusters")
    return y.astype(np.float64), codes, G


def _separated(beta_scaled, mask, limit=15.0):
    return bool(np.any(np.abs(beta_scaled[mask > 0]) > limit))


def fit_logistic_glmm(X, y, clusters, names=None, tol=1e-6, max_iter=1000, ridge=0.0,
                      sigma_start=0.5, _fallback=True):
    """Random-intercept logistic regression by Laplace approximation.

    logit P(y=1) = x'beta + u_cluster, u ~ N(0, sigma^2). Optimized with
    L-BFGS-B (sigma >= 0) followed by Newton polishing until the gradient of
    the mean log-likelihood has norm below ``tol``. Standard errors come from
    the inverse observed information (finite differences of the analytic
    gradient). Signs of complete separation trigger a warning and a refit
    with a ridge penalty.
    """
    X = np.asarray(X, dtype=np.float64)
    y, codes, G = _check_binary(y, clusters)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{k}" for k in range(p)]
    sc = _Scaling(X)
    mask = sc.ridge_mask()
    model = LaplaceLogistic(sc.Xs, y, codes, G)
    trace = []
    cache = {}

    def fun(theta):
        ll, g = model.loglik(theta)
        pen = 0.5 * ridge * np.sum(mask * theta[:p] ** 2)
        f = (-ll + pen) / n
        gg = -g
        gg[:p] += ridge * mask * theta[:p]
        cache[theta.tobytes()] = f
        return f, gg / n

    def grad_total(theta):
        return fun(theta)[1] * n

    b0, _, _, _ = fit_logistic(sc.Xs, y, ridge=ridge, mask=mask)
    theta0 = np.append(b0, sigma_start)
    trace.append(fun(theta0)[0])

    def callback(xk):
        f = cache.get(xk.tobytes())
        trace.append(fun(xk)[0] if f is None else f)

    res = optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B",
                            bounds=[(None, None)] * p + [(0.0, None)], callback=callback,
                            options={"maxiter": max_iter, "gtol": 1e-12, "ftol": 1e-15,
                                     "maxcor": 20})
    theta = res.x.copy()
    n_iter = int(res.nit)

    # Newton polishing on the interior
    f, g = fun(theta)
    boundary = theta[p] < BOUNDARY_SIGMA
    if not boundary:
        for _ in range(30):
            if np.linalg.norm(g) < tol * 1e-2:
                break
            H = _fd_hessian(lambda t: fun(t)[1], theta)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            while t > 1e-8:
                cand = theta - t * step
                if cand[p] >= 0:
                    fc, gc = fun(cand)
                    if fc <= f + 1e-14 * abs(f):
                        break
                t *= 0.5
            if t <= 1e-8:
                break
            theta, f, g = cand, fc, gc
            trace.append(f)
            n_iter += 1

    # the Laplace likelihood is even in sigma, so a small sigma can sit on a
    # flat ridge next to the boundary; compare against sigma = 0 explicitly
    if theta[p] < BOUNDARY_SIGMA:
        b_bd, _, _, _ = fit_logistic(sc.Xs, y, ridge=ridge, mask=mask)
        th_bd = np.append(b_bd, 0.0)
        f_bd, g_bd = fun(th_bd)
        if f_bd <= f + 1e-12:
            theta, f, g = th_bd, f_bd, g_bd
            trace.append(f)
            boundary = True
        else:
            boundary = False

    beta_s = theta[:p]
    if _fallback and ridge == 0.0 and _separated(beta_s, mask):
        warnings.warn("complete or quasi-complete separation suspected; refitting with ridge",
                      RuntimeWarning, stacklevel=2)
        return fit_logistic_glmm(X, y, codes, names, tol, max_iter, ridge=1.0,
                                 sigma_start=sigma_start, _fallback=False)

    if boundary:
        gnorm = float(np.linalg.norm(g[:p]))
    else:
        gnorm = float(np.linalg.norm(g))
    converged = gnorm < tol
    if not converged:
        raise FitError(f"logistic GLMM did not converge (gradient norm {gnorm:.3g})", trace)

    if boundary:
        mu = special.expit(sc.Xs @ beta_s)
        H = (sc.Xs * (mu * (1 - mu))[:, None]).T @ sc.Xs + np.diag(ridge * mask)
        cov_s = _safe_inverse(H)
    else:
        H = _fd_hessian(grad_total, theta)
        cov_s = _safe_inverse(H)[:p, :p]
    ll = model.loglik(theta, grad=False)
    u = model.modes(beta_s, theta[p])
    return FitResult("logistic-glmm", names, sc.to_original(beta_s), sc.cov_to_original(cov_s),
                     float(theta[p] ** 2), float(ll), True, n_iter, gnorm, trace,
                     cluster_effects=u, ridge=ridge, n=n)


# ---------------------------------------------------------------- negative binomial

def nb2_loglik(beta, log_alpha, X, y, offset=0.0):
    """NB2 log-likelihood and gradient in (beta, log alpha).

    For integer counts the gamma-function ratio is expanded as a finite sum,
    which stays accurate as alpha -> 0 (the Poisson limit).
    """
    eta = np.clip(X @ beta + offset, -50.0, 50.0)
    mu = np.exp(eta)
    r = math.exp(-log_alpha)
    g_beta = X.T @ (r * (y - mu) / (r + mu))
    ymax = int(y.max()) if y.size else 0
    x = mu / r
    if ymax <= 500:
        k = np.arange(ymax, dtype=np.float64)
        live = k[None, :] < y[:, None]
        a = (k[None, :] - mu[:, None]) / (r + mu[:, None])
        s_log = np.sum(np.where(live, np.log1p(np.where(live, a, 0.0)), 0.0), axis=1)
        s_der = np.sum(np.where(live, (mu[:, None] - k[None, :])
                                / ((r + k[None, :]) * (r + mu[:, None])), 0.0), axis=1)
        ll = s_log + y * eta - special.gammaln(y + 1) - r * np.log1p(x)
        dl_dr = s_der - np.log1p(x) + x / (1.0 + x)
    else:
        ll = (special.gammaln(y + r) - special.gammaln(r) - special.gammaln(y + 1)
              + r * (np.log(r) - np.log(r + mu)) + y * (eta - np.log(r + mu)))
        dl_dr = (special.digamma(y + r) - special.digamma(r) + np.log(r) - np.log(r + mu)
                 + (mu - y) / (r + mu))
    g_la = -r * np.sum(dl_dr)
    return float(np.sum(ll)), np.append(g_beta, g_la)


def _nb_laplace(theta, X, y, codes, G, state):
    p = X.shape[1]
    beta, la, sigma = theta[:p], theta[p], abs(theta[p + 1])
    r = math.exp(-la)
    eta0 = X @ beta
    if sigma < 1e-12:
        return nb2_loglik(beta, la, X, y)[0]
    s2 = sigma * sigma
    u = state.get("u", np.zeros(G)).copy()
    for _ in range(200):
        mu = np.exp(np.clip(eta0 + u[codes], -50, 50))
        g = np.bincount(codes, r * (y - mu) / (r + mu), G) - u / s2
        h = np.bincount(codes, r * mu * (r + y) / (r + mu) ** 2, G) + 1.0 / s2
        step = np.clip(g / h, -5, 5)
        u += step
        if np.max(np.abs(step)) < 1e-12:
            break
    state["u"] = u
    mu = np.exp(np.clip(eta0 + u[codes], -50, 50))
    h = np.bincount(codes, r * mu * (r + y) / (r + mu) ** 2, G)
    ll = nb2_loglik(beta, la, X, y, offset=u[codes])[0]
    return ll - np.sum(u * u) / (2 * s2) - 0.5 * np.sum(np.log1p(s2 * h))


def _fd_hessian_f(f, x, rel=1e-4):
    k = x.size
    H = np.empty((k, k))
    hs = rel * np.maximum(1.0, np.abs(x))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = hs[i]
            ej[j] = hs[j]
            v = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * hs[i] * hs[j])
            H[i, j] = H[j, i] = v
    return H


def _newton_polish(fun, theta, free, tol, trace, max_steps=30):
    """Damped Newton steps on the coordinates ``free`` of a smooth objective
    returning (value, gradient)."""
    theta = theta.copy()
    f, g = fun(theta)
    for _ in range(max_steps):
        gf = g[free]
        if np.linalg.norm(gf) < tol:
            break

        def gsub(z):
            t = theta.copy()
            t[free] = z
            return fun(t)[1][free]

        H = _fd_hessian(gsub, theta[free])
        try:
            step = np.linalg.solve(H, gf)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-8:
            cand = theta.copy()
            cand[free] -= t * step
            fc, gc = fun(cand)
            if fc <= f + 1e-14 * abs(f):
                break
            t *= 0.5
        if t <= 1e-8:
            break
        theta, f, g = cand, fc, gc
        trace.append(f)
    return theta


def fit_negative_binomial(X, y, clusters=None, names=None, random_intercept=False, tol=1e-6,
                          max_iter=1000):
    """Log-link NB2 regression with maximum-likelihood dispersion alpha.

    Var(y) = mu + alpha mu^2. ``random_intercept`` adds a Gaussian cluster
    intercept (Laplace approximation, numerical gradient).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DegenerateDataError("counts must be nonnegative integers")
    if not np.any(y > 0):
        raise DegenerateDataError("all counts are zero")
    n, p = X.shape
    names = list(names) if names is not None else [f"x{k}" for k in range(p)]
    sc = _Scaling(X)
    Xs = sc.Xs
    b0 = np.zeros(p)
    if sc.intercept is not None:
        b0[sc.intercept] = math.log(y.mean())
    bounds = [(None, None)] * p + [(-20.0, 5.0)]
    trace = []

    if not random_intercept:
        def fun(th):
            ll, g = nb2_loglik(th[:p], th[p], Xs, y)
            return -ll / n, -g / n

        res = optimize.minimize(fun, np.append(b0, 0.0), jac=True, method="L-BFGS-B",
                                bounds=bounds, callback=lambda xk: trace.append(fun(xk)[0]),
                                options={"maxiter": max_iter, "gtol": 1e-12, "ftol": 1e-15})
        theta = res.x.copy()
        at_bound = theta[p] <= -20.0 + 1e-6
        if at_bound:
            theta[p] = -20.0
        free = np.arange(p if at_bound else p + 1)
        theta = _newton_polish(fun, theta, free, tol * 1e-2, trace)
        g = fun(theta)[1]
        gvec = g[:p] if at_bound else g
        gnorm = float(np.linalg.norm(gvec))
        if gnorm > tol:
            raise FitError(f"negative binomial fit did not converge (gradient {gnorm:.3g})", trace)
        H = _fd_hessian(lambda t: fun(t)[1] * n, theta)
        k = p if at_bound else p + 1
        cov_s = _safe_inverse(H[:k, :k])[:p, :p]
        ll = -fun(theta)[0] * n
        sigma2, u = 0.0, None
    else:
        codes, G = _cluster_codes(clusters)
        state = {}

        def f(th):
            return -_nb_laplace(th, Xs, y, codes, G, state) / n

        bounds = bounds + [(0.0, 10.0)]
        res = optimize.minimize(f, np.append(b0, [0.0, 0.3]), method="L-BFGS-B",
                                bounds=bounds, callback=lambda xk: trace.append(f(xk)),
                                options={"maxiter": max_iter})
        theta = res.x
        if not res.success and res.nit >= max_iter:
            raise FitError("negative binomial mixed fit did not converge", trace)
        H = _fd_hessian_f(lambda t: f(t) * n, theta)
        cov_s = _safe_inverse(H)[:p, :p]
        ll = -f(theta) * n
        gnorm = float(np.linalg.norm(optimize.approx_fprime(theta, f, 1e-7)))
        sigma2 = float(theta[p + 1] ** 2)
        u = state.get("u")
    return FitResult("negative-binomial", names, sc.to_original(theta[:p]),
                     sc.cov_to_original(cov_s), sigma2, float(ll), True, int(res.nit), gnorm,
                     trace, alpha=float(math.exp(theta[p])), cluster_effects=u, n=n)


# ---------------------------------------------------------------- effects

@dataclass
class EffectEstimate:
    contrast: str
    ate: float
    ci_low: float
    ci_high: float
    p_value: float
    n: int
    level: float = 0.95
    boot_se: float = math.nan
    n_boot: int = 0

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high

    def to_dict(self):
        return {"contrast": self.contrast, "ate": self.ate, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "p_value": self.p_value, "n": self.n,
                "level": self.level, "boot_se": self.boot_se, "n_boot": self.n_boot}


def _inverse_link(fit):
    return special.expit if fit.family.startswith("logistic") else np.exp


def average_treatment_effect(fit, design, contrast, n_boot=1000, seed=0, level=0.95,
                             cluster_specific=False, values=(0.0, 1.0)):
    """g-computation ATE of setting ``contrast`` from values[0] to values[1].

    Predictions use random intercepts of zero unless ``cluster_specific``.
    The CI is the percentile interval of a parametric bootstrap from the
    fixed-effect covariance (widened if needed to contain the point
    estimate); the p-value is the two-sided bootstrap sign proportion.
    """
    if contrast not in design.names:
        raise KeyError(f"contrast {contrast!r} not in design")
    if list(fit.names) != list(design.names):
        raise ValueError("fit and design columns differ")
    inv = _inverse_link(fit)
    X0 = design.with_value(contrast, values[0])
    X1 = design.with_value(contrast, values[1])
    off = np.zeros(design.n)
    if cluster_specific and fit.cluster_effects is not None:
        off = np.asarray(fit.cluster_effects)[design.clusters]
    ate = float(np.mean(inv(X1 @ fit.coef + off) - inv(X0 @ fit.coef + off)))
    boots = np.empty(0)
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        B = rng.multivariate_normal(fit.coef, fit.cov, size=n_boot, method="eigh")
        boots = np.empty(n_boot)
        for s in range(0, n_boot, 100):
            Bc = B[s:s + 100]
            boots[s:s + 100] = np.mean(inv(Bc @ X1.T + off) - inv(Bc @ X0.T + off), axis=1)
    if boots.size:
        a = (1.0 - level) / 2.0
        lo, hi = (float(v) for v in np.quantile(boots, [a, 1.0 - a]))
        lo, hi = min(lo, ate), max(hi, ate)
        k = min(np.sum(boots <= 0), np.sum(boots >= 0))
        pval = float(min(1.0, 2.0 * (k + 1) / (n_boot + 1)))
        bse = float(np.std(boots, ddof=1))
    else:
        lo = hi = ate
        pval, bse = math.nan, math.nan
    return EffectEstimate(contrast, ate, lo, hi, pval, design.n, level, bse, int(n_boot))


@dataclass
class EffectReport:
    outcome: str
    fit: FitResult
    effects: list
    vif_removed: list
    design_names: list
    n_units: int

    def effect(self, contrast):
        for e in self.effects:
            if e.contrast == contrast:
                return e
        raise KeyError(contrast)

    def to_dict(self):
        return {"outcome": self.outcome, "n_units": self.n_units, "fit": self.fit.to_dict(),
                "effects": [e.to_dict() for e in self.effects],
                "vif_removed": self.vif_removed, "design": self.design_names}

    def to_table(self):
        lines = [f"outcome: {self.outcome}  n={self.n_units}",
                 f"{'contrast':<28}{'ATE':>10}{'CI low':>10}{'CI high':>10}{'p':>8}"]
        for e in self.effects:
            lines.append(f"{e.contrast:<28}{e.ate:>10.4f}{e.ci_low:>10.4f}{e.ci_high:>10.4f}"
                         f"{e.p_value:>8.3f}")
        lines.append("")
        lines.append(f"{'coefficient':<36}{'estimate':>10}{'SE':>10}{'p':>8}")
        for nm, b, s, p in zip(self.fit.names, self.fit.coef, self.fit.se, self.fit.pvalues):
            lines.append(f"{nm:<36}{b:>10.4f}{s:>10.4f}{p:>8.3f}")
        lines.append(f"random-intercept variance: {self.fit.sigma2:.4f}")
        return "\n".join(lines) + "\n"


DEFAULT_CONTRASTS = ("counterspeech", "hate_reply", "reply_toxicity")


def outcome_vector(units, outcome):
    if outcome == "binary":
        return np.array([1.0 if u.outcome_engaged else 0.0 for u in units])
    if outcome == "count":
        return np.array([float(u.outcome_thread_count) for u in units])
    raise ValueError(f"unknown outcome {outcome!r}")


def estimate_effects(units, outcome="binary", covariates=SCALAR_NAMES, vif_threshold=5.0,
                     n_boot=1000, seed=0, contrasts=DEFAULT_CONTRASTS, cluster_specific=False,
                     nb_random_intercept=False):
    """Fit the outcome model on ``units`` (the matched sample) and report ATEs."""
    design, removed = build_design(units, covariates, vif_threshold)
    y = outcome_vector(units, outcome)
    # a treatment column that never varies cannot be estimated
    for col in TREATMENT_COLUMNS:
        if np.ptp(design.column(col)) == 0:
            keep = [k for k, nm in enumerate(design.names) if nm != col]
            design = DesignMatrix(design.X[:, keep], [design.names[k] for k in keep],
                                  design.clusters, design.cluster_names,
                                  {c: ab for c, ab in design.interactions.items() if c != col})
    if outcome == "binary":
        fit = fit_logistic_glmm(design.X, y, design.clusters, design.names)
    else:
        fit = fit_negative_binomial(design.X, y, design.clusters, design.names,
                                    random_intercept=nb_random_intercept)
    effects = []
    for k, c in enumerate(contrasts):
        if c in design.names:
            effects.append(average_treatment_effect(fit, design, c, n_boot=n_boot,
                                                    seed=seed + k, cluster_specific=cluster_specific))
    return EffectReport(outcome, fit, effects, removed, list(design.names), len(units))


@dataclass
class MatchedSample:
    """Matched units with their triplets; ``triplets[i]`` holds indices into
    ``units`` for the (NoReply, Counterspeech, OtherReply) members."""
    units: list
    triplets: np.ndarray

    def __post_init__(self):
        self.triplets = np.asarray(self.triplets, dtype=np.intp).reshape(-1, 3)

    def __len__(self):
        return len(self.triplets)

    def matched_units(self, rows=None):
        t = self.triplets if rows is None else self.triplets[rows]
        return [self.units[i] for i in t.ravel()]


def split_by_toxicity(sample, toxicity_threshold):
    """Boolean mask over triplets: counterspeech reply toxicity > threshold."""
    tox = np.array([sample.units[i].reply_toxicity for i in sample.triplets[:, 1]], dtype=float)
    return tox > toxicity_threshold


def subset_effect(sample, toxicity_threshold=0.7, mode="toxic-only", min_triplets=50,
                  n_boot=1000, seed=0, **kw):
    """Counterspeech ATE re-estimated on triplets whose counterspeech reply is
    toxic (> threshold) or non-toxic (<= threshold); triplets stay intact."""
    toxic = split_by_toxicity(sample, toxicity_threshold)
    if mode == "toxic-only":
        rows = np.flatnonzero(toxic)
    elif mode == "nontoxic-only":
        rows = np.flatnonzero(~toxic)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if rows.size < min_triplets:
        raise InsufficientSampleError(
            f"{mode} subset has {rows.size} triplets (< {min_triplets})")
    rep = estimate_effects(sample.matched_units(rows), n_boot=n_boot, seed=seed,
                           contrasts=("counterspeech",), **kw)
    return rep.effect("counterspeech")


def naive_difference(units, arm=Arm.COUNTERSPEECH, outcome="binary"):
    """Unadjusted outcome difference: units in ``arm`` minus all others."""
    y = outcome_vector(units, outcome)
    a = np.array([u.arm == arm for u in units])
    if a.all() or not a.any():
        raise InsufficientSampleError("arm is empty or covers every unit")
    return float(y[a].mean() - y[~a].mean())


# ---------------------------------------------------------------- follow-ups

@dataclass
class FollowupCurve:
    threshold: float
    edges: list
    series: dict        # class -> list of bin dicts

    def to_dict(self):
        return {"threshold": self.threshold, "edges": self.edges, "series": self.series}

    def to_table(self):
        lines = [f"toxic follow-up threshold: {self.threshold}",
                 f"{'class':<16}{'bin':<16}{'P(toxic)':>10}{'SE':>10}{'n':>6}"]
        for cls, bins in self.series.items():
            for b in bins:
                rng = f"[{b['low']:.2f},{b['high']:.2f}{']' if b['closed'] else ')'}"
                if b["empty"]:
                    lines.append(f"{cls:<16}{rng:<16}{'-':>10}{'-':>10}{0:>6}")
                else:
                    lines.append(f"{cls:<16}{rng:<16}{b['p']:>10.4f}{b['se']:>10.4f}{b['n']:>6}")
        return "\n".join(lines) + "\n"


def toxic_followup_curve(replies, followups, bins=10, threshold=0.7):
    """P(a reply receives a follow-up with toxicity > threshold) by reply class
    and reply-toxicity bin.

    ``replies``: iterable of (reply_id, class, toxicity). ``followups``:
    iterable of (parent_reply_id, toxicity). Replies without follow-ups are
    left out of the denominators; bins without replies are kept with
    ``empty=True``. The last bin is closed on the right.
    """
    if isinstance(bins, int):
        edges = list(np.linspace(0.0, 1.0, bins + 1))
    else:
        edges = [float(e) for e in bins]
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must increase")
    toxic = {}
    for parent, tox in followups:
        toxic[parent] = toxic.get(parent, False) or (tox > threshold)
    series = {}
    if not toxic:
        return FollowupCurve(threshold, edges, series)
    per_class = {}
    for rid, cls, tox in replies:
        if rid not in toxic:
            continue
        k = int(np.searchsorted(edges, tox, side="right")) - 1
        if k == len(edges) - 1 and tox == edges[-1]:
            k -= 1
        if k < 0 or k >= len(edges) - 1:
            continue
        per_class.setdefault(str(cls), [[0, 0] for _ in range(len(edges) - 1)])[k][0] += 1
        per_class[str(cls)][k][1] += int(toxic[rid])
    for cls in sorted(per_class):
        out = []
        for k, (n, hits) in enumerate(per_class[cls]):
            closed = k == len(edges) - 2
            if n == 0:
                out.append({"low": edges[k], "high": edges[k + 1], "closed": closed,
                            "empty": True, "p": None, "se": None, "n": 0})
            else:
                p = hits / n
                out.append({"low": edges[k], "high": edges[k + 1], "closed": closed,
                            "empty": False, "p": p, "se": math.sqrt(p * (1 - p) / n), "n": n})
        series[cls] = out
    return FollowupCurve(threshold, edges, series)


def report_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=float)
