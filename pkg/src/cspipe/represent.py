"""Distance representations for matching.

Two routes are supported: multinomial propensity scores over the full
feature vector (Euclidean distance between the 3-vectors of arm
probabilities) and a low-dimensional PCA projection compared with the
Mahalanobis distance.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist
from scipy.special import softmax

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
METRICS = ("propensity-euclidean", "mahalanobis-on-pca")


NEWTON_MAX_PARAMS = 600


class FitError(RuntimeError):
    """Optimizer failed to converge."""


@dataclass
class StandardizeParams:
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray  # bool mask of zero-variance columns

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = (x - self.mean) / np.where(self.constant, 1.0, self.sd)
        out[..., self.constant] = 0.0
        return out


def standardize(matrix):
    """Center and scale columns to sample standard deviation 1.

    Constant columns come back as zeros and are flagged in the params.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("standardize needs a 2-d matrix with at least 2 rows")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    params = StandardizeParams(mean, sd, constant)
    return params.apply(x), params


@dataclass
class FeatureMatrix:
    values: np.ndarray
    columns: list
    params: StandardizeParams | None = None

    @property
    def constant_columns(self):
        if self.params is None:
            return []
        return [c for c, f in zip(self.columns, self.params.constant) if f]


def assemble_features(embeddings, scalars, scalar_names):
    """Concatenate the embedding block with scalar confounders and standardize."""
    emb = np.asarray(embeddings, dtype=np.float64)
    sc = np.asarray(scalars, dtype=np.float64).reshape(len(emb), -1)
    raw = np.hstack([emb, sc])
    names = [f"emb_{k}" for k in range(emb.shape[1])] + list(scalar_names)
    z, params = standardize(raw)
    return FeatureMatrix(z, names, params)


@dataclass
class PCAModel:
    loadings: np.ndarray        # (k, d), rows orthonormal
    eigenvalues: np.ndarray     # full spectrum of the sample covariance
    explained: np.ndarray       # eigenvalues / trace, full spectrum
    mean: np.ndarray

    @property
    def n_components(self):
        return self.loadings.shape[0]

    def to_dict(self):
        return {"format": "pca", "version": MODEL_FORMAT_VERSION,
                "loadings": self.loadings.tolist(),
                "eigenvalues": self.eigenvalues.tolist(),
                "explained": self.explained.tolist(),
                "mean": self.mean.tolist()}

    @classmethod
    def from_dict(cls, d):
        _check_format(d, "pca")
        return cls(np.asarray(d["loadings"]), np.asarray(d["eigenvalues"]),
                   np.asarray(d["explained"]), np.asarray(d["mean"]))


def _check_format(d, kind):
    if d.get("format") != kind or d.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"not a version-{MODEL_FORMAT_VERSION} {kind} model")


def fit_pca(matrix, n_components=5):
    """Principal components of the sample covariance via SVD."""
    x = np.asarray(matrix, dtype=np.float64)
    n, d = x.shape
    if n <= n_components:
        raise ValueError("need more rows than components")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    eig = s ** 2 / (n - 1)
    total = eig.sum()
    rank = int(np.sum(eig > 1e-12 * max(total, 1e-300)))
    k = n_components
    if rank < n_components:
        warnings.warn(f"data rank {rank} < {n_components} components; "
                      f"returning {rank}", RuntimeWarning, stacklevel=2)
        k = rank
    load = vt[:k].copy()
    # fix signs so results are reproducible across LAPACK builds
    signs = np.sign(load[np.arange(k), np.abs(load).argmax(axis=1)])
    load *= signs[:, None]
    explained = eig / total if total > 0 else np.zeros_like(eig)
    return PCAModel(load, eig, explained, mean)


def project(model, matrix):
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.mean.shape[0]:
        raise ValueError(f"expected {model.mean.shape[0]} columns, got {x.shape[1]}")
    # einsum rather than BLAS so that a row projects the same alone or in a batch
    return np.einsum("ij,kj->ik", x - model.mean, model.loadings)


@dataclass
class PropensityModel:
    coef: np.ndarray            # (d + 1, 3); row 0 holds the intercepts
    classes: tuple = ("NoReply", "Counterspeech", "OtherReply")
    ridge: float = 1e-4
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0
    objective_trace: list = field(default_factory=list)

    def to_dict(self):
        return {"format": "propensity", "version": MODEL_FORMAT_VERSION,
                "coef": self.coef.tolist(), "classes": list(self.classes),
                "ridge": self.ridge, "converged": self.converged,
                "n_iter": self.n_iter, "grad_norm": self.grad_norm}

    @classmethod
    def from_dict(cls, d):
        _check_format(d, "propensity")
        return cls(np.asarray(d["coef"]), tuple(d["classes"]), d["ridge"],
                   d["converged"], d["n_iter"], d["grad_norm"])


def _design(x):
    return np.hstack([np.ones((len(x), 1)), x])


def propensity_objective(w_flat, xd, y_onehot, ridge):
    """Penalized mean negative log-likelihood and its gradient."""
    n, p = xd.shape
    k = y_onehot.shape[1]
    w = w_flat.reshape(p, k)
    eta = xd @ w
    m = eta.max(axis=1)
    lse = m + np.log(np.exp(eta - m[:, None]).sum(axis=1))
    nll = (lse - np.sum(eta * y_onehot, axis=1)).mean()
    prob = np.exp(eta - lse[:, None])
    grad = xd.T @ (prob - y_onehot) / n + ridge * w
    return nll + 0.5 * ridge * np.sum(w * w), grad.ravel()


def fit_propensity(features, arms, ridge=1e-4, tol=1e-8, max_iter=20000):
    """Ridge-penalized multinomial logistic regression on three arms.

    Maximizes the mean log-likelihood minus ``ridge/2 * ||W||^2`` (intercepts
    included, which makes the optimum unique). Convergence is declared when
    the gradient norm falls below ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    arms = np.asarray(arms, dtype=int)
    if set(np.unique(arms)) != {0, 1, 2}:
        raise ValueError("every one of the three arms needs at least one unit")
    xd_full = _design(x)
    y = np.eye(3)[arms]
    # With every weight penalized the optimum lies in the row space of the
    # design, so the fit runs in SVD coordinates and maps back exactly.
    _, sv, vt = np.linalg.svd(xd_full, full_matrices=False)
    keep = sv > 1e-10 * sv[0]
    basis = vt[keep].T                       # (p_full, r), orthonormal columns
    xd = xd_full @ basis
    p = xd.shape[1]
    trace = []

    def fun(w):
        return propensity_objective(w, xd, y, ridge)

    w0 = np.zeros(p * 3)
    trace.append(fun(w0)[0])
    if 3 * p <= NEWTON_MAX_PARAMS:
        # small reduced problem: damped Newton all the way
        w, f, gn, n_iter = _newton_polish(fun, w0, xd, ridge, tol, max_steps=200,
                                          trace=trace)
    else:
        last = {}

        def fun_cached(w):
            out = fun(w)
            last["w"], last["f"] = w.copy(), out[0]
            return out

        def callback(wk):
            same = "w" in last and np.array_equal(last["w"], wk)
            trace.append(last["f"] if same else fun(wk)[0])

        res = optimize.minimize(fun_cached, w0, jac=True, method="L-BFGS-B",
                                callback=callback,
                                options={"maxiter": max_iter, "gtol": tol * 1e-2,
                                         "ftol": 1e-300, "maxcor": 30})
        w = res.x
        f, g = fun(w)
        gn = float(np.linalg.norm(g))
        n_iter = int(res.nit)
        if gn >= tol:
            w, f, gn, extra = _newton_polish(fun, w, xd, ridge, tol, trace=trace)
            n_iter += extra
    converged = gn < tol
    if not converged:
        raise FitError(f"propensity fit did not converge: |grad| = {gn:.3e} "
                       f"after {n_iter} iterations")
    return PropensityModel(basis @ w.reshape(p, 3), ridge=ridge, converged=True,
                           n_iter=n_iter, grad_norm=gn, objective_trace=trace)


def _newton_polish(fun, w, xd, ridge, tol, max_steps=20, trace=None):
    """Damped Newton steps on the multinomial objective."""
    n, p = xd.shape
    f, g = fun(w)
    steps = 0
    if np.linalg.norm(g) < tol:
        return w, f, float(np.linalg.norm(g)), 0
    for steps in range(1, max_steps + 1):
        eta = (xd @ w.reshape(p, 3))
        prob = softmax(eta, axis=1)
        h = np.zeros((3 * p, 3 * p))
        for a in range(3):
            for b in range(3):
                wt = prob[:, a] * ((a == b) - prob[:, b])
                h[a::3, b::3] = (xd * wt[:, None]).T @ xd / n
        h += ridge * np.eye(3 * p)
        step = np.linalg.solve(h, g)
        t = 1.0
        while t > 1e-8:
            f_new, g_new = fun(w - t * step)
            if f_new <= f:
                break
            t *= 0.5
        w, f, g = w - t * step, f_new, g_new
        if trace is not None:
            trace.append(f)
        if np.linalg.norm(g) < tol:
            break
    return w, f, float(np.linalg.norm(g)), steps


def propensity_scores(model, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return softmax(_design(x) @ model.coef, axis=1)


def _pinv(cov, eps=1e-8):
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    try:
        return np.linalg.pinv(cov, hermitian=True)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(cov + eps * np.eye(len(cov)), hermitian=True)


def mahalanobis(x, y, covariance):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    s_inv = _pinv(covariance)
    if x.shape != y.shape or s_inv.shape != (x.size, x.size):
        raise ValueError("dimension mismatch between points and covariance")
    diff = x - y
    return float(np.sqrt(max(diff @ s_inv @ diff, 0.0)))


def _whitener(covariance):
    s_inv = _pinv(covariance)
    vals, vecs = np.linalg.eigh((s_inv + s_inv.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def distance_matrix(group_a, group_b, metric="euclidean", covariance=None):
    """Pairwise distances between the rows of two groups.

    ``metric`` is ``"euclidean"`` (used on propensity vectors) or
    ``"mahalanobis"`` (requires ``covariance``).
    """
    a = np.atleast_2d(np.asarray(group_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(group_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("groups have different dimensions")
    if metric in ("euclidean", "propensity-euclidean"):
        return cdist(a, b, "euclidean")
    if metric in ("mahalanobis", "mahalanobis-on-pca"):
        if covariance is None:
            raise ValueError("mahalanobis distance needs a covariance matrix")
        w = _whitener(covariance)
        if w.shape[0] != a.shape[1]:
            raise ValueError("covariance does not match the point dimension")
        return cdist(a @ w, b @ w, "euclidean")
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class ClusterRepresentation:
    metric: str
    points: np.ndarray          # per-unit representation (n, 3) or (n, k)
    covariance: np.ndarray | None
    model: object               # PropensityModel or PCAModel

    def distances(self, arms):
        arms = np.asarray(arms)
        idx = [np.flatnonzero(arms == k) for k in (0, 1, 2)]
        out = {}
        for i, j in ((0, 1), (0, 2), (1, 2)):
            out[(i, j)] = distance_matrix(
                self.points[idx[i]], self.points[idx[j]],
                metric="euclidean" if self.metric == "propensity-euclidean" else "mahalanobis",
                covariance=self.covariance)
        return out, idx


def represent_cluster(features, arms, metric="propensity-euclidean", n_components=5,
                      ridge=1e-4):
    """Fit the chosen representation on the pooled units of one cluster."""
    features = np.asarray(features, dtype=np.float64)
    if metric == "propensity-euclidean":
        model = fit_propensity(features, arms, ridge=ridge)
        return ClusterRepresentation(metric, propensity_scores(model, features), None, model)
    if metric == "mahalanobis-on-pca":
        model = fit_pca(features, n_components=n_components)
        scores = project(model, features)
        cov = np.atleast_2d(np.cov(scores, rowvar=False))
        return ClusterRepresentation(metric, scores, cov, model)
    raise ValueError(f"unknown metric {metric!r}")
