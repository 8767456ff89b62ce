"""Full-covariance Gaussian mixtures: EM training and closed-form conditioning.

A joint mixture over [features, target] is fitted by EM and later
collapsed, per observation, into a one-dimensional mixture over the
target by conditioning each component on the feature block.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


class TrainingError(Exception):
    """Raised when EM cannot produce a usable mixture."""


@dataclass(frozen=True)
class GaussianMixture:
    """Weights, means and full covariances of an M-component mixture.

    The last dimension is treated as the regression target by
    :func:`condition`; the leading block holds the features.
    """

    weights: np.ndarray    # (M,)
    means: np.ndarray      # (M, d)
    covariances: np.ndarray  # (M, d, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        if mu.ndim != 2 or w.shape != (mu.shape[0],) or cov.shape != (*mu.shape, mu.shape[1]):
            raise ValueError("inconsistent mixture parameter shapes")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        for m in range(cov.shape[0]):
            np.linalg.cholesky(cov[m])  # raises if not SPD
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class Conditional1D:
    """One-dimensional mixture over the target after conditioning."""

    weights: np.ndarray    # (M,)
    means: np.ndarray      # (M,)
    variances: np.ndarray  # (M,)

    def __post_init__(self):
        if abs(np.sum(self.weights) - 1.0) > 1e-10:
            raise ValueError("conditional weights must sum to 1")
        if np.any(np.asarray(self.variances) <= 0):
            raise ValueError("conditional variances must be positive")


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log density of rows of x under one multivariate normal."""
    d = mean.size
    chol, lower = cho_factor(cov, lower=True)
    diff = x - mean
    sol = cho_solve((chol, lower), diff.T)
    maha = np.einsum("ij,ji->i", diff, sol)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * LOG_2PI + logdet + maha)


def log_responsibilities(g: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """(n, M) array of log(w_m * N(x | mu_m, Sigma_m))."""
    x = np.atleast_2d(x)
    out = np.empty((x.shape[0], g.n_components))
    for m in range(g.n_components):
        out[:, m] = np.log(g.weights[m]) + _log_gauss(x, g.means[m], g.covariances[m])
    return out


def _kmeans_pp_centers(data: np.ndarray, m: int, rng: np.random.Generator,
                       n_lloyd: int = 10) -> np.ndarray:
    """k-means++ seeding followed by a few Lloyd refinement passes.

    The refinement is cheap relative to EM and cuts the number of EM
    iterations substantially.
    """
    n = data.shape[0]
    centers = np.empty((m, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers[j:] = data[rng.integers(n, size=m - j)]
            break
        probs = d2 / total
        centers[j] = data[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((data - centers[j]) ** 2, axis=1))

    for _ in range(n_lloyd):
        assign = np.argmin(
            ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
        moved = False
        for j in range(m):
            members = data[assign == j]
            if members.shape[0]:
                new = members.mean(axis=0)
                if not np.array_equal(new, centers[j]):
                    centers[j] = new
                    moved = True
        if not moved:
            break
    return centers


def _floor_spd(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clip covariance eigenvalues from below; returns a symmetric SPD matrix."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


@dataclass
class EmReport:
    """What happened during one EM fit (per-sample log-likelihood trace)."""

    log_likelihoods: list[float] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0


def fit_em(data: np.ndarray, m: int, rng: np.random.Generator,
           max_iter: int = 500, tol: float = 1e-6, cov_floor: float = 1e-6,
           report: EmReport | None = None) -> GaussianMixture:
    """Fit an M-component full-covariance mixture by EM.

    k-means++ seeded, covariance eigenvalues floored at ``cov_floor``,
    stopping when the per-sample log-likelihood improves by less than
    ``tol`` for three consecutive iterations (or at ``max_iter``).
    Deterministic under a fixed generator.

    Args:
        data: (n, d) sample matrix, n >= 10*m, all finite.
        m: component count.
        rng: random generator driving the initialization.
        report: optional EmReport filled with the log-likelihood trace.

    Raises:
        TrainingError: degenerate data that the floor cannot rescue.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a 2-D matrix")
    n, d = data.shape
    if n < 10 * m:
        raise ValueError(f"need at least {10 * m} samples to fit {m} components, got {n}")
    if not np.all(np.isfinite(data)):
        raise ValueError("training data contains non-finite values")

    centers = _kmeans_pp_centers(data, m, rng)
    assign = np.argmin(
        ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    weights = np.empty(m)
    means = np.empty((m, d))
    covs = np.empty((m, d, d))
    global_cov = _floor_spd(np.cov(data.T, bias=True).reshape(d, d), cov_floor)
    for j in range(m):
        members = data[assign == j]
        weights[j] = max(members.shape[0], 1) / n
        if members.shape[0] == 0:
            means[j] = centers[j]
            covs[j] = global_cov
        else:
            means[j] = members.mean(axis=0)
            if members.shape[0] <= d:
                covs[j] = global_cov
            else:
                covs[j] = _floor_spd(np.cov(members.T, bias=True).reshape(d, d), cov_floor)
    weights /= weights.sum()

    mix = GaussianMixture(weights, means, covs)
    prev_ll = -np.inf
    stall = 0
    if report is None:
        report = EmReport()

    for it in range(max_iter):
        log_resp = log_responsibilities(mix, data)      # (n, m)
        norm = logsumexp(log_resp, axis=1)
        ll = float(norm.mean())
        if not np.isfinite(ll):
            raise TrainingError("log-likelihood diverged; data too degenerate for EM")
        report.log_likelihoods.append(ll)
        report.n_iter = it + 1

        if ll - prev_ll < tol:
            stall += 1
            if stall >= 3:
                report.converged = True
                break
        else:
            stall = 0
        prev_ll = ll

        resp = np.exp(log_resp - norm[:, None])         # (n, m)
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        weights = nk / n
        means = (resp.T @ data) / nk[:, None]
        for j in range(m):
            diff = data - means[j]
            cov = (resp[:, j][:, None] * diff).T @ diff / nk[j]
            covs[j] = _floor_spd(cov, cov_floor)
        try:
            mix = GaussianMixture(weights / weights.sum(), means, covs)
        except np.linalg.LinAlgError:
            raise TrainingError("covariance update lost positive definiteness")
    return mix


def condition(g: GaussianMixture, x: np.ndarray) -> Conditional1D:
    """Condition the joint mixture on the feature block.

    With the covariance of component m partitioned into the feature
    block S_xx, cross block s_xf and target variance s_ff, the
    conditional over the target given features x is again a mixture:

        w'_m  proportional to  w_m * N(x | mu_x_m, S_xx_m)
        mu'_m = mu_f_m + s_fx_m S_xx_m^-1 (x - mu_x_m)
        s'_m  = s_ff_m - s_fx_m S_xx_m^-1 s_xf_m

    If every responsibility underflows (x far outside the model) the
    prior weights are used instead.
    """
    x = np.asarray(x, dtype=np.float64)
    d = g.dim
    if x.shape != (d - 1,):
        raise ValueError(f"expected feature vector of length {d - 1}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature vector must be finite")

    m = g.n_components
    log_w = np.empty(m)
    mu_c = np.empty(m)
    var_c = np.empty(m)
    for j in range(m):
        mu_x = g.means[j, :-1]
        mu_f = g.means[j, -1]
        s_xx = g.covariances[j, :-1, :-1]
        s_xf = g.covariances[j, :-1, -1]
        s_ff = g.covariances[j, -1, -1]
        chol, lower = cho_factor(s_xx, lower=True)
        diff = x - mu_x
        sol = cho_solve((chol, lower), diff)
        maha = diff @ sol
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        log_w[j] = np.log(g.weights[j]) - 0.5 * ((d - 1) * LOG_2PI + logdet + maha)
        gain = cho_solve((chol, lower), s_xf)
        mu_c[j] = mu_f + gain @ diff
        var_c[j] = s_ff - gain @ s_xf

    total = logsumexp(log_w)
    if np.isfinite(total):
        w = np.exp(log_w - total)
    else:
        w = g.weights.copy()
    w = w / w.sum()
    return Conditional1D(weights=w, means=mu_c, variances=np.maximum(var_c, 1e-300))


def log_density_1d(c: Conditional1D, f) -> np.ndarray | float:
    """Log density of the conditional mixture at scalar or array ``f`` (nats)."""
    f = np.asarray(f, dtype=np.float64)
    z = (f[..., None] - c.means) / np.sqrt(c.variances)
    with np.errstate(divide="ignore"):  # zero weights are fine under logsumexp
        log_w = np.log(c.weights)
    comp = log_w - 0.5 * (LOG_2PI + np.log(c.variances) + z * z)
    out = logsumexp(comp, axis=-1)
    return float(out) if out.ndim == 0 else out
