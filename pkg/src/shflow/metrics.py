"""Approximation-quality metrics: Gaussian KL, moment errors, energy distance, IMQ KSD."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidParameterError


@dataclass
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        d = self.mean.size
        if cov.shape != (d, d):
            raise InvalidParameterError(f"covariance must be {d}x{d}, got {cov.shape}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * max(1.0, np.abs(cov).max()):
            raise InvalidParameterError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if d and np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
            raise InvalidParameterError("covariance is not positive semidefinite")
        self.covariance = cov

    @property
    def dim(self):
        return self.mean.size

    def to_dict(self):
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["covariance"], dtype=float))


def _chol(cov, what):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise InvalidParameterError(f"{what} covariance is not positive definite") from None


def gaussian_kl(a, b):
    """KL(a || b) between two Gaussian summaries."""
    if a.dim != b.dim:
        raise InvalidParameterError("dimension mismatch")
    lb = _chol(b.covariance, "second")
    sign, logdet_a = np.linalg.slogdet(a.covariance)
    if sign <= 0:
        raise InvalidParameterError("first covariance is singular")
    logdet_b = 2.0 * np.sum(np.log(np.diag(lb)))
    m = np.linalg.solve(lb, b.mean - a.mean)
    tr = np.trace(np.linalg.solve(b.covariance, a.covariance))
    kl = 0.5 * (logdet_b - logdet_a - a.dim + tr + m @ m)
    return float(max(kl, 0.0))


def relative_errors(approx, truth):
    """(relative 2-norm mean error, relative Frobenius covariance error)."""
    nm = np.linalg.norm(truth.mean)
    nc = np.linalg.norm(truth.covariance)
    if nm == 0 or nc == 0:
        raise InvalidParameterError("reference mean and covariance must have nonzero norm")
    return (float(np.linalg.norm(approx.mean - truth.mean) / nm),
            float(np.linalg.norm(approx.covariance - truth.covariance) / nc))


def _samples(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def energy_distance(X, Y):
    """V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|."""
    X, Y = _samples(X), _samples(Y)
    if len(X) == 0 or len(Y) == 0:
        raise InvalidParameterError("energy distance needs nonempty samples")
    return float(2.0 * cdist(X, Y).mean() - cdist(X, X).mean() - cdist(Y, Y).mean())


def imq_stein_kernel(X, Y, SX, SY, beta=-0.5, c=1.0):
    """Langevin-Stein kernel matrix for k(x, y) = (c^2 + |x - y|^2)^beta."""
    d = X.shape[1]
    diff = X[:, None, :] - Y[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    base = c * c + r2
    k = base ** beta
    # grad_x k = 2 beta base^(beta-1) (x - y); grad_y k = -grad_x k
    gx = 2.0 * beta * base[..., None] ** (beta - 1) * diff
    trace = -(2.0 * beta * d * base ** (beta - 1)
              + 4.0 * beta * (beta - 1) * base ** (beta - 2) * r2)
    return ((SX @ SY.T) * k
            - np.einsum("id,ijd->ij", SX, gx)
            + np.einsum("jd,ijd->ij", SY, gx)
            + trace)


def ksd_imq(X, score, beta=-0.5, c=1.0, block=1024):
    """Kernel Stein discrepancy (V-statistic) with the IMQ base kernel."""
    X = _samples(X)
    n = len(X)
    if n < 2:
        raise InvalidParameterError("KSD needs at least two samples")
    S = np.asarray(score(X), dtype=float).reshape(X.shape)
    total = 0.0
    for i in range(0, n, block):
        for j in range(0, n, block):
            total += imq_stein_kernel(X[i:i + block], X[j:j + block],
                                      S[i:i + block], S[j:j + block], beta, c).sum()
    return float(np.sqrt(max(total / (n * n), 0.0)))


def sample_summary(X):
    X = _samples(X)
    if len(X) < 2:
        raise InvalidParameterError("need at least two samples for a covariance")
    cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    return GaussianSummary(X.mean(axis=0), 0.5 * (cov + cov.T))


def gaussian_approx_kl(X, reference):
    """KL from the moment-matched Gaussian of samples ``X`` to ``reference``."""
    return gaussian_kl(sample_summary(X), reference)


def compute_metrics(names, X, reference=None, score=None, reference_samples=None, seed=0):
    """Evaluate the named metrics on samples ``X``; returns a dict keyed by name.

    ``energy`` compares against ``reference_samples`` when given, otherwise
    against a seeded draw from the Gaussian ``reference`` of the same size.
    """
    out = {}
    for name in names:
        if name in ("kl", "mean_error", "cov_error") and reference is None:
            raise InvalidParameterError(f"metric {name!r} needs a reference summary")
        if name == "kl":
            out[name] = gaussian_approx_kl(X, reference)
        elif name == "mean_error":
            out[name] = relative_errors(sample_summary(X), reference)[0]
        elif name == "cov_error":
            out[name] = relative_errors(sample_summary(X), reference)[1]
        elif name == "ksd":
            if score is None:
                raise InvalidParameterError("metric 'ksd' needs a score function")
            out[name] = ksd_imq(X, score)
        elif name == "energy":
            ref = reference_samples
            if ref is None:
                if reference is None:
                    raise InvalidParameterError("metric 'energy' needs a reference")
                rng = np.random.default_rng(seed)
                ref = rng.multivariate_normal(reference.mean, reference.covariance, size=len(X))
            out[name] = energy_distance(X, ref)
        else:
            raise InvalidParameterError(f"unknown metric {name!r}")
    return out
