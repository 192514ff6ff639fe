"""Target models: prior, per-datum log-likelihood potentials and their derivatives.

Every model exposes scalar per-datum accessors (``potential``,
``grad_potential``) plus vectorised forms over an index set that accept a
leading batch of positions, ``theta`` of shape ``(..., d)``.  Second
derivatives are exposed as Hessian-vector products, which is all the
reverse pass through the leapfrog integrator needs.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    BalanceInfeasibleError,
    InvalidCoresetError,
    InvalidDataError,
    InvalidParameterError,
)

LOG_2PI = math.log(2.0 * math.pi)

# kernel codes understood by the compiled core
KIND_GAUSSIAN = 0
KIND_LINREG = 1
KIND_LOGREG = 2


@dataclass
class Dataset:
    features: np.ndarray
    response: np.ndarray = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        if self.features.shape[0] < 1:
            raise InvalidDataError("dataset must contain at least one row")
        if not np.all(np.isfinite(self.features)):
            raise InvalidDataError("features contain non-finite entries")
        if self.response is not None:
            self.response = np.asarray(self.response, dtype=float).reshape(-1)
            if self.response.shape[0] != self.features.shape[0]:
                raise InvalidDataError(
                    f"response has {self.response.shape[0]} entries for "
                    f"{self.features.shape[0]} rows")
            if not np.all(np.isfinite(self.response)):
                raise InvalidDataError("response contains non-finite entries")

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def standardized(self):
        """Copy with z-scored feature columns (constant columns left centred)."""
        mu = self.features.mean(axis=0)
        sd = self.features.std(axis=0)
        sd[sd == 0] = 1.0
        return Dataset((self.features - mu) / sd, self.response)


@dataclass
class Coreset:
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.indices.size < 1:
            raise InvalidCoresetError("coreset must hold at least one point")
        if self.indices.shape != self.weights.shape:
            raise InvalidCoresetError("indices and weights differ in length")
        if np.unique(self.indices).size != self.indices.size:
            raise InvalidCoresetError("coreset indices must be distinct")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise InvalidCoresetError("coreset weights must be finite and >= 0")

    @property
    def size(self):
        return self.indices.size

    def validate(self, n_data):
        if self.indices.min() < 0 or self.indices.max() >= n_data:
            raise InvalidCoresetError(
                f"coreset index out of range for {n_data} data points")
        return self


class TargetModel:
    """Base class: prior ``log_prior`` plus data potentials ``f_n``.

    Subclasses must provide the scalar prior methods and either the scalar
    per-datum methods or the vectorised ``*_potentials`` ones.
    """

    kind = None
    dim = None
    n_data = None

    # -- prior -------------------------------------------------------------
    def log_prior(self, theta):
        raise NotImplementedError

    def grad_log_prior(self, theta):
        raise NotImplementedError

    def hvp_log_prior(self, theta, v):
        return _fd_hvp(self.grad_log_prior, theta, v)

    # -- single datum ------------------------------------------------------
    def potential(self, n, theta):
        return self.potentials(np.array([n]), theta)[..., 0]

    def grad_potential(self, n, theta):
        return self.grad_potentials(np.array([n]), theta)[..., 0, :]

    def hvp_potential(self, n, theta, v):
        return self.hvp_potentials(np.array([n]), theta, v)[..., 0, :]

    # -- vectorised over an index set: (..., d) -> (..., m) / (..., m, d) ----
    def potentials(self, idx, theta):
        return _loop_indices(lambda n, t: self.potential(n, t), idx, theta, ())

    def grad_potentials(self, idx, theta):
        return _loop_indices(
            lambda n, t: self.grad_potential(n, t), idx, theta, (self.dim,))

    def hvp_potentials(self, idx, theta, v):
        theta = np.asarray(theta, dtype=float)
        v = np.broadcast_to(np.asarray(v, dtype=float), theta.shape)
        out = np.empty(theta.shape[:-1] + (len(idx), self.dim))
        for j, n in enumerate(np.asarray(idx)):
            out[..., j, :] = _fd_hvp(lambda t: self.grad_potential(n, t), theta, v)
        return out

    # -- coreset-weighted and full-data combinations ------------------------
    def weighted_grad(self, idx, w, theta):
        return self.grad_log_prior(theta) + np.einsum(
            "m,...md->...d", w, self.grad_potentials(idx, theta))

    def weighted_hvp(self, idx, w, theta, v):
        return self.hvp_log_prior(theta, v) + np.einsum(
            "m,...md->...d", w, self.hvp_potentials(idx, theta, v))

    def log_joint(self, theta):
        """Unnormalised full-data log posterior."""
        idx = np.arange(self.n_data)
        return self.log_prior(theta) + self.potentials(idx, theta).sum(axis=-1)

    def grad_log_joint(self, theta):
        idx = np.arange(self.n_data)
        return self.grad_log_prior(theta) + self.grad_potentials(idx, theta).sum(axis=-2)

    def kernel_arrays(self, idx):
        """(kind, X, y, c) for the compiled core; only built-in models have one."""
        raise NotImplementedError


def _loop_indices(fn, idx, theta, tail):
    theta = np.asarray(theta, dtype=float)
    lead = theta.shape[:-1]
    out = np.empty(lead + (len(idx),) + tail)
    flat_t = theta.reshape(-1, theta.shape[-1])
    flat_o = out.reshape((-1, len(idx)) + tail)
    for b in range(flat_t.shape[0]):
        for j, n in enumerate(np.asarray(idx)):
            flat_o[b, j] = fn(int(n), flat_t[b])
    return out


def _fd_hvp(grad, theta, v, h=1e-5):
    # forward-over-reverse stand-in for models without an analytic Hessian
    theta = np.asarray(theta, dtype=float)
    return (np.asarray(grad(theta + h * v)) - np.asarray(grad(theta - h * v))) / (2 * h)


class CallableModel(TargetModel):
    """Model assembled from user callables ``potential(n, theta)`` etc."""

    def __init__(self, dim, n_data, log_prior, grad_log_prior, potential,
                 grad_potential, hvp_log_prior=None, hvp_potential=None):
        self.dim = int(dim)
        self.n_data = int(n_data)
        self._lp, self._glp = log_prior, grad_log_prior
        self._f, self._gf = potential, grad_potential
        self._hlp, self._hf = hvp_log_prior, hvp_potential

    def log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return float(self._lp(theta))
        return np.apply_along_axis(self._lp, -1, theta)

    def grad_log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return np.asarray(self._glp(theta), dtype=float)
        return np.apply_along_axis(self._glp, -1, theta)

    def hvp_log_prior(self, theta, v):
        if self._hlp is None:
            return super().hvp_log_prior(theta, v)
        theta = np.asarray(theta, dtype=float)
        v = np.broadcast_to(v, theta.shape)
        if theta.ndim == 1:
            return np.asarray(self._hlp(theta, v), dtype=float)
        return np.stack([self._hlp(t, u) for t, u in zip(theta.reshape(-1, self.dim),
                                                           v.reshape(-1, self.dim))]
                        ).reshape(theta.shape)

    def potential(self, n, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return float(self._f(n, theta))
        return np.apply_along_axis(lambda t: self._f(n, t), -1, theta)

    def grad_potential(self, n, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return np.asarray(self._gf(n, theta), dtype=float)
        return np.apply_along_axis(lambda t: self._gf(n, t), -1, theta)

    def hvp_potentials(self, idx, theta, v):
        if self._hf is None:
            return super().hvp_potentials(idx, theta, v)
        theta = np.asarray(theta, dtype=float)
        v = np.broadcast_to(v, theta.shape)
        out = np.empty(theta.shape[:-1] + (len(idx), self.dim))
        ft, fv = theta.reshape(-1, self.dim), v.reshape(-1, self.dim)
        fo = out.reshape(-1, len(idx), self.dim)
        for b in range(ft.shape[0]):
            for j, n in enumerate(idx):
                fo[b, j] = self._hf(int(n), ft[b], fv[b])
        return out


class _StandardNormalPrior:
    def log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        return -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(theta * theta, axis=-1)

    def grad_log_prior(self, theta):
        return -np.asarray(theta, dtype=float)

    def hvp_log_prior(self, theta, v):
        return -np.broadcast_to(np.asarray(v, dtype=float), np.shape(theta)).copy()


class GaussianLocation(_StandardNormalPrior, TargetModel):
    """theta ~ N(0, I), x_n ~ N(theta, c I)."""

    kind = KIND_GAUSSIAN

    def __init__(self, data, c):
        if not c > 0:
            raise InvalidParameterError(f"variance c must be positive, got {c}")
        self.data = data
        self.X = np.ascontiguousarray(data.features, dtype=float)
        self.c = float(c)
        self.dim = self.X.shape[1]
        self.n_data = self.X.shape[0]

    def potentials(self, idx, theta):
        diff = self.X[idx] - np.asarray(theta, dtype=float)[..., None, :]
        return (-0.5 * self.dim * (LOG_2PI + math.log(self.c))
                - 0.5 * np.sum(diff * diff, axis=-1) / self.c)

    def grad_potentials(self, idx, theta):
        return (self.X[idx] - np.asarray(theta, dtype=float)[..., None, :]) / self.c

    def hvp_potentials(self, idx, theta, v):
        v = np.broadcast_to(np.asarray(v, dtype=float), np.shape(theta))
        return np.broadcast_to(-v[..., None, :] / self.c,
                               v.shape[:-1] + (len(idx), self.dim)).copy()

    def kernel_arrays(self, idx):
        return (KIND_GAUSSIAN, np.ascontiguousarray(self.X[idx]),
                np.zeros(len(idx)), self.c)


class LinearRegression(_StandardNormalPrior, TargetModel):
    """theta = [beta (intercept first), log sigma^2] ~ N(0, I)."""

    kind = KIND_LINREG

    def __init__(self, data):
        if data.response is None:
            raise InvalidDataError("linear regression needs a response column")
        self.data = data
        self.X = np.ascontiguousarray(data.features, dtype=float)
        self.y = np.ascontiguousarray(data.response, dtype=float)
        self.p = self.X.shape[1]
        self.dim = self.p + 2
        self.n_data = self.X.shape[0]

    def _resid(self, idx, theta):
        theta = np.asarray(theta, dtype=float)
        beta = theta[..., :-1]
        pred = beta[..., None, 0] + np.einsum("mj,...j->...m", self.X[idx], beta[..., 1:])
        return self.y[idx] - pred, theta[..., -1]

    def potentials(self, idx, theta):
        r, s = self._resid(idx, theta)
        s = s[..., None]
        return -0.5 * LOG_2PI - 0.5 * s - 0.5 * r * r * np.exp(-s)

    def grad_potentials(self, idx, theta):
        r, s = self._resid(idx, theta)
        e = np.exp(-s)[..., None]
        re = r * e
        out = np.empty(r.shape + (self.dim,))
        out[..., 0] = re
        out[..., 1:-1] = re[..., None] * self.X[idx]
        out[..., -1] = -0.5 + 0.5 * r * re
        return out

    def hvp_potentials(self, idx, theta, v):
        r, s = self._resid(idx, theta)
        v = np.broadcast_to(np.asarray(v, dtype=float), np.shape(theta))
        e = np.exp(-s)[..., None]
        vb, vs = v[..., :-1], v[..., -1:]
        zv = vb[..., None, 0] + np.einsum("mj,...j->...m", self.X[idx], vb[..., 1:])
        coef = -e * zv - r * e * vs
        out = np.empty(r.shape + (self.dim,))
        out[..., 0] = coef
        out[..., 1:-1] = coef[..., None] * self.X[idx]
        out[..., -1] = -r * e * zv - 0.5 * r * r * e * vs
        return out

    def kernel_arrays(self, idx):
        return (KIND_LINREG, np.ascontiguousarray(self.X[idx]),
                np.ascontiguousarray(self.y[idx]), 1.0)


def _log_sigmoid(a):
    # log sigma(a) = -softplus(-a), branch-free stable form
    return -(np.maximum(-a, 0.0) + np.log1p(np.exp(-np.abs(a))))


class LogisticRegression(TargetModel):
    """beta_i ~ Cauchy(0, 1) iid, y_n ~ Bernoulli(sigmoid([1 x_n] beta))."""

    kind = KIND_LOGREG

    def __init__(self, data):
        if data.response is None:
            raise InvalidDataError("logistic regression needs a label column")
        y = np.asarray(data.response)
        if not np.all((y == 0) | (y == 1)):
            raise InvalidDataError("logistic regression labels must be 0 or 1")
        self.data = data
        self.X = np.ascontiguousarray(data.features, dtype=float)
        self.y = np.ascontiguousarray(y, dtype=float)
        self.p = self.X.shape[1]
        self.dim = self.p + 1
        self.n_data = self.X.shape[0]

    def log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.sum(-math.log(math.pi) - np.log1p(theta * theta), axis=-1)

    def grad_log_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        return -2.0 * theta / (1.0 + theta * theta)

    def hvp_log_prior(self, theta, v):
        theta = np.asarray(theta, dtype=float)
        t2 = theta * theta
        return -2.0 * (1.0 - t2) / (1.0 + t2) ** 2 * v

    def _logit(self, idx, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[..., None, 0] + np.einsum("mj,...j->...m", self.X[idx], theta[..., 1:])

    def potentials(self, idx, theta):
        a = self._logit(idx, theta)
        y = self.y[idx]
        return y * _log_sigmoid(a) + (1.0 - y) * _log_sigmoid(-a)

    def grad_potentials(self, idx, theta):
        a = self._logit(idx, theta)
        resid = self.y[idx] - expit(a)
        out = np.empty(a.shape + (self.dim,))
        out[..., 0] = resid
        out[..., 1:] = resid[..., None] * self.X[idx]
        return out

    def hvp_potentials(self, idx, theta, v):
        a = self._logit(idx, theta)
        v = np.broadcast_to(np.asarray(v, dtype=float), np.shape(theta))
        s = expit(a)
        zv = v[..., None, 0] + np.einsum("mj,...j->...m", self.X[idx], v[..., 1:])
        coef = -s * (1.0 - s) * zv
        out = np.empty(a.shape + (self.dim,))
        out[..., 0] = coef
        out[..., 1:] = coef[..., None] * self.X[idx]
        return out

    def kernel_arrays(self, idx):
        return (KIND_LOGREG, np.ascontiguousarray(self.X[idx]),
                np.ascontiguousarray(self.y[idx]), 1.0)


def make_gaussian_location(data, c):
    return GaussianLocation(data, c)


def make_linreg(data):
    return LinearRegression(data)


def make_logreg(data):
    return LogisticRegression(data)


def coreset_log_potential(model, coreset, theta):
    """log pi_0(theta) + sum_m w_m f_{i_m}(theta); the normaliser Z(w) is excluded."""
    coreset.validate(model.n_data)
    return model.log_prior(theta) + np.tensordot(
        model.potentials(coreset.indices, theta), coreset.weights, axes=([-1], [0]))


def coreset_grad_log_potential(model, coreset, theta):
    coreset.validate(model.n_data)
    return model.weighted_grad(coreset.indices, coreset.weights, theta)


def select_coreset(n_data, M, rng_seed, balance_labels=None):
    """Uniform subsample of ``M`` distinct indices with weights ``N / M``.

    With ``balance_labels`` (a Dataset with 0/1 response) ``ceil(M/2)`` points
    are drawn from label 1 and the rest from label 0.
    """
    if not 1 <= M <= n_data:
        raise InvalidParameterError(f"coreset size {M} must lie in [1, {n_data}]")
    rng = np.random.default_rng(rng_seed)
    if balance_labels is None:
        idx = rng.choice(n_data, size=M, replace=False)
    else:
        y = np.asarray(balance_labels.response)
        ones, zeros = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
        need = math.ceil(M / 2)
        if ones.size < need or zeros.size < need:
            raise BalanceInfeasibleError(
                f"balanced coreset of size {M} needs {need} points per class; "
                f"have {ones.size} positive, {zeros.size} negative")
        idx = np.concatenate([rng.choice(ones, size=need, replace=False),
                              rng.choice(zeros, size=M - need, replace=False)])
    return Coreset(idx, np.full(M, n_data / M))


def read_csv(path, response=None, header=True, standardize=False):
    """Load a numeric CSV.

    ``response`` selects the response column by header name or integer index;
    None means every column is a feature.  Lines starting with ``#`` are
    skipped (manifest blocks written by this package).
    """
    rows, names = [], None
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if header and names is None:
                names = [cell.strip() for cell in row]
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise InvalidDataError(f"{path}: row {lineno} has a non-numeric cell") from None
            if rows and len(rows[-1]) != len(rows[0]):
                raise InvalidDataError(f"{path}: row {lineno} has {len(rows[-1])} cells, "
                                       f"expected {len(rows[0])}")
    if not rows:
        raise InvalidDataError(f"{path}: no data rows")
    table = np.array(rows)
    if response is None:
        data = Dataset(table)
    else:
        if isinstance(response, str) and not response.lstrip("-").isdigit():
            if names is None or response not in names:
                raise InvalidDataError(f"{path}: no column named {response!r}")
            col = names.index(response)
        else:
            col = int(response)
            if not -table.shape[1] <= col < table.shape[1]:
                raise InvalidDataError(f"{path}: column index {col} out of range")
            col %= table.shape[1]
        data = Dataset(np.delete(table, col, axis=1), table[:, col])
    return data.standardized() if standardize else data
