"""ELBO estimation for sparse Hamiltonian flows.

The estimator draws ``(theta0, rho0) ~ q``, pushes it through the flow and
compares the augmented target at the end point (with a with-replacement
minibatch estimate of the data term) against the pushed-forward density
``log q(theta0, rho0) - J``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidParameterError
from .flow import PhaseState, _coreset_view, inverse, trajectory

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ReferenceDistribution:
    """Diagonal Gaussian over position times a standard normal over momentum."""

    position_mean: np.ndarray
    position_diag_cov: np.ndarray

    def __post_init__(self):
        self.position_mean = np.atleast_1d(np.asarray(self.position_mean, dtype=float))
        cov = np.asarray(self.position_diag_cov, dtype=float)
        self.position_diag_cov = np.broadcast_to(cov, self.position_mean.shape).copy()
        if not np.all(self.position_diag_cov > 0) or not np.all(np.isfinite(self.position_diag_cov)):
            raise InvalidParameterError("reference position variances must be positive")
        if not np.all(np.isfinite(self.position_mean)):
            raise InvalidParameterError("reference position mean must be finite")

    @property
    def dim(self):
        return self.position_mean.size

    def sample(self, n, rng):
        sd = np.sqrt(self.position_diag_cov)
        theta = self.position_mean + sd * rng.standard_normal((n, self.dim))
        rho = rng.standard_normal((n, self.dim))
        return theta, rho

    def log_density(self, theta, rho):
        z = (np.asarray(theta) - self.position_mean) ** 2 / self.position_diag_cov
        return (-self.dim * LOG_2PI - 0.5 * np.sum(np.log(self.position_diag_cov))
                - 0.5 * np.sum(z, axis=-1) - 0.5 * np.sum(np.asarray(rho) ** 2, axis=-1))


@dataclass
class ElboSample:
    elbo_value: float
    final_state: PhaseState
    log_flow_density: float
    log_target_estimate: float


@dataclass
class Draw:
    """Reference draws and minibatch indices shared by value and gradient."""

    theta0: np.ndarray
    rho0: np.ndarray
    indices: np.ndarray  # (B, S), or None for the full sum


def draw(model, q, S, rng_seed, n_draws=1, replace=True, full_sum=False):
    rng = np.random.default_rng(rng_seed)
    theta0, rho0 = q.sample(n_draws, rng)
    if full_sum:
        return Draw(theta0, rho0, None)
    N = model.n_data
    if S < 1:
        raise InvalidParameterError("minibatch size S must be at least 1")
    if replace:
        idx = rng.integers(0, N, size=(n_draws, S))
    else:
        if S > N:
            raise InvalidParameterError(f"S={S} exceeds N={N} without replacement")
        idx = np.stack([rng.choice(N, size=S, replace=False) for _ in range(n_draws)])
    return Draw(theta0, rho0, idx)


def log_std_normal(rho):
    rho = np.asarray(rho)
    return -0.5 * rho.shape[-1] * LOG_2PI - 0.5 * np.sum(rho * rho, axis=-1)


def log_target(model, theta, rho, indices=None):
    """Augmented log target per row; minibatch estimate when ``indices`` is (B, S)."""
    theta = np.atleast_2d(theta)
    base = model.log_prior(theta) + log_std_normal(rho)
    if indices is None:
        return base + model.potentials(np.arange(model.n_data), theta).sum(axis=-1)
    scale = model.n_data / indices.shape[1]
    data = np.array([model.potentials(ix, th).sum() for ix, th in zip(indices, theta)])
    return base + scale * data


def grad_log_target_theta(model, theta, indices=None):
    theta = np.atleast_2d(theta)
    if indices is None:
        return model.grad_log_joint(theta)
    scale = model.n_data / indices.shape[1]
    data = np.stack([model.grad_potentials(ix, th).sum(axis=0) for ix, th in zip(indices, theta)])
    return model.grad_log_prior(theta) + scale * data


def _push(model, params, coreset, dr, record=False, backend=None):
    idx, w = _coreset_view(params, coreset)
    return _kernels.run_forward(
        model, idx, w, params.step_sizes, params.shifts, params.log_scales,
        params.leapfrogs_per_block, dr.theta0, dr.rho0, record=record,
        conditional=params.conditional, backend=backend)


def elbo_values(model, params, coreset, q, dr, backend=None):
    """Per-draw (elbo, log_target, log_flow_density, theta, rho)."""
    theta, rho, _ = _push(model, params, coreset, dr, backend=backend)
    log_p = log_target(model, theta, rho, dr.indices)
    log_q = q.log_density(dr.theta0, dr.rho0) - params.log_jacobian()
    return log_p - log_q, log_p, log_q, theta, rho


def estimate_elbo(model, params, coreset, q, S, rng_seed, replace=True, full_sum=False,
                  backend=None):
    dr = draw(model, q, S, rng_seed, replace=replace, full_sum=full_sum)
    elbo, log_p, log_q, theta, rho = elbo_values(model, params, coreset, q, dr, backend)
    return ElboSample(float(elbo[0]), PhaseState(theta[0], rho[0]), float(log_q[0]),
                      float(log_p[0]))


def exact_elbo(model, params, coreset, q, n_mc, rng_seed, backend=None):
    """Mean and standard error of the full-sum ELBO integrand over ``n_mc`` draws."""
    if n_mc < 2:
        raise InvalidParameterError("n_mc must be at least 2")
    dr = draw(model, q, 0, rng_seed, n_draws=n_mc, full_sum=True)
    elbo = elbo_values(model, params, coreset, q, dr, backend)[0]
    return float(elbo.mean()), float(elbo.std(ddof=1) / math.sqrt(n_mc))


def flow_log_density(model, params, coreset, q, state):
    back = inverse(model, params, coreset, state)
    s0 = back.final_state
    return q.log_density(s0.position, s0.momentum) - back.log_jacobian


def elbo_step_trace(model, params, coreset, q, n_mc, rng_seed):
    """Full-sum ELBO after every leapfrog step and refreshment.

    Returns ``(kinds, values)`` where ``values`` is (n_steps, n_mc) so jumps
    can be compared on common draws; ``kinds`` labels each step.
    """
    dr = draw(model, q, 0, rng_seed, n_draws=n_mc, full_sum=True)
    log_q0 = q.log_density(dr.theta0, dr.rho0)
    traj = trajectory(model, params, coreset, PhaseState(dr.theta0, dr.rho0))
    kinds, rows = [], []
    for kind, state, J in traj:
        kinds.append(kind)
        rows.append(log_target(model, state.position, state.momentum) - log_q0 + J)
    return kinds, np.array(rows)
