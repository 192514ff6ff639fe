"""Comparison methods: frozen uniform coresets, a tempered Hamiltonian flow, and Laplace."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .elbo import exact_elbo
from .errors import InvalidParameterError, NumericalDivergence
from .flow import FlowParams, forward
from .grad import elbo_gradient
from .metrics import GaussianSummary
from .model import Coreset, select_coreset
from .train import eval_seed, initial_step_sizes, iteration_seed, optimize


def uniform_coreset(n_data, M, seed):
    """Uniform subsample with weights N/M (kept frozen by the callers)."""
    return select_coreset(n_data, M, seed)


def full_coreset(n_data):
    return Coreset(np.arange(n_data), np.ones(n_data))


@dataclass
class TemperingSchedule:
    """Unconstrained tempering parameters ``alphas`` (length R - 1).

    The inverse temperatures satisfy beta_R = 1 and
    beta_r / beta_{r+1} = sigmoid(alpha_r), so they are increasing and end at 1.
    After block r < R the momentum is multiplied by sqrt(beta_r / beta_{r+1});
    after the last block the factor is 1.
    """

    alphas: np.ndarray

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float).reshape(-1)

    @classmethod
    def initial(cls, n_blocks, value=1.0):
        return cls(np.full(n_blocks - 1, float(value)))

    @property
    def n_blocks(self):
        return self.alphas.size + 1

    def betas(self):
        log_ratio = log_expit(self.alphas)
        log_beta = np.concatenate([np.cumsum(log_ratio[::-1])[::-1], [0.0]])
        return np.exp(log_beta)

    def log_factors(self):
        return np.concatenate([0.5 * log_expit(self.alphas), [0.0]])

    def dlog_factors(self):
        """Derivative of each log factor with respect to its own alpha."""
        return 0.5 * (1.0 - expit(self.alphas))


def tempered_params(coreset, step_sizes, schedule, L):
    """FlowParams realising the tempered flow (zero shifts, scalar scalings)."""
    eps = np.asarray(step_sizes, dtype=float)
    d = eps.size
    log_scales = np.repeat(schedule.log_factors()[:, None], d, axis=1)
    return FlowParams(np.log(coreset.weights), np.log(eps), np.zeros_like(log_scales),
                      log_scales, L)


def tempered_flow_forward(model, coreset, step_sizes, schedule, L, initial, backend=None):
    """R blocks of L coreset leapfrogs, multiplying the momentum by a scalar after each."""
    params = tempered_params(coreset, step_sizes, schedule, L)
    return forward(model, params, coreset, initial, backend=backend)


def _tempered_pack(log_eps, schedule):
    return np.concatenate([log_eps, schedule.alphas])


def _tempered_unpack(x, d):
    return np.exp(x[:d]), TemperingSchedule(x[d:])


def tempered_elbo_gradient(model, coreset, step_sizes, schedule, L, q, S, rng_seed,
                           n_draws=1, backend=None):
    """ELBO estimate and gradient wrt (log step sizes, alphas)."""
    params = tempered_params(coreset, step_sizes, schedule, L)
    elbo, g = elbo_gradient(model, params, coreset, q, S, rng_seed, n_draws=n_draws,
                            backend=backend)
    d_alpha = g.d_log_scales[:-1].sum(axis=1) * schedule.dlog_factors()
    return elbo, np.concatenate([g.d_log_step_sizes, d_alpha])


def fit_tempered(model, coreset, q, config, alpha_init=1.0, backend=None):
    """Train step sizes and tempering schedule with weights frozen.

    Returns ``(FlowParams, schedule, trace)``; the FlowParams realise the
    trained tempered flow and can be sampled like any sparse flow.
    """
    d = model.dim
    L = config.leapfrogs_per_block
    schedule = TemperingSchedule.initial(config.n_blocks, alpha_init)
    x0 = _tempered_pack(np.log(initial_step_sizes(config, d)), schedule)

    def value_and_grad(x, it):
        eps, sch = _tempered_unpack(x, d)
        return tempered_elbo_gradient(model, coreset, eps, sch, L, q, config.S,
                                      iteration_seed(config.rng_seed, it),
                                      config.n_draws, backend)

    def evaluate(x):
        eps, sch = _tempered_unpack(x, d)
        return exact_elbo(model, tempered_params(coreset, eps, sch, L), coreset, q,
                          config.eval_n_mc, eval_seed(config.rng_seed), backend=backend)

    if config.n_iters == 0:
        return tempered_params(coreset, *_tempered_unpack(x0, d), L), schedule, None
    best, _, trace, _ = optimize(x0, value_and_grad, evaluate, config)
    eps, sch = _tempered_unpack(best, d)
    return tempered_params(coreset, eps, sch, L), sch, trace


# --------------------------------------------------------------------------
# Laplace approximation
# --------------------------------------------------------------------------

def fd_hessian(grad, theta, h=1e-5):
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    H = np.empty((d, d))
    for i in range(d):
        step = h * max(1.0, abs(theta[i]))
        e = np.zeros(d)
        e[i] = step
        H[:, i] = (grad(theta + e) - grad(theta - e)) / (2 * step)
    return 0.5 * (H + H.T)


def _ascent_step(f, theta, val, direction, slope):
    step = 1.0
    while step > 1e-16:
        cand = theta + step * direction
        with np.errstate(over="ignore", invalid="ignore"):
            cv = float(f(cand))
        if np.isfinite(cv) and cv >= val + 1e-4 * step * slope:
            return cand, cv
        step *= 0.5
    return None


def laplace_approx(model, init, max_iters=1000, tol=1e-8, log_density=None, grad=None):
    """Gaussian centred at the posterior mode with the inverse negative Hessian.

    Mode search is backtracking ascent.  When the finite-difference Hessian
    is negative definite the Newton direction is tried first, falling back to
    the plain gradient direction.
    """
    f = log_density or model.log_joint
    g = grad or model.grad_log_joint
    theta = np.array(init, dtype=float)
    val = float(f(theta))
    for _ in range(max_iters):
        gr = g(theta)
        if np.max(np.abs(gr)) < tol:
            break
        H = fd_hessian(g, theta)
        directions = [gr]
        try:
            np.linalg.cholesky(-H)
            directions.insert(0, np.linalg.solve(-H, gr))
        except np.linalg.LinAlgError:
            pass
        moved = None
        for direction in directions:
            moved = _ascent_step(f, theta, val, direction, gr @ direction)
            if moved is not None:
                break
        if moved is None:
            # no ascent possible in floating point: accept if nearly stationary
            if np.max(np.abs(gr)) > 1e-5 * max(1.0, np.abs(H).max()):
                raise NumericalDivergence(
                    f"mode search stalled with gradient {np.abs(gr).max():.3g}")
            break
        theta, val = moved
    else:
        raise NumericalDivergence(f"mode search did not converge in {max_iters} iterations")
    H = fd_hessian(g, theta)
    try:
        np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        raise NumericalDivergence("negative Hessian at the mode is not positive definite") from None
    cov = np.linalg.inv(-H)
    return GaussianSummary(theta, 0.5 * (cov + cov.T))


def _log_joint_rows(model, theta, chunk=500):
    return np.concatenate([model.log_joint(theta[i:i + chunk])
                           for i in range(0, len(theta), chunk)])


def _laplace_proposal(model, n_samples, seed, init, inflate):
    init = np.zeros(model.dim) if init is None else init
    lap = laplace_approx(model, init)
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(inflate ** 2 * lap.covariance)
    z = rng.standard_normal((n_samples, model.dim))
    theta = lap.mean + z @ chol.T
    log_prop = (-0.5 * np.sum(z * z, axis=1) - np.sum(np.log(np.diag(chol)))
                - 0.5 * model.dim * math.log(2 * math.pi))
    return lap, theta, _log_joint_rows(model, theta) - log_prop


def importance_reference(model, n_samples=20000, seed=0, init=None, inflate=1.5):
    """Posterior moments by self-normalised importance sampling.

    The proposal is the Laplace Gaussian with covariance scaled by
    ``inflate**2``.  Returns ``(GaussianSummary, info)``.
    """
    lap, theta, logw = _laplace_proposal(model, n_samples, seed, init, inflate)
    log_z = float(logsumexp(logw) - math.log(n_samples))
    w = np.exp(logw - logsumexp(logw))
    mean = w @ theta
    diff = theta - mean
    post_cov = (w[:, None] * diff).T @ diff
    ess = 1.0 / np.sum(w * w)
    if ess < 100:
        raise InvalidParameterError(f"importance sampling degenerate (ESS {ess:.1f})")
    info = {"method": "laplace+importance", "n_samples": n_samples, "seed": seed,
            "inflate": inflate, "ess": float(ess), "log_evidence": log_z,
            "laplace_mean": lap.mean.tolist()}
    return GaussianSummary(mean, 0.5 * (post_cov + post_cov.T)), info


def log_evidence_is(model, n_samples=20000, seed=0, init=None, inflate=1.5):
    """Importance-sampling estimate of log Z with the inflated Laplace proposal."""
    _, _, logw = _laplace_proposal(model, n_samples, seed, init, inflate)
    return float(logsumexp(logw) - math.log(n_samples))
