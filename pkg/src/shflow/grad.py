"""Reverse-mode gradients of the ELBO estimate.

The reference draw and minibatch are fixed by the seed, so the estimate is
a deterministic function of the flow parameters.  The backward pass runs
the hand-derived adjoint of every leapfrog shear and refreshment, using
analytic Hessian-vector products of the coreset potential.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .elbo import draw, grad_log_target_theta, log_target
from .errors import NumericalDivergence
from .flow import _coreset_view


@dataclass
class ParameterGradient:
    d_log_weights: np.ndarray
    d_log_step_sizes: np.ndarray
    d_shifts: np.ndarray
    d_log_scales: np.ndarray

    @property
    def d_refreshments(self):
        return list(zip(self.d_shifts, self.d_log_scales))

    def scaled(self, k):
        return ParameterGradient(k * self.d_log_weights, k * self.d_log_step_sizes,
                                 k * self.d_shifts, k * self.d_log_scales)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in
                   (self.d_log_weights, self.d_log_step_sizes, self.d_shifts, self.d_log_scales))


def elbo_and_gradient(model, params, coreset, q, dr, backend=None):
    """ELBO average over the draws in ``dr`` and its parameter gradient."""
    idx, w = _coreset_view(params, coreset)
    eps = params.step_sizes
    L = params.leapfrogs_per_block
    theta, rho, trace = _kernels.run_forward(
        model, idx, w, eps, params.shifts, params.log_scales, L, dr.theta0, dr.rho0,
        record=True, conditional=params.conditional, backend=backend)
    B = theta.shape[0]
    log_p = log_target(model, theta, rho, dr.indices)
    log_q = q.log_density(dr.theta0, dr.rho0) - params.log_jacobian()
    elbo = float(np.mean(log_p - log_q))

    a_theta = grad_log_target_theta(model, theta, dr.indices)
    a_rho = -rho
    if not np.all(np.isfinite(a_theta)):
        raise NumericalDivergence("non-finite target gradient at the flow output",
                                  block=params.n_blocks - 1)
    adj = _kernels.run_backward(
        model, idx, w, eps, params.shifts, params.log_scales, L, trace, a_theta, a_rho,
        conditional=params.conditional, backend=backend)
    d_log_scales = adj["d_log_scales"] / B
    # the log-Jacobian adds sum(log_scales) for every marginal refreshment
    for r in range(params.n_blocks):
        if params.conditional is None or params.conditional[r] is None:
            d_log_scales[r] += 1.0
    grad = ParameterGradient(
        adj["d_weights"] / B * w,
        adj["d_step_sizes"] / B * eps,
        adj["d_shifts"] / B,
        d_log_scales,
    )
    if not grad.all_finite():
        raise NumericalDivergence("non-finite adjoint", block=0)
    return elbo, grad


def elbo_gradient(model, params, coreset, q, S, rng_seed, n_draws=1, scale=1.0,
                  replace=True, full_sum=False, backend=None):
    """Return ``(elbo, ParameterGradient)`` for the draw fixed by ``rng_seed``.

    ``scale`` multiplies the objective (and hence every gradient entry).
    """
    dr = draw(model, q, S, rng_seed, n_draws=n_draws, replace=replace, full_sum=full_sum)
    elbo, grad = elbo_and_gradient(model, params, coreset, q, dr, backend=backend)
    if scale != 1.0:
        return scale * elbo, grad.scaled(scale)
    return elbo, grad
