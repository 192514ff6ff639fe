"""Sparse Hamiltonian flow: coreset leapfrog maps, quasi-refreshments, forward/inverse.

A flow with ``R`` blocks applies, per block, ``L`` leapfrog steps targeting
the coreset posterior and then one momentum quasi-refreshment.  Leapfrog
steps are volume preserving, so the only log-Jacobian contributions come
from the refreshments.

Positions and momenta may carry a leading batch axis; all maps act row-wise.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._pykernel import _check
from .errors import DecompositionError, InvalidCoresetError, NumericalDivergence


@dataclass
class PhaseState:
    position: np.ndarray
    momentum: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.momentum = np.asarray(self.momentum, dtype=float)
        if self.position.shape != self.momentum.shape:
            raise ValueError("position and momentum must have the same shape")


@dataclass
class FlowOutput:
    final_state: PhaseState
    log_jacobian: float


class ConditionalRefresh:
    """Momentum standardisation conditional on position under a joint Gaussian.

    rho <- Sigma^{-1/2} (rho - mu_rho - C^T C_tt^{-1} (theta - mu_theta)) with
    Sigma the Schur complement; the map is fixed (not trained).
    """

    def __init__(self, mean_theta, mean_rho, cov_tt, cov_tr, cov_rr):
        self.mean_theta = np.asarray(mean_theta, dtype=float)
        self.mean_rho = np.asarray(mean_rho, dtype=float)
        cov_tt = np.atleast_2d(np.asarray(cov_tt, dtype=float))
        cov_tr = np.atleast_2d(np.asarray(cov_tr, dtype=float))
        cov_rr = np.atleast_2d(np.asarray(cov_rr, dtype=float))
        try:
            chol = np.linalg.cholesky(0.5 * (cov_tt + cov_tt.T))
        except np.linalg.LinAlgError:
            raise DecompositionError("position covariance is not positive definite") from None
        # gain = C_tr^T C_tt^{-1}
        sol = np.linalg.solve(chol.T, np.linalg.solve(chol, cov_tr))
        self.gain = sol.T
        schur = cov_rr - cov_tr.T @ sol
        schur = 0.5 * (schur + schur.T)
        evals, evecs = np.linalg.eigh(schur)
        if evals.min() <= 0:
            raise DecompositionError("conditional momentum covariance is not positive definite")
        self.whiten = (evecs / np.sqrt(evals)) @ evecs.T
        self.unwhiten = (evecs * np.sqrt(evals)) @ evecs.T
        self.log_jacobian = -0.5 * float(np.sum(np.log(evals)))

    @classmethod
    def from_samples(cls, theta, rho):
        d = theta.shape[1]
        cov = np.cov(np.hstack([theta, rho]), rowvar=False)
        return cls(theta.mean(axis=0), rho.mean(axis=0),
                   cov[:d, :d], cov[:d, d:], cov[d:, d:])

    def apply(self, theta, rho):
        return (rho - self.mean_rho - (theta - self.mean_theta) @ self.gain.T) @ self.whiten.T

    def inverse(self, theta, rho):
        return rho @ self.unwhiten.T + self.mean_rho + (theta - self.mean_theta) @ self.gain.T

    def vjp(self, a_theta, a_rho):
        a_in = a_rho @ self.whiten
        return a_theta - a_in @ self.gain, a_in


@dataclass
class FlowParams:
    """Unconstrained flow parameters.

    ``log_scales[r]`` is the log of the diagonal of the refreshment scaling
    matrix of block ``r``; ``conditional`` optionally replaces block ``r``'s
    marginal refreshment by a fixed :class:`ConditionalRefresh`.
    """

    log_weights: np.ndarray
    log_step_sizes: np.ndarray
    shifts: np.ndarray
    log_scales: np.ndarray
    leapfrogs_per_block: int
    conditional: list = field(default=None)

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        self.log_step_sizes = np.asarray(self.log_step_sizes, dtype=float).reshape(-1)
        self.shifts = np.atleast_2d(np.asarray(self.shifts, dtype=float))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=float))
        self.leapfrogs_per_block = int(self.leapfrogs_per_block)
        d = self.log_step_sizes.size
        if self.shifts.shape != self.log_scales.shape or self.shifts.shape[1] != d:
            raise ValueError("refreshment parameters must be (R, d) arrays")
        if self.shifts.shape[0] < 1:
            raise ValueError("a flow needs at least one refreshment block")
        if self.leapfrogs_per_block < 0:
            raise ValueError("leapfrogs_per_block must be nonnegative")

    @classmethod
    def initial(cls, coreset, dim, n_blocks, leapfrogs_per_block, step_size):
        """Uniform-coreset weights, broadcast step size, identity refreshments."""
        eps = np.broadcast_to(np.asarray(step_size, dtype=float), (dim,))
        return cls(np.log(coreset.weights), np.log(eps),
                   np.zeros((n_blocks, dim)), np.zeros((n_blocks, dim)),
                   leapfrogs_per_block)

    @property
    def n_blocks(self):
        return self.shifts.shape[0]

    @property
    def dim(self):
        return self.log_step_sizes.size

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def step_sizes(self):
        return np.exp(self.log_step_sizes)

    @property
    def refreshments(self):
        return list(zip(self.shifts, self.log_scales))

    def copy(self):
        return FlowParams(self.log_weights.copy(), self.log_step_sizes.copy(),
                          self.shifts.copy(), self.log_scales.copy(),
                          self.leapfrogs_per_block,
                          None if self.conditional is None else list(self.conditional))

    def log_jacobian(self):
        total = 0.0
        for r in range(self.n_blocks):
            cond = self.conditional[r] if self.conditional is not None else None
            total += cond.log_jacobian if cond is not None else float(np.sum(self.log_scales[r]))
        return total


def _coreset_view(params, coreset):
    if params.log_weights.size != coreset.size:
        raise InvalidCoresetError(
            f"flow has {params.log_weights.size} weights for a coreset of size {coreset.size}")
    return coreset.indices, params.weights


def leapfrog_step(model, coreset, step_sizes, state, step=None):
    """One coreset leapfrog map: half kick, drift, half kick.

    ``coreset`` supplies both the indices and the weights.  Uses two
    gradient evaluations; :func:`forward` shares them across steps.
    """
    idx, w = coreset.indices, coreset.weights
    eps = np.asarray(step_sizes, dtype=float)
    theta, rho = state.position, state.momentum
    g = model.weighted_grad(idx, w, theta)
    _check(None, step, g)
    rho_half = rho + 0.5 * eps * g
    theta = theta + eps * rho_half
    g = model.weighted_grad(idx, w, theta)
    _check(None, step, g)
    return PhaseState(theta, rho_half + 0.5 * eps * g)


def inverse_leapfrog_step(model, coreset, step_sizes, state):
    idx, w = coreset.indices, coreset.weights
    eps = np.asarray(step_sizes, dtype=float)
    theta, rho = state.position, state.momentum
    rho_half = rho - 0.5 * eps * model.weighted_grad(idx, w, theta)
    theta = theta - eps * rho_half
    return PhaseState(theta, rho_half - 0.5 * eps * model.weighted_grad(idx, w, theta))


def quasi_refresh(refreshment, state):
    """Marginal quasi-refreshment rho <- Lambda (rho - mu), Lambda = diag(exp(log_scale))."""
    shift, log_scale = refreshment
    log_scale = np.asarray(log_scale, dtype=float)
    momentum = np.exp(log_scale) * (state.momentum - shift)
    return PhaseState(state.position, momentum), float(np.sum(log_scale))


def inverse_quasi_refresh(refreshment, state):
    shift, log_scale = refreshment
    log_scale = np.asarray(log_scale, dtype=float)
    momentum = np.exp(-log_scale) * state.momentum + shift
    return PhaseState(state.position, momentum), float(np.sum(log_scale))


def conditional_refresh(cond, state):
    return (PhaseState(state.position, cond.apply(state.position, state.momentum)),
            cond.log_jacobian)


def forward(model, params, coreset, initial, backend=None):
    """Push ``initial`` through all R blocks; returns final state and total log-Jacobian."""
    idx, w = _coreset_view(params, coreset)
    theta = np.atleast_2d(initial.position)
    rho = np.atleast_2d(initial.momentum)
    theta, rho, _ = _kernels.run_forward(
        model, idx, w, params.step_sizes, params.shifts, params.log_scales,
        params.leapfrogs_per_block, theta, rho, conditional=params.conditional,
        backend=backend)
    if np.ndim(initial.position) == 1:
        theta, rho = theta[0], rho[0]
    return FlowOutput(PhaseState(theta, rho), params.log_jacobian())


def inverse(model, params, coreset, final):
    """Exact algebraic inverse of :func:`forward`; returns the same log-Jacobian."""
    idx, w = _coreset_view(params, coreset)
    eps = params.step_sizes
    half = 0.5 * eps
    L = params.leapfrogs_per_block
    theta = np.array(final.position, dtype=float)
    rho = np.array(final.momentum, dtype=float)
    g = None
    for r in range(params.n_blocks - 1, -1, -1):
        cond = params.conditional[r] if params.conditional is not None else None
        if cond is not None:
            rho = cond.inverse(theta, rho)
        else:
            rho = np.exp(-params.log_scales[r]) * rho + params.shifts[r]
        _check(r, None, rho)
        for step in range(L - 1, -1, -1):
            if g is None:
                g = model.weighted_grad(idx, w, theta)
            rho_half = rho - half * g
            theta = theta - eps * rho_half
            g = model.weighted_grad(idx, w, theta)
            rho = rho_half - half * g
            _check(r, step, theta, rho, g)
    return FlowOutput(PhaseState(theta, rho), params.log_jacobian())


def trajectory(model, params, coreset, initial):
    """All intermediate states of a forward pass (python path).

    Returns a list of ``(kind, PhaseState, log_jacobian_so_far)`` with kind in
    {"initial", "leapfrog", "refresh"}; used for per-step diagnostics.
    """
    idx, w = _coreset_view(params, coreset)
    eps = params.step_sizes
    half = 0.5 * eps
    theta = np.array(initial.position, dtype=float)
    rho = np.array(initial.momentum, dtype=float)
    J = 0.0
    out = [("initial", PhaseState(theta, rho), J)]
    g = None
    for r in range(params.n_blocks):
        for step in range(params.leapfrogs_per_block):
            if g is None:
                g = model.weighted_grad(idx, w, theta)
            rho_half = rho + half * g
            theta = theta + eps * rho_half
            g = model.weighted_grad(idx, w, theta)
            rho = rho_half + half * g
            _check(r, step, theta, rho, g)
            out.append(("leapfrog", PhaseState(theta, rho), J))
        cond = params.conditional[r] if params.conditional is not None else None
        if cond is not None:
            rho = cond.apply(theta, rho)
            J += cond.log_jacobian
        else:
            rho = np.exp(params.log_scales[r]) * (rho - params.shifts[r])
            J += float(np.sum(params.log_scales[r]))
        _check(r, None, rho)
        out.append(("refresh", PhaseState(theta, rho), J))
    return out


__all__ = [
    "ConditionalRefresh", "FlowOutput", "FlowParams", "NumericalDivergence", "PhaseState",
    "conditional_refresh", "forward", "inverse", "inverse_leapfrog_step",
    "inverse_quasi_refresh", "leapfrog_step", "quasi_refresh", "trajectory",
]
