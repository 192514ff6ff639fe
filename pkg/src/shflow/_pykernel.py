"""Numpy implementation of the flow kernels, batched over samples.

This is the fallback when the compiled core is unavailable and the only
path for user-defined models or conditional refreshments.  Shapes:
``theta``/``rho`` are (B, d); ``shifts``/``log_scales`` are (R, d).
"""

import numpy as np

from .errors import NumericalDivergence

DIVERGENCE_LIMIT = 1e10


def _check(block, step, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)) or np.any(np.abs(a) > DIVERGENCE_LIMIT):
            where = f"block {block}" + ("" if step is None else f", leapfrog step {step}")
            raise NumericalDivergence(f"flow state diverged at {where}", block=block, step=step)


def forward(model, idx, w, eps, shifts, log_scales, L, theta, rho, record=False,
            conditional=None):
    theta = np.array(theta, dtype=float)
    rho = np.array(rho, dtype=float)
    B, d = theta.shape
    R = shifts.shape[0]
    K = R * L
    trace = None
    if record:
        trace = {
            "theta": np.empty((B, K + 1, d)),
            "grad": np.zeros((B, K + 1, d)),
            "rhohat": np.empty((B, K, d)),
            "rho_out": np.empty((B, R, d)),
        }
    half = 0.5 * eps
    g = None
    if K > 0:
        g = model.weighted_grad(idx, w, theta)
        _check(0, 0, g)
    for r in range(R):
        for l in range(L):
            k = r * L + l
            if record:
                trace["theta"][:, k] = theta
                trace["grad"][:, k] = g
            rh = rho + half * g
            theta = theta + eps * rh
            g = model.weighted_grad(idx, w, theta)
            rho = rh + half * g
            _check(r, l, theta, rho, g)
            if record:
                trace["rhohat"][:, k] = rh
        if conditional is not None and conditional[r] is not None:
            rho = conditional[r].apply(theta, rho)
        else:
            rho = np.exp(log_scales[r]) * (rho - shifts[r])
        _check(r, None, rho)
        if record:
            trace["rho_out"][:, r] = rho
    if record:
        trace["theta"][:, K] = theta
        if g is not None:
            trace["grad"][:, K] = g
    return theta, rho, trace


def backward(model, idx, w, eps, shifts, log_scales, L, trace, a_theta, a_rho,
             conditional=None):
    """Adjoint of ``forward`` given the output cotangents, summed over the batch."""
    a_t = np.array(a_theta, dtype=float)
    a_r = np.array(a_rho, dtype=float)
    R, d = shifts.shape
    d_w = np.zeros(len(idx))
    d_eps = np.zeros(d)
    d_shifts = np.zeros((R, d))
    d_log_scales = np.zeros((R, d))
    half = 0.5 * eps
    th, gr, rhat = trace["theta"], trace["grad"], trace["rhohat"]

    def kick(k, a_r, a_t):
        v = half * a_r
        G = model.grad_potentials(idx, th[:, k])
        d_w_k = np.einsum("bmd,bd->m", G, v)
        return 0.5 * (a_r * gr[:, k]).sum(axis=0), d_w_k, a_t + model.weighted_hvp(idx, w, th[:, k], v)

    for r in range(R - 1, -1, -1):
        if conditional is not None and conditional[r] is not None:
            a_t, a_r = conditional[r].vjp(a_t, a_r)
        else:
            lam = np.exp(log_scales[r])
            d_log_scales[r] += (a_r * trace["rho_out"][:, r]).sum(axis=0)
            d_shifts[r] -= (lam * a_r).sum(axis=0)
            a_r = lam * a_r
        _check(r, None, a_t, a_r)
        for l in range(L - 1, -1, -1):
            k = r * L + l
            de, dw, a_t = kick(k + 1, a_r, a_t)
            d_eps += de
            d_w += dw
            d_eps += (a_t * rhat[:, k]).sum(axis=0)
            a_r = a_r + eps * a_t
            de, dw, a_t = kick(k, a_r, a_t)
            d_eps += de
            d_w += dw
        _check(r, None, a_t, a_r)
    return {
        "d_weights": d_w,
        "d_step_sizes": d_eps,
        "d_shifts": d_shifts,
        "d_log_scales": d_log_scales,
        "a_theta": a_t,
        "a_rho": a_r,
    }
