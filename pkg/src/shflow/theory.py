"""Closed-form Gaussian machinery for the theory checks.

* Gaussian location posteriors, evidence and optimal-simplex coreset KL.
* Convex-hull membership and the subsampling exactness curve.
* Tempered 1-D Hamiltonian dynamics in closed form and their KL to the target.
* KL bookkeeping for marginal / conditional momentum refreshments.

Every ``check_*`` function returns a JSON-ready record
``{"check_name", "status", "margin", "config", ...}``.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog, lsq_linear
from scipy.stats import binomtest

from .errors import InvalidParameterError
from .metrics import GaussianSummary, gaussian_kl


def _features(data):
    X = getattr(data, "features", data)
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


# --------------------------------------------------------------------------
# Gaussian location model
# --------------------------------------------------------------------------

@dataclass
class GaussianPosteriorPair:
    exact: GaussianSummary
    coreset: GaussianSummary


def _location_posterior(weighted_sum, total_weight, c, d):
    var = 1.0 / (1.0 + total_weight / c)
    return GaussianSummary(var * weighted_sum / c, var * np.eye(d))


def exact_gaussian_posteriors(data, c, coreset=None):
    """Exact and coreset posteriors of theta ~ N(0, I), x_n ~ N(theta, c I).

    ``coreset`` is a :class:`~shflow.model.Coreset` (or ``(indices, weights)``);
    when omitted the coreset posterior equals the exact one.
    """
    if not c > 0:
        raise InvalidParameterError(f"variance c must be positive, got {c}")
    X = _features(data)
    d = X.shape[1]
    N = X.shape[0]
    exact = _location_posterior(X.sum(axis=0) if N else np.zeros(d), N, c, d)
    if coreset is None:
        return GaussianPosteriorPair(exact, exact)
    idx, w = (coreset.indices, coreset.weights) if hasattr(coreset, "indices") else coreset
    idx = np.asarray(idx, dtype=int)
    w = np.asarray(w, dtype=float)
    core = _location_posterior(w @ X[idx] if len(idx) else np.zeros(d), w.sum(), c, d)
    return GaussianPosteriorPair(exact, core)


def gaussian_log_evidence(data, c):
    """log p(x_1..x_N) for the Gaussian location model (theta integrated out)."""
    X = _features(data)
    N, d = X.shape
    s = X.sum(axis=0)
    quad = (np.sum(X * X) - s @ s / (c + N)) / c
    return float(-0.5 * N * d * math.log(2 * math.pi)
                 - 0.5 * d * (N * math.log(c) + math.log1p(N / c)) - 0.5 * quad)


def _simplex_lsq(P, target):
    """argmin_{w in simplex} |P^T w - target|^2 via penalised BVLS and a KKT polish."""
    M, d = P.shape
    scale = max(1.0, np.abs(P).max(), np.abs(target).max())
    lam = 1e3 * scale
    A = np.vstack([P.T, lam * np.ones((1, M))])
    b = np.concatenate([target, [lam]])
    w = lsq_linear(A, b, bounds=(0.0, np.inf), method="bvls").x
    if w.sum() <= 0:
        w = np.full(M, 1.0 / M)
    w = w / w.sum()
    # exact equality-constrained solve on the active support
    S = np.flatnonzero(w > 1e-14)
    Ps = P[S]
    k = len(S)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = Ps @ Ps.T
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.concatenate([Ps @ target, [1.0]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
    if np.all(sol >= 0):
        cand = np.zeros(M)
        cand[S] = sol
        if np.sum((P.T @ cand - target) ** 2) <= np.sum((P.T @ w - target) ** 2):
            w = cand
    return w


def optimal_coreset_kl(data, c, coreset_indices):
    """KL of the coreset posterior at the simplex-optimal weights (scaled to sum N).

    Returns ``(kl, weights)``.
    """
    X = _features(data)
    N = X.shape[0]
    idx = np.asarray(coreset_indices, dtype=int)
    xbar = X.mean(axis=0)
    w = N * _simplex_lsq(X[idx], xbar)
    pair = exact_gaussian_posteriors(X, c, (idx, w))
    return gaussian_kl(pair.coreset, pair.exact), w


def hull_contains(points, target, tol=1e-7):
    """Whether ``target`` is a convex combination of the rows of ``points``.

    Solved as an LP feasibility problem; a reported feasible point is
    re-checked against ``tol`` (scaled by the data magnitude), which should
    not be tighter than the solver's feasibility tolerance (1e-7).
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    t = np.atleast_1d(np.asarray(target, dtype=float))
    if P.shape[1] != t.size:
        raise InvalidParameterError("points and target dimensions differ")
    A = np.vstack([P.T, np.ones((1, P.shape[0]))])
    b = np.concatenate([t, [1.0]])
    res = linprog(np.zeros(P.shape[0]), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if res.status != 0:
        return False
    scale = max(1.0, np.abs(P).max())
    return bool(np.abs(A @ res.x - b).max() <= tol * scale)


def wilson_interval(k, n, level=0.95):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def subsample_exactness_curve(d, N, M_list, n_trials, seed):
    """Monte-Carlo probability that the data mean lies in a random M-subsample's hull.

    Each trial draws fresh data ``X_n ~ N(0, I)`` and one uniform subsample per M
    (M values share the trial's data).  Returns a list of per-M records.
    """
    rng = np.random.default_rng(seed)
    M_list = [int(m) for m in M_list]
    hits = np.zeros(len(M_list), dtype=int)
    for _ in range(n_trials):
        X = rng.standard_normal((N, d))
        xbar = X.mean(axis=0)
        for j, M in enumerate(M_list):
            idx = rng.choice(N, size=M, replace=False)
            hits[j] += hull_contains(X[idx], xbar)
    out = []
    for M, k in zip(M_list, hits):
        lo, hi = wilson_interval(k, n_trials)
        out.append({"M": M, "hits": int(k), "trials": n_trials,
                    "probability": k / n_trials, "wilson_low": lo, "wilson_high": hi})
    return out


# --------------------------------------------------------------------------
# Tempered dynamics (1-D)
# --------------------------------------------------------------------------

@dataclass
class TemperedDynamicsSpec:
    """1-D tempered Hamiltonian dynamics on N(0, sigma^2) from N((mu0, 0), diag(1, beta^2)).

    ``g_of_t`` is g(t) = -int_0^t gamma; defaults to constant ``gamma``.
    """

    sigma: float
    mu0: float
    beta: float
    gamma: float = 0.0
    g_of_t: Optional[Callable[[float], float]] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.sigma > 0 or not self.beta > 0:
            raise InvalidParameterError("sigma and beta must be positive")

    def g(self, t):
        return self.g_of_t(t) if self.g_of_t is not None else -self.gamma * t


def _cosh_sinhc(s2):
    """(C, S) with C = cosh(sqrt(s2)), S = sinh(sqrt(s2))/sqrt(s2); analytic in s2."""
    s2 = np.asarray(s2, dtype=float)
    C = np.empty_like(s2)
    S = np.empty_like(s2)
    small = np.abs(s2) < 1e-6
    pos = (s2 > 0) & ~small
    neg = (s2 < 0) & ~small
    r = np.sqrt(s2[pos])
    C[pos], S[pos] = np.cosh(r), np.sinh(r) / r
    r = np.sqrt(-s2[neg])
    C[neg], S[neg] = np.cos(r), np.sin(r) / r
    z = s2[small]
    C[small] = 1 + z / 2 + z * z / 24
    S[small] = 1 + z / 6 + z * z / 120
    return C, S


def expm2(B):
    """Closed-form exponential of a stack of 2x2 matrices (..., 2, 2)."""
    B = np.asarray(B, dtype=float)
    tau = B[..., 0, 0] + B[..., 1, 1]
    det = B[..., 0, 0] * B[..., 1, 1] - B[..., 0, 1] * B[..., 1, 0]
    C, S = _cosh_sinhc(tau * tau / 4 - det)
    shifted = B - (tau / 2)[..., None, None] * np.eye(2)
    E = C[..., None, None] * np.eye(2) + S[..., None, None] * shifted
    return np.exp(tau / 2)[..., None, None] * E


def _tempered_kl(sigma, mu0, beta, t, g):
    """Vectorised KL(q_t || N(0, diag(sigma^2, 1))) for broadcastable inputs."""
    t, g, beta = np.broadcast_arrays(np.asarray(t, float), np.asarray(g, float),
                                     np.asarray(beta, float))
    B = np.zeros(t.shape + (2, 2))
    B[..., 0, 1] = t
    B[..., 1, 0] = -t / sigma ** 2
    B[..., 1, 1] = g
    E = expm2(B)
    m = E[..., :, 0] * mu0
    # Sigma(t) = E diag(1, beta^2) E^T; only its diagonal enters the trace
    v0 = E[..., 0, 0] ** 2 + beta ** 2 * E[..., 0, 1] ** 2
    v1 = E[..., 1, 0] ** 2 + beta ** 2 * E[..., 1, 1] ** 2
    logdet_t = 2.0 * g + 2.0 * np.log(beta)  # det e^B = e^{tr B}
    logdet_target = 2.0 * math.log(sigma)
    tr = (v0 + m[..., 0] ** 2) / sigma ** 2 + v1 + m[..., 1] ** 2
    return 0.5 * (logdet_target - logdet_t - 2.0 + tr)


def tempered_kl(spec, t):
    if t < 0:
        raise InvalidParameterError("time must be nonnegative")
    return float(_tempered_kl(spec.sigma, spec.mu0, spec.beta, t, spec.g(t)))


def tempered_lower_bound(mu, sigma):
    return math.log((1.0 + mu * mu) / (4.0 * sigma))


def default_grid(n=50):
    return (np.linspace(0.0, 10.0, n), np.geomspace(0.1, 10.0, n), np.linspace(-5.0, 5.0, n))


def tempered_kl_grid(mu, sigma, ts, betas, gammas):
    """KL over the full (t, beta, constant gamma) grid, shape (len(ts), len(betas), len(gammas))."""
    T = np.asarray(ts)[:, None, None]
    Bt = np.asarray(betas)[None, :, None]
    G = np.asarray(gammas)[None, None, :]
    return _tempered_kl(sigma, mu, Bt, T, -G * T)


def check_lower_bound(mu=3.0, sigma=0.5, n=50, tol=1e-9):
    ts, betas, gammas = default_grid(n)
    kl = tempered_kl_grid(mu, sigma, ts, betas, gammas)
    bound = tempered_lower_bound(mu, sigma)
    i = np.unravel_index(np.argmin(kl), kl.shape)
    margin = float(kl[i] - bound)
    one = int(np.argmin(np.abs(betas - 1.0)))
    slice_kl = tempered_kl_grid(mu, sigma, ts, [1.0], gammas)
    return {
        "check_name": "lower-bound",
        "status": "pass" if margin >= -tol else "fail",
        "margin": margin,
        "config": {"mu": mu, "sigma": sigma, "grid_points": int(kl.size)},
        "bound": bound,
        "min_kl": float(kl[i]),
        "argmin": {"t": float(ts[i[0]]), "beta": float(betas[i[1]]), "gamma": float(gammas[i[2]])},
        "violations": int(np.sum(kl < bound - tol)),
        "min_kl_nonnegative": bool(kl.min() >= -tol),
        "unit_beta_margin": float(slice_kl.min() - bound),
        "nearest_grid_beta_to_one": float(betas[one]),
    }


def check_constant_without_tempering(mu=3.0, sigma=0.5, beta=1.0, times=(0.1, 1.0, 3.0), tol=1e-8):
    spec = TemperedDynamicsSpec(sigma=sigma, mu0=mu, beta=beta, gamma=0.0)
    base = tempered_kl(spec, 0.0)
    dev = max(abs(tempered_kl(spec, t) - base) for t in times)
    return {"check_name": "no-tempering-constant", "status": "pass" if dev <= tol else "fail",
            "margin": float(tol - dev),
            "config": {"mu": mu, "sigma": sigma, "beta": beta, "times": list(times)},
            "kl": base}


# --------------------------------------------------------------------------
# Refreshment KL identities
# --------------------------------------------------------------------------

@dataclass
class RefreshIdentity:
    lhs: float       # KL after refreshing
    rhs: float       # predicted value from the decomposition
    drop: float      # KL removed by the refreshment


def _joint(summary_or_pair):
    if isinstance(summary_or_pair, GaussianSummary):
        return summary_or_pair
    mean, cov = summary_or_pair
    return GaussianSummary(mean, cov)


def _push_affine(joint, T, c):
    return GaussianSummary(T @ joint.mean + c, T @ joint.covariance @ T.T)


def _augmented_target(target, d):
    cov = np.zeros((2 * d, 2 * d))
    cov[:d, :d] = target.covariance
    cov[d:, d:] = np.eye(d)
    return GaussianSummary(np.concatenate([target.mean, np.zeros(d)]), cov)


def _block(g, sl):
    return GaussianSummary(g.mean[sl], g.covariance[sl, sl])


def refresh_kl_identity_check(joint, target, refresh=None, conditional=False):
    """Compare the KL after a momentum refreshment with its predicted value.

    ``joint`` is the Gaussian over (theta_t, rho_t) (2d-dimensional),
    ``target`` the Gaussian over theta (momentum target is N(0, I)).
    ``refresh`` is ``(A, b)`` for rho -> A rho + b, or ``(A, K, b)`` for
    rho -> A rho + K theta + b.  When omitted, the exact standardising map is
    built from ``joint`` (marginal, or conditional on theta if ``conditional``).

    Marginal: rhs = KL(joint) - KL(rho_t || N(0, I)).
    Conditional: rhs = KL(theta_t || theta).
    """
    joint = _joint(joint)
    d = joint.dim // 2
    th, rh = slice(0, d), slice(d, 2 * d)
    S = joint.covariance
    if refresh is None:
        if conditional:
            gain = np.linalg.solve(S[th, th], S[th, rh]).T
            schur = S[rh, rh] - gain @ S[th, rh]
        else:
            gain = np.zeros((d, d))
            schur = S[rh, rh]
        evals, evecs = np.linalg.eigh(0.5 * (schur + schur.T))
        if evals.min() <= 0:
            raise InvalidParameterError("momentum covariance is not positive definite")
        A = (evecs / np.sqrt(evals)) @ evecs.T
        K = -A @ gain
        b = -A @ (joint.mean[rh] - gain @ joint.mean[th])
    elif len(refresh) == 2:
        A, b = refresh
        K = np.zeros((d, d))
    else:
        A, K, b = refresh
    A = np.atleast_2d(np.asarray(A, float))
    K = np.atleast_2d(np.asarray(K, float))
    b = np.atleast_1d(np.asarray(b, float))
    T = np.eye(2 * d)
    T[rh, rh] = A
    T[rh, th] = K
    shift = np.concatenate([np.zeros(d), b])
    tgt = _augmented_target(target, d)
    lhs = gaussian_kl(_push_affine(joint, T, shift), tgt)
    if conditional:
        rhs = gaussian_kl(_block(joint, th), target)
        drop = gaussian_kl(joint, tgt) - lhs
    else:
        drop = gaussian_kl(_block(joint, rh), GaussianSummary(np.zeros(d), np.eye(d)))
        rhs = gaussian_kl(joint, tgt) - drop
    return RefreshIdentity(float(lhs), float(rhs), float(drop))


def check_refresh_identity(seed=0, d=2, tol=1e-10):
    """Marginal and conditional identities on a random correlated Gaussian joint."""
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((2 * d, 2 * d))
    joint = GaussianSummary(rng.standard_normal(2 * d), F @ F.T + 0.5 * np.eye(2 * d))
    G = rng.standard_normal((d, d))
    target = GaussianSummary(rng.standard_normal(d), G @ G.T + 0.5 * np.eye(d))
    marg = refresh_kl_identity_check(joint, target)
    cond = refresh_kl_identity_check(joint, target, conditional=True)
    err = max(abs(marg.lhs - marg.rhs), abs(cond.lhs - cond.rhs))
    return {"check_name": "refresh-identity", "status": "pass" if err <= tol else "fail",
            "margin": float(tol - err), "config": {"seed": seed, "d": d, "tol": tol},
            "marginal": marg.__dict__, "conditional": cond.__dict__}


def check_hull_curve(d=2, N=1024, M_list=(5, 10, 20, 40, 60), n_trials=2000, seed=0,
                     threshold=0.95, threshold_M=60):
    rows = subsample_exactness_curve(d, N, M_list, n_trials, seed)
    monotone = all(b["wilson_high"] >= a["wilson_low"] for a, b in zip(rows, rows[1:]))
    at = [r for r in rows if r["M"] == threshold_M]
    margin = (at[0]["probability"] - threshold) if at else float("nan")
    ok = monotone and (not at or margin >= 0)
    return {"check_name": "hull-curve", "status": "pass" if ok else "fail",
            "margin": float(margin),
            "config": {"d": d, "N": N, "M_list": list(M_list), "n_trials": n_trials,
                       "seed": seed},
            "monotone": monotone, "table": rows}


CHECKS = {
    "lower-bound": check_lower_bound,
    "no-tempering-constant": check_constant_without_tempering,
    "refresh-identity": check_refresh_identity,
    "hull-curve": check_hull_curve,
}
