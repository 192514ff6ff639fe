# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled leapfrog flow kernels for the three built-in models.

Same contract as ``_pykernel.forward`` / ``_pykernel.backward`` but the model
is passed as packed arrays ``(kind, X, y, c)`` with the coreset rows already
selected, so no Python callbacks happen inside the loops.
"""

import numpy as np

from libc.math cimport exp, fabs, isfinite
from libc.stdlib cimport malloc, free

from .errors import NumericalDivergence

cdef double LIMIT = 1e10

cdef enum:
    GAUSS = 0
    LINREG = 1
    LOGREG = 2


cdef inline double _sigmoid(double a) nogil:
    cdef double e
    if a >= 0:
        e = exp(-a)
        return 1.0 / (1.0 + e)
    e = exp(a)
    return e / (1.0 + e)


cdef inline bint _bad(const double* a, int n) nogil:
    cdef int i
    for i in range(n):
        if not isfinite(a[i]) or fabs(a[i]) > LIMIT:
            return True
    return False


cdef void _grad(int kind, const double[:, ::1] X, const double[::1] y,
                const double[::1] w, double c, const double* th, double* g,
                int d) nogil:
    """g = grad log prior + sum_m w_m grad f_m at th."""
    cdef int M = X.shape[0]
    cdef int p = X.shape[1]
    cdef int i, j, m
    cdef double sw, acc, pred, r, e, a, res, wm
    if kind == GAUSS:
        sw = 0.0
        for m in range(M):
            sw += w[m]
        for i in range(d):
            acc = 0.0
            for m in range(M):
                acc += w[m] * X[m, i]
            g[i] = -th[i] + (acc - sw * th[i]) / c
    elif kind == LINREG:
        for i in range(d):
            g[i] = -th[i]
        e = exp(-th[d - 1])
        for m in range(M):
            pred = th[0]
            for j in range(p):
                pred += X[m, j] * th[j + 1]
            r = y[m] - pred
            wm = w[m] * r * e
            g[0] += wm
            for j in range(p):
                g[j + 1] += wm * X[m, j]
            g[d - 1] += w[m] * (-0.5 + 0.5 * r * r * e)
    else:
        for i in range(d):
            g[i] = -2.0 * th[i] / (1.0 + th[i] * th[i])
        for m in range(M):
            a = th[0]
            for j in range(p):
                a += X[m, j] * th[j + 1]
            res = w[m] * (y[m] - _sigmoid(a))
            g[0] += res
            for j in range(p):
                g[j + 1] += res * X[m, j]


cdef void _kick_adjoint(int kind, const double[:, ::1] X, const double[::1] y,
                        const double[::1] w, double c, const double* th,
                        const double* v, double* a_t, double* d_w, int d) nogil:
    """a_t += H(th) v and d_w[m] += v . grad f_m(th)."""
    cdef int M = X.shape[0]
    cdef int p = X.shape[1]
    cdef int i, j, m
    cdef double sw, dot, pred, r, e, zv, vs, coef, a, s, t2
    if kind == GAUSS:
        sw = 0.0
        for m in range(M):
            sw += w[m]
            dot = 0.0
            for i in range(d):
                dot += v[i] * (X[m, i] - th[i])
            d_w[m] += dot / c
        for i in range(d):
            a_t[i] += -v[i] - sw * v[i] / c
    elif kind == LINREG:
        for i in range(d):
            a_t[i] += -v[i]
        e = exp(-th[d - 1])
        vs = v[d - 1]
        for m in range(M):
            pred = th[0]
            zv = v[0]
            for j in range(p):
                pred += X[m, j] * th[j + 1]
                zv += X[m, j] * v[j + 1]
            r = y[m] - pred
            d_w[m] += r * e * zv + (-0.5 + 0.5 * r * r * e) * vs
            coef = w[m] * (-e * zv - r * e * vs)
            a_t[0] += coef
            for j in range(p):
                a_t[j + 1] += coef * X[m, j]
            a_t[d - 1] += w[m] * (-r * e * zv - 0.5 * r * r * e * vs)
    else:
        for i in range(d):
            t2 = th[i] * th[i]
            a_t[i] += -2.0 * (1.0 - t2) / ((1.0 + t2) * (1.0 + t2)) * v[i]
        for m in range(M):
            a = th[0]
            zv = v[0]
            for j in range(p):
                a += X[m, j] * th[j + 1]
                zv += X[m, j] * v[j + 1]
            s = _sigmoid(a)
            d_w[m] += (y[m] - s) * zv
            coef = -w[m] * s * (1.0 - s) * zv
            a_t[0] += coef
            for j in range(p):
                a_t[j + 1] += coef * X[m, j]


cdef long _forward_row(int kind, const double[:, ::1] X, const double[::1] y,
                       const double[::1] w, double c, const double[::1] eps,
                       const double[:, ::1] shifts, const double[:, ::1] log_scales,
                       int L, double* th, double* rho, double* g, double* rh,
                       bint record, double* tr_theta, double* tr_grad,
                       double* tr_rhohat, double* tr_rho_out, int d) nogil:
    """Run one sample through the flow; returns -1 or an encoded failure site."""
    cdef int R = shifts.shape[0]
    cdef int K = R * L
    cdef int r, l, k, i
    if K > 0:
        _grad(kind, X, y, w, c, th, g, d)
        if _bad(g, d):
            return 0
    for r in range(R):
        for l in range(L):
            k = r * L + l
            if record:
                for i in range(d):
                    tr_theta[k * d + i] = th[i]
                    tr_grad[k * d + i] = g[i]
            for i in range(d):
                rh[i] = rho[i] + 0.5 * eps[i] * g[i]
                th[i] += eps[i] * rh[i]
            _grad(kind, X, y, w, c, th, g, d)
            for i in range(d):
                rho[i] = rh[i] + 0.5 * eps[i] * g[i]
            if record:
                for i in range(d):
                    tr_rhohat[k * d + i] = rh[i]
            if _bad(th, d) or _bad(rho, d) or _bad(g, d):
                return (<long> r) * (L + 1) + l
        for i in range(d):
            rho[i] = exp(log_scales[r, i]) * (rho[i] - shifts[r, i])
        if record:
            for i in range(d):
                tr_rho_out[r * d + i] = rho[i]
        if _bad(rho, d):
            return (<long> r) * (L + 1) + L
    if record:
        for i in range(d):
            tr_theta[K * d + i] = th[i]
            tr_grad[K * d + i] = g[i] if K > 0 else 0.0
    return -1


def _raise_forward(long code, int L):
    block = code // (L + 1)
    step = code % (L + 1)
    if step == L:
        raise NumericalDivergence(f"flow state diverged at block {block}",
                                  block=block, step=None)
    raise NumericalDivergence(
        f"flow state diverged at block {block}, leapfrog step {step}",
        block=block, step=step)


def forward(int kind, const double[:, ::1] X, const double[::1] y,
            const double[::1] w, double c, const double[::1] eps,
            const double[:, ::1] shifts, const double[:, ::1] log_scales, int L,
            theta, rho, bint record=False):
    cdef double[:, ::1] th = np.array(theta, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] rv = np.array(rho, dtype=np.float64, order="C", copy=True)
    cdef int B = th.shape[0]
    cdef int d = th.shape[1]
    cdef int R = shifts.shape[0]
    cdef int K = R * L
    cdef double[:, :, ::1] tr_theta, tr_grad, tr_rhohat, tr_rho_out
    trace = None
    if record:
        trace = {
            "theta": np.empty((B, K + 1, d)),
            "grad": np.zeros((B, K + 1, d)),
            "rhohat": np.empty((B, max(K, 1), d)),
            "rho_out": np.empty((B, R, d)),
        }
        tr_theta = trace["theta"]
        tr_grad = trace["grad"]
        tr_rhohat = trace["rhohat"]
        tr_rho_out = trace["rho_out"]
    cdef double* g = <double*> malloc(2 * d * sizeof(double))
    cdef double* rh = g + d
    cdef long code = -1
    cdef int b
    try:
        with nogil:
            for b in range(B):
                if record:
                    code = _forward_row(kind, X, y, w, c, eps, shifts, log_scales, L,
                                        &th[b, 0], &rv[b, 0], g, rh, True,
                                        &tr_theta[b, 0, 0], &tr_grad[b, 0, 0],
                                        &tr_rhohat[b, 0, 0], &tr_rho_out[b, 0, 0], d)
                else:
                    code = _forward_row(kind, X, y, w, c, eps, shifts, log_scales, L,
                                        &th[b, 0], &rv[b, 0], g, rh, False,
                                        NULL, NULL, NULL, NULL, d)
                if code >= 0:
                    break
    finally:
        free(g)
    if code >= 0:
        _raise_forward(code, L)
    if record:
        trace["rhohat"] = trace["rhohat"][:, :K]
    return np.asarray(th), np.asarray(rv), trace


def backward(int kind, const double[:, ::1] X, const double[::1] y,
             const double[::1] w, double c, const double[::1] eps,
             const double[:, ::1] shifts, const double[:, ::1] log_scales, int L,
             trace, a_theta, a_rho):
    cdef const double[:, :, ::1] th = np.ascontiguousarray(trace["theta"])
    cdef const double[:, :, ::1] gr = np.ascontiguousarray(trace["grad"])
    rh_arr = np.ascontiguousarray(trace["rhohat"])
    if rh_arr.shape[1] == 0:
        rh_arr = np.zeros((th.shape[0], 1, th.shape[2]))
    cdef const double[:, :, ::1] rhat = rh_arr
    cdef const double[:, :, ::1] rout = np.ascontiguousarray(trace["rho_out"])
    cdef double[:, ::1] at = np.array(a_theta, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] ar = np.array(a_rho, dtype=np.float64, order="C", copy=True)
    cdef int B = at.shape[0]
    cdef int d = at.shape[1]
    cdef int R = shifts.shape[0]
    cdef int M = X.shape[0]
    d_w_arr = np.zeros(M)
    d_eps_arr = np.zeros(d)
    d_shift_arr = np.zeros((R, d))
    d_ls_arr = np.zeros((R, d))
    cdef double[::1] d_w = d_w_arr
    cdef double[::1] d_eps = d_eps_arr
    cdef double[:, ::1] d_shift = d_shift_arr
    cdef double[:, ::1] d_ls = d_ls_arr
    cdef double* v = <double*> malloc(d * sizeof(double))
    cdef int b, r, l, k, i, bad_block = -1
    cdef double lam
    try:
        with nogil:
            for b in range(B):
                for r in range(R - 1, -1, -1):
                    for i in range(d):
                        lam = exp(log_scales[r, i])
                        d_ls[r, i] += ar[b, i] * rout[b, r, i]
                        d_shift[r, i] -= lam * ar[b, i]
                        ar[b, i] = lam * ar[b, i]
                    for l in range(L - 1, -1, -1):
                        k = r * L + l
                        for i in range(d):
                            v[i] = 0.5 * eps[i] * ar[b, i]
                            d_eps[i] += 0.5 * ar[b, i] * gr[b, k + 1, i]
                        _kick_adjoint(kind, X, y, w, c, &th[b, k + 1, 0], v,
                                      &at[b, 0], &d_w[0], d)
                        for i in range(d):
                            d_eps[i] += at[b, i] * rhat[b, k, i]
                            ar[b, i] += eps[i] * at[b, i]
                            v[i] = 0.5 * eps[i] * ar[b, i]
                            d_eps[i] += 0.5 * ar[b, i] * gr[b, k, i]
                        _kick_adjoint(kind, X, y, w, c, &th[b, k, 0], v,
                                      &at[b, 0], &d_w[0], d)
                    if _bad(&at[b, 0], d) or _bad(&ar[b, 0], d):
                        bad_block = r
                        break
                if bad_block >= 0:
                    break
    finally:
        free(v)
    if bad_block >= 0:
        raise NumericalDivergence(f"adjoint diverged at block {bad_block}",
                                  block=bad_block, step=None)
    return {
        "d_weights": d_w_arr,
        "d_step_sizes": d_eps_arr,
        "d_shifts": d_shift_arr,
        "d_log_scales": d_ls_arr,
        "a_theta": np.asarray(at),
        "a_rho": np.asarray(ar),
    }
