"""Backend selection for the flow kernels.

The compiled core is used when it imported, the model is one of the
built-in kinds, and no conditional refreshment is active.  Setting
``SHFLOW_BACKEND=python`` forces the numpy fallback everywhere.
"""

import os

import numpy as np

from . import _pykernel

try:
    from . import _ckernel
except ImportError:  # extension not built
    _ckernel = None

HAVE_COMPILED = _ckernel is not None
DEFAULT_BACKEND = os.environ.get("SHFLOW_BACKEND", "auto")


def use_compiled(model, conditional=None, backend=None):
    backend = backend or DEFAULT_BACKEND
    if backend not in ("auto", "python", "compiled"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "python":
        return False
    ok = (HAVE_COMPILED and getattr(model, "kind", None) is not None
          and (conditional is None or all(c is None for c in conditional)))
    if backend == "compiled" and not ok:
        raise RuntimeError("compiled kernel unavailable for this model/flow")
    return ok


def _packed(model, idx):
    key = np.asarray(idx).tobytes()
    cache = getattr(model, "_kernel_cache", None)
    if cache is None or cache[0] != key:
        cache = (key, model.kernel_arrays(idx))
        model._kernel_cache = cache
    return cache[1]


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def run_forward(model, idx, w, eps, shifts, log_scales, L, theta, rho,
                record=False, conditional=None, backend=None):
    if use_compiled(model, conditional, backend):
        kind, X, y, c = _packed(model, idx)
        return _ckernel.forward(kind, X, y, _c(w), c, _c(eps), _c(shifts),
                                _c(log_scales), int(L), theta, rho, record)
    return _pykernel.forward(model, idx, w, eps, shifts, log_scales, L, theta, rho,
                             record=record, conditional=conditional)


def run_backward(model, idx, w, eps, shifts, log_scales, L, trace, a_theta, a_rho,
                 conditional=None, backend=None):
    if use_compiled(model, conditional, backend):
        kind, X, y, c = _packed(model, idx)
        return _ckernel.backward(kind, X, y, _c(w), c, _c(eps), _c(shifts),
                                 _c(log_scales), int(L), trace, a_theta, a_rho)
    return _pykernel.backward(model, idx, w, eps, shifts, log_scales, L, trace,
                              a_theta, a_rho, conditional=conditional)
