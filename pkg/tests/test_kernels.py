import numpy as np
import pytest

from shflow import _kernels
from shflow import model as M
from shflow.elbo import draw
from shflow.flow import ConditionalRefresh, FlowParams
from shflow.grad import elbo_and_gradient
from shflow.train import pack_gradient

from conftest import make_model, random_params, random_reference

needs_compiled = pytest.mark.skipif(not _kernels.HAVE_COMPILED, reason="extension not built")


@needs_compiled
@pytest.mark.parametrize("kind", ["gaussian", "linreg", "logreg"])
def test_backends_agree(kind, rng):
    m = make_model(kind, rng, N=50, p=3)
    cs = M.select_coreset(50, 8, 3)
    params = random_params(m, cs, rng, R=3, L=6)
    q = random_reference(m, rng)
    dr = draw(m, q, 10, 5, n_draws=4)
    e_py, g_py = elbo_and_gradient(m, params, cs, q, dr, "python")
    e_c, g_c = elbo_and_gradient(m, params, cs, q, dr, "compiled")
    assert e_c == pytest.approx(e_py, rel=1e-12, abs=1e-12)
    assert np.allclose(pack_gradient(g_c), pack_gradient(g_py), rtol=1e-10, atol=1e-10)


def test_callable_model_uses_python(rng):
    m = M.CallableModel(1, 1, lambda t: 0.0, lambda t: np.zeros(1),
                        lambda n, t: 0.0, lambda n, t: np.zeros(1))
    assert not _kernels.use_compiled(m)
    with pytest.raises(RuntimeError):
        _kernels.use_compiled(m, backend="compiled")


def test_conditional_forces_python(rng):
    m = make_model("gaussian", rng)
    cond = [ConditionalRefresh(np.zeros(m.dim), np.zeros(m.dim), np.eye(m.dim),
                               np.zeros((m.dim, m.dim)), np.eye(m.dim))]
    assert not _kernels.use_compiled(m, cond)


def test_unknown_backend(rng):
    with pytest.raises(ValueError):
        _kernels.use_compiled(make_model("gaussian", rng), backend="gpu")


def test_python_backend_forced(rng):
    assert not _kernels.use_compiled(make_model("gaussian", rng), backend="python")
