import numpy as np
import pytest

from shflow import model as M
from shflow._kernels import HAVE_COMPILED
from shflow.elbo import ReferenceDistribution
from shflow.flow import FlowParams

BACKENDS = ["python"] + (["compiled"] if HAVE_COMPILED else [])


def make_model(kind, rng, N=40, p=2, c=2.0):
    if kind == "gaussian":
        return M.make_gaussian_location(M.Dataset(rng.normal(size=(N, p + 1))), c)
    X = rng.normal(size=(N, p))
    if kind == "linreg":
        return M.make_linreg(M.Dataset(X, X.sum(axis=1) + rng.normal(size=N)))
    y = (rng.random(N) < 0.5).astype(float)
    return M.make_logreg(M.Dataset(X, y))


def random_params(model, coreset, rng, R=2, L=3, scale=0.2):
    d = model.dim
    return FlowParams(np.log(coreset.weights) + scale * rng.normal(size=coreset.size),
                      np.log(rng.uniform(0.01, 0.08, d)),
                      scale * rng.normal(size=(R, d)), scale * rng.normal(size=(R, d)), L)


def random_reference(model, rng):
    return ReferenceDistribution(0.3 * rng.normal(size=model.dim), rng.uniform(0.2, 1.0, model.dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
