import itertools
import math

import numpy as np
import pytest

from shflow import model as M
from shflow.elbo import (Draw, ReferenceDistribution, draw, elbo_step_trace, elbo_values,
                         estimate_elbo, exact_elbo, flow_log_density, log_target)
from shflow.errors import InvalidParameterError
from shflow.flow import FlowParams, PhaseState, forward
from shflow.theory import exact_gaussian_posteriors, gaussian_log_evidence

from conftest import make_model, random_params, random_reference


def exact_reference_setup(rng, N=30, d=2, c=3.0, L=0):
    X = rng.normal(size=(N, d))
    m = M.make_gaussian_location(M.Dataset(X), c)
    post = exact_gaussian_posteriors(X, c).exact
    q = ReferenceDistribution(post.mean, np.diag(post.covariance))
    cs = M.Coreset(np.arange(N), np.ones(N))
    return m, q, cs, FlowParams.initial(cs, d, 2, L, 0.05), gaussian_log_evidence(X, c)


class TestReference:
    def test_density_value(self):
        q = ReferenceDistribution([0.0], [1.0])
        assert q.log_density(np.zeros(1), np.zeros(1)) == pytest.approx(-math.log(2 * math.pi))

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(InvalidParameterError):
            ReferenceDistribution([0.0, 0.0], [1.0, 0.0])

    def test_sample_moments(self, rng):
        q = ReferenceDistribution([15.0, -2.0], [1e-4, 4.0])
        th, rh = q.sample(100000, rng)
        assert np.allclose(th.mean(axis=0), [15, -2], atol=0.02)
        assert np.allclose(th.var(axis=0), [1e-4, 4.0], rtol=0.02)
        assert np.allclose(rh.var(axis=0), 1.0, rtol=0.02)


def test_exact_flow_elbo_equals_log_evidence(rng):
    m, q, cs, params, log_z = exact_reference_setup(rng)
    dr = draw(m, q, 0, 7, n_draws=50, full_sum=True)
    elbo = elbo_values(m, params, cs, q, dr)[0]
    assert np.allclose(elbo, log_z, rtol=0, atol=1e-9)


def test_leapfrogs_from_exact_reference_do_not_exceed_evidence(rng):
    # discretised dynamics move q off the target, so the bound can only loosen
    m, q, cs, params, log_z = exact_reference_setup(rng, L=5)
    mean, se = exact_elbo(m, params, cs, q, 2000, 3)
    assert mean <= log_z + 3 * se


def test_elbo_below_evidence_for_mismatched_reference(rng):
    X = rng.normal(size=(40, 2))
    m = M.make_gaussian_location(M.Dataset(X), 2.0)
    cs = M.select_coreset(40, 5, 0)
    params = FlowParams.initial(cs, 2, 2, 3, 0.05)
    mean, se = exact_elbo(m, params, cs, ReferenceDistribution([1.0, -1.0], [0.5, 0.5]), 4000, 1)
    assert mean < gaussian_log_evidence(X, 2.0)


class TestMinibatchEstimator:
    def test_exhaustive_with_replacement(self, rng):
        m = make_model("logreg", rng, N=4)
        theta, rho = rng.normal(size=(1, m.dim)), rng.normal(size=(1, m.dim))
        full = log_target(m, theta, rho)[0]
        for S in (1, 2, 3):
            vals = [log_target(m, theta, rho, np.array([ix]))[0]
                    for ix in itertools.product(range(4), repeat=S)]
            assert np.mean(vals) == pytest.approx(full, rel=1e-12)

    def test_full_batch_matches_full_sum(self, rng):
        m = make_model("linreg", rng, N=6)
        theta, rho = rng.normal(size=(1, m.dim)), rng.normal(size=(1, m.dim))
        assert log_target(m, theta, rho, np.arange(6)[None])[0] == pytest.approx(
            log_target(m, theta, rho)[0], rel=1e-13)

    def test_without_replacement(self, rng):
        m = make_model("gaussian", rng, N=10)
        dr = draw(m, random_reference(m, rng), 10, 3, n_draws=2, replace=False)
        assert all(len(set(r)) == 10 for r in dr.indices.tolist())
        with pytest.raises(InvalidParameterError):
            draw(m, random_reference(m, rng), 11, 3, replace=False)


def test_estimate_is_deterministic_given_seed(rng):
    m = make_model("logreg", rng)
    cs = M.select_coreset(m.n_data, 5, 0)
    params = random_params(m, cs, rng)
    q = random_reference(m, rng)
    a = estimate_elbo(m, params, cs, q, 8, 11)
    b = estimate_elbo(m, params, cs, q, 8, 11)
    assert a.elbo_value == b.elbo_value
    assert a.elbo_value == pytest.approx(a.log_target_estimate - a.log_flow_density)


def test_flow_density_via_inverse(rng):
    m = make_model("linreg", rng)
    cs = M.select_coreset(m.n_data, 5, 0)
    params = random_params(m, cs, rng)
    q = random_reference(m, rng)
    th, rh = q.sample(3, rng)
    out = forward(m, params, cs, PhaseState(th, rh))
    dens = flow_log_density(m, params, cs, q, out.final_state)
    assert np.allclose(dens, q.log_density(th, rh) - params.log_jacobian(), atol=1e-9)


def test_step_trace_endpoints(rng):
    m = make_model("gaussian", rng)
    cs = M.select_coreset(m.n_data, 5, 0)
    params = random_params(m, cs, rng, R=2, L=2)
    q = random_reference(m, rng)
    kinds, vals = elbo_step_trace(m, params, cs, q, 20, 4)
    assert kinds.count("refresh") == 2 and vals.shape == (len(kinds), 20)
    dr = draw(m, q, 0, 4, n_draws=20, full_sum=True)
    assert np.allclose(vals[-1], elbo_values(m, params, cs, q, dr)[0], atol=1e-9)


def test_exact_elbo_needs_two_draws(rng):
    m, q, cs, params, _ = exact_reference_setup(rng)
    with pytest.raises(InvalidParameterError):
        exact_elbo(m, params, cs, q, 1, 0)
