import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.stats import multivariate_normal

from shflow import theory as T
from shflow.errors import InvalidParameterError
from shflow.metrics import GaussianSummary, gaussian_kl
from shflow.model import Coreset


class TestGaussianPosteriors:
    def test_evidence_matches_joint_density(self, rng):
        N, d, c = 7, 2, 3.0
        X = rng.normal(size=(N, d))
        # per coordinate the data vector is N(0, c I + 1 1^T)
        cov = c * np.eye(N) + np.ones((N, N))
        ref = sum(multivariate_normal(np.zeros(N), cov).logpdf(X[:, j]) for j in range(d))
        assert T.gaussian_log_evidence(X, c) == pytest.approx(ref, rel=1e-12)

    def test_large_scale_evidence_finite(self, rng):
        X = rng.normal(size=(10000, 10))
        assert np.isfinite(T.gaussian_log_evidence(X, 100.0))

    def test_full_coreset_gives_zero_kl(self, rng):
        X = rng.normal(size=(20, 3))
        pair = T.exact_gaussian_posteriors(X, 2.0, Coreset(np.arange(20), np.ones(20)))
        assert gaussian_kl(pair.coreset, pair.exact) == pytest.approx(0.0, abs=1e-14)

    def test_scripted_example(self):
        X = np.array([[-1.0], [1.0], [3.0]])
        kl, w = T.optimal_coreset_kl(X, 1.0, [0, 2])
        # mean 1 = (w0 * -1 + w2 * 3) / 3 with w0 + w2 = 3
        assert np.allclose(w, [1.5, 1.5]) and kl == pytest.approx(0.0, abs=1e-12)

    def test_unreachable_mean(self):
        X = np.array([[0.0], [1.0], [5.0]])
        kl, w = T.optimal_coreset_kl(X, 1.0, [0, 1])
        assert kl > 0 and w.sum() == pytest.approx(3.0)
        assert np.allclose(w, [0.0, 3.0], atol=1e-12)

    def test_bad_variance(self):
        with pytest.raises(InvalidParameterError):
            T.exact_gaussian_posteriors(np.zeros((2, 1)), 0.0)


class TestHull:
    def test_square(self):
        sq = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
        assert T.hull_contains(sq, [0.5, 0.5])
        assert T.hull_contains(sq, [1.0, 1.0])
        assert not T.hull_contains(sq, [1.1, 0.5])

    def test_agrees_with_delaunay(self):
        from scipy.spatial import Delaunay
        rng = np.random.default_rng(0)
        for _ in range(300):
            d = int(rng.integers(2, 4))
            P = rng.normal(size=(int(rng.integers(d + 1, 12)), d))
            t = 0.5 * rng.normal(size=d)
            assert T.hull_contains(P, t) == (Delaunay(P).find_simplex(t) >= 0)

    def test_simplex_fit_on_badly_scaled_instance(self):
        # penalised least squares with a large multiplier; plain NNLS mis-solves it
        rng = np.random.default_rng(7)
        for _ in range(31):
            d, N = int(rng.integers(1, 4)), int(rng.integers(10, 60))
            X = rng.normal(size=(N, d))
            idx = rng.choice(N, size=int(rng.integers(d + 1, min(N, 4 * d + 8))), replace=False)
        assert T.hull_contains(X[idx], X.mean(axis=0))
        kl, w = T.optimal_coreset_kl(X, 1.0, idx)
        assert kl < 1e-12 and np.allclose(w @ X[idx] / N, X.mean(axis=0), atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidParameterError):
            T.hull_contains(np.zeros((3, 2)), np.zeros(3))

    @given(st.integers(1, 3), st.integers(0, 10 ** 6))
    @settings(max_examples=60, deadline=None)
    def test_hull_implies_exact_coreset(self, d, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(30, d))
        idx = rng.choice(30, size=rng.integers(d + 1, 12), replace=False)
        if T.hull_contains(X[idx], X.mean(axis=0)):
            assert T.optimal_coreset_kl(X, 1.0, idx)[0] < 1e-8

    def test_wilson_interval(self):
        lo, hi = T.wilson_interval(95, 100)
        z = 1.959963984540054
        p, n = 0.95, 100
        centre = (p + z * z / (2 * n)) / (1 + z * z / n)
        half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
        assert lo == pytest.approx(centre - half, abs=1e-9)
        assert hi == pytest.approx(centre + half, abs=1e-9)

    def test_curve_small(self):
        rows = T.subsample_exactness_curve(2, 64, [3, 30], 100, 0)
        assert rows[0]["probability"] <= rows[1]["probability"]
        assert all(r["wilson_low"] <= r["probability"] <= r["wilson_high"] for r in rows)


class TestTemperedDynamics:
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=100, deadline=None)
    def test_expm2_matches_scipy(self, a, b, c, d):
        B = np.array([[a, b], [c, d]])
        assert np.allclose(T.expm2(B), expm(B), rtol=1e-9, atol=1e-9)

    def test_expm2_near_degenerate(self):
        for eps in (1e-3, 1e-7, 0.0, -1e-7):
            B = np.array([[0.0, 1.0], [eps, 0.0]])
            assert np.allclose(T.expm2(B), expm(B), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("mu,sigma,beta,gamma,t", [
        (3.0, 0.5, 1.0, 0.0, 2.0), (3.0, 0.5, 8.53, 1.207, 3.448), (1.0, 1.0, 0.3, -0.7, 1.5),
        (0.0, 2.0, 2.0, 2.0, 4.0)])
    def test_kl_matches_moment_ode(self, mu, sigma, beta, gamma, t):
        def rhs(_, y):
            m, S = y[:2], y[2:].reshape(2, 2)
            A = np.array([[0.0, 1.0], [-1 / sigma ** 2, -gamma]])
            return np.concatenate([A @ m, (A @ S + S @ A.T).ravel()])

        y0 = np.concatenate([[mu, 0.0], np.diag([1.0, beta ** 2]).ravel()])
        sol = solve_ivp(rhs, (0, t), y0, rtol=1e-11, atol=1e-12).y[:, -1]
        q = GaussianSummary(sol[:2], sol[2:].reshape(2, 2))
        ref = gaussian_kl(q, GaussianSummary(np.zeros(2), np.diag([sigma ** 2, 1.0])))
        spec = T.TemperedDynamicsSpec(sigma, mu, beta, gamma)
        assert T.tempered_kl(spec, t) == pytest.approx(ref, rel=1e-7)

    def test_time_zero(self):
        spec = T.TemperedDynamicsSpec(0.5, 3.0, 1.0)
        ref = gaussian_kl(GaussianSummary([3.0, 0.0], np.eye(2)),
                          GaussianSummary([0.0, 0.0], np.diag([0.25, 1.0])))
        assert T.tempered_kl(spec, 0.0) == pytest.approx(ref, rel=1e-12)

    def test_no_tempering_constant(self):
        assert T.check_constant_without_tempering()["status"] == "pass"

    @pytest.mark.parametrize("mu,sigma", [(1.0, 1.0), (0.0, 2.0)])
    def test_bound_holds(self, mu, sigma):
        rec = T.check_lower_bound(mu, sigma)
        assert rec["status"] == "pass" and rec["violations"] == 0

    def test_unit_beta_slice_holds_where_full_grid_fails(self):
        rec = T.check_lower_bound(3.0, 0.5)
        assert rec["unit_beta_margin"] > 0
        assert rec["status"] == "fail" and rec["violations"] > 0

    def test_bound_formula(self):
        assert T.tempered_lower_bound(3.0, 0.5) == pytest.approx(math.log(5.0))

    def test_negative_time(self):
        with pytest.raises(InvalidParameterError):
            T.tempered_kl(T.TemperedDynamicsSpec(1.0, 0.0, 1.0), -1.0)


class TestRefreshIdentity:
    def test_check_passes(self):
        rec = T.check_refresh_identity()
        assert rec["status"] == "pass" and rec["margin"] > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_marginal_and_conditional(self, seed):
        rng = np.random.default_rng(seed)
        F = rng.normal(size=(4, 4))
        joint = GaussianSummary(rng.normal(size=4), F @ F.T + 0.3 * np.eye(4))
        target = GaussianSummary(rng.normal(size=2), np.diag(rng.uniform(0.5, 2, 2)))
        m = T.refresh_kl_identity_check(joint, target)
        c = T.refresh_kl_identity_check(joint, target, conditional=True)
        assert abs(m.lhs - m.rhs) < 1e-10 and abs(c.lhs - c.rhs) < 1e-10
        assert c.lhs <= m.lhs + 1e-12

    def test_scripted_drop(self):
        joint = GaussianSummary(np.array([0.0, 2.0]), np.diag([1.0, 4.0]))
        r = T.refresh_kl_identity_check(joint, GaussianSummary([0.0], [[1.0]]))
        # KL(N(2, 4) || N(0, 1)) = 0.5 (4 + 4 - 1 - log 4)
        assert r.drop == pytest.approx(0.5 * (7 - math.log(4)), abs=1e-12)
        assert r.lhs == pytest.approx(0.0, abs=1e-12)

    def test_explicit_suboptimal_map(self):
        joint = GaussianSummary(np.array([0.0, 2.0]), np.diag([1.0, 4.0]))
        r = T.refresh_kl_identity_check(joint, GaussianSummary([0.0], [[1.0]]), refresh=([[1.0]], [0.0]))
        assert r.lhs > r.rhs


def test_check_registry_records():
    for name in ("no-tempering-constant", "refresh-identity"):
        rec = T.CHECKS[name]()
        assert set(rec) >= {"check_name", "status", "margin", "config"}
