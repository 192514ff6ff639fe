import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from shflow.errors import InvalidParameterError
from shflow.metrics import (GaussianSummary, compute_metrics, energy_distance, gaussian_approx_kl,
                            gaussian_kl, imq_stein_kernel, ksd_imq, relative_errors,
                            sample_summary)

from conftest import central_difference


def kl_quadrature(m1, s1, m2, s2):
    f = lambda x: norm.pdf(x, m1, s1) * (norm.logpdf(x, m1, s1) - norm.logpdf(x, m2, s2))
    return quad(f, m1 - 40 * s1, m1 + 40 * s1, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


class TestGaussianKL:
    @pytest.mark.parametrize("m1,s1,m2,s2", [(0, 1, 0, 1), (1, 2, 0, 1), (-3, 0.5, 2, 3),
                                             (0.1, 1.1, 0.0, 0.9)])
    def test_matches_quadrature(self, m1, s1, m2, s2):
        kl = gaussian_kl(GaussianSummary([m1], [[s1 ** 2]]), GaussianSummary([m2], [[s2 ** 2]]))
        assert kl == pytest.approx(kl_quadrature(m1, s1, m2, s2), abs=1e-6)

    def test_scripted(self):
        kl = gaussian_kl(GaussianSummary([1.0], [[1.0]]), GaussianSummary([0.0], [[1.0]]))
        assert kl == pytest.approx(0.5, abs=1e-15)

    def test_identical_is_zero(self, rng):
        A = rng.normal(size=(3, 3))
        g = GaussianSummary(rng.normal(size=3), A @ A.T + np.eye(3))
        assert gaussian_kl(g, g) == pytest.approx(0.0, abs=1e-13)

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(InvalidParameterError):
            GaussianSummary([0, 0], [[1.0, 0.5], [0.0, 1.0]])

    def test_indefinite_rejected(self):
        with pytest.raises(InvalidParameterError):
            GaussianSummary([0, 0], [[1.0, 2.0], [2.0, 1.0]])

    def test_dict_round_trip(self, rng):
        g = GaussianSummary(rng.normal(size=2), np.eye(2) * 3)
        h = GaussianSummary.from_dict(g.to_dict())
        assert np.array_equal(g.mean, h.mean) and np.array_equal(g.covariance, h.covariance)


def test_relative_errors():
    truth = GaussianSummary([3.0, 4.0], np.eye(2))
    me, ce = relative_errors(GaussianSummary([3.0, 4.5], 2 * np.eye(2)), truth)
    assert me == pytest.approx(0.1) and ce == pytest.approx(1.0)


class TestEnergy:
    def test_identical_exactly_zero(self, rng):
        X = rng.normal(size=(50, 3))
        assert energy_distance(X, X.copy()) == 0.0

    def test_scripted(self):
        # 2*1 - 0 - 0
        assert energy_distance(np.array([[0.0]]), np.array([[1.0]])) == 2.0

    def test_separated_positive(self, rng):
        assert energy_distance(rng.normal(size=(100, 2)), rng.normal(3, 1, size=(100, 2))) > 1.0


class TestKSD:
    def test_kernel_matches_fd_construction(self, rng):
        X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        SX, SY = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        K = imq_stein_kernel(X, Y, SX, SY)
        k = lambda x, y: (1.0 + np.sum((x - y) ** 2)) ** -0.5
        for i in range(4):
            for j in range(5):
                gx = central_difference(lambda x: k(x, Y[j]), X[i])
                gy = central_difference(lambda y: k(X[i], y), Y[j])
                cross = sum(central_difference(
                    lambda y, a=a: central_difference(lambda x: k(x, y), X[i])[a], Y[j], h=1e-4)[a]
                    for a in range(3))
                ref = SX[i] @ SY[j] * k(X[i], Y[j]) + SX[i] @ gy + SY[j] @ gx + cross
                assert K[i, j] == pytest.approx(ref, abs=1e-6)

    def test_small_for_target_samples(self, rng):
        X = rng.normal(size=(2000, 2))
        good = ksd_imq(X, lambda x: -x)
        bad = ksd_imq(X + 1.0, lambda x: -x)
        assert good < 0.1 < bad

    def test_blocking_invariant(self, rng):
        X = rng.normal(size=(300, 2))
        assert ksd_imq(X, lambda x: -x, block=64) == pytest.approx(ksd_imq(X, lambda x: -x),
                                                                   rel=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(InvalidParameterError):
            ksd_imq(np.zeros((1, 2)), lambda x: -x)


class TestComputeMetrics:
    def test_all(self, rng):
        X = rng.normal(size=(500, 2))
        ref = GaussianSummary(np.ones(2), np.eye(2))
        out = compute_metrics(["kl", "mean_error", "cov_error", "energy", "ksd"], X, ref,
                              score=lambda x: -(x - 1.0))
        assert set(out) == {"kl", "mean_error", "cov_error", "energy", "ksd"}
        assert out["kl"] == pytest.approx(gaussian_approx_kl(X, ref))
        assert out["mean_error"] == pytest.approx(
            np.linalg.norm(X.mean(axis=0) - 1) / math.sqrt(2))

    def test_missing_reference(self, rng):
        with pytest.raises(InvalidParameterError):
            compute_metrics(["kl"], rng.normal(size=(5, 2)))

    def test_unknown_metric(self, rng):
        with pytest.raises(InvalidParameterError):
            compute_metrics(["mmd"], rng.normal(size=(5, 2)), GaussianSummary([0, 0], np.eye(2)))

    def test_sample_summary_unbiased(self):
        X = np.array([[0.0], [2.0]])
        s = sample_summary(X)
        assert s.mean[0] == 1.0 and s.covariance[0, 0] == 2.0
