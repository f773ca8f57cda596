import math

import numpy as np
import pytest

from scorestab.coupling import (
    MERGE,
    REFLECT,
    SYNC,
    CoupledProcess,
    CouplingConfig,
    FMetric,
    ReflectionNoise,
    coupled_step,
    coupled_step_batch,
    f_metric,
    f_metric_derivative,
    measure_contraction,
    oned_coupling,
    oned_diagnostic,
    reflection_matrix,
    seminorm,
    truncated_noise,
)
from scorestab.errors import ConfigurationError, ContractViolation

G_ANISO = np.array([[2.0, 0.3], [0.3, 0.5]])


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T / d + 0.2 * np.eye(d))


def root(S):
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.sqrt(vals)) @ vecs.T


def mean_within(samples, expect, k=4.0):
    se = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    assert np.all(np.abs(samples.mean(axis=0) - expect) <= k * se + 1e-12)


def cov_within(samples, expect_mean, expect_cov, k=4.0):
    dev = samples - expect_mean
    n, d = dev.shape
    for i in range(d):
        for j in range(d):
            prod = dev[:, i] * dev[:, j]
            se = prod.std(ddof=1) / math.sqrt(n)
            assert abs(prod.mean() - expect_cov[i, j]) <= k * se


class TestConfig:
    def test_rejects_asymmetric(self):
        with pytest.raises(ConfigurationError):
            CouplingConfig(np.array([[1.0, 0.5], [0.0, 1.0]]), 0.1, 1.0)

    def test_rejects_negative_eigenvalue(self):
        with pytest.raises(ConfigurationError):
            CouplingConfig(np.diag([1.0, -0.1]), 0.1, 1.0)

    def test_rejects_nonpositive_parameters(self):
        for kw in ({"eta": 0.0}, {"lambda_decay": -1.0}, {"switch_radius": 0.0}, {"m": 0.0}):
            args = {"G": np.eye(2), "eta": 0.1, "lambda_decay": 1.0, **kw}
            with pytest.raises(ConfigurationError):
                CouplingConfig(**args)

    def test_cached_matrices(self):
        cfg = CouplingConfig(G_ANISO, 0.1, 1.0)
        np.testing.assert_allclose(cfg.G_sqrt @ cfg.G_sqrt, G_ANISO, atol=1e-12)
        np.testing.assert_allclose(cfg.G_pinv @ G_ANISO, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(cfg.G_sqrt_pinv @ cfg.G_sqrt, np.eye(2), atol=1e-12)

    def test_rank_deficient_pinv(self):
        cfg = CouplingConfig(np.diag([3.0, 0.0]), 0.1, 1.0)
        np.testing.assert_allclose(cfg.G_pinv, np.diag([1 / 3, 0.0]))

    def test_paper_window(self):
        assert CouplingConfig.paper_window(np.eye(2), 0.16, 1.0).m == pytest.approx(0.2)


class TestSeminorm:
    def test_identity_is_euclidean(self):
        v = np.array([3.0, -4.0])
        assert seminorm(CouplingConfig(np.eye(2), 0.1, 1.0), v) == pytest.approx(5.0)

    def test_kernel_is_zero(self):
        cfg = CouplingConfig(np.diag([1.0, 0.0]), 0.1, 1.0)
        assert seminorm(cfg, np.array([0.0, 7.0])) == 0.0

    def test_diag_example(self):
        cfg = CouplingConfig(np.diag([4.0, 1.0]), 0.1, 1.0)
        assert seminorm(cfg, np.array([2.0, 0.0])) == pytest.approx(1.0)

    def test_rows(self):
        cfg = CouplingConfig(np.diag([4.0, 1.0]), 0.1, 1.0)
        np.testing.assert_allclose(seminorm(cfg, np.array([[2.0, 0.0], [0.0, 3.0]])), [1.0, 3.0])


class TestFMetric:
    FM = FMetric(1.0, 0.5, 1.0)

    def test_zero(self):
        assert f_metric(self.FM, 0.0) == 0.0

    def test_direct_value(self):
        assert f_metric(self.FM, 1.0) == pytest.approx(1 - math.exp(-1))

    def test_quadratic_tail(self):
        fm = FMetric(0.7, 0.5, 1.3)
        r = 1e6
        assert f_metric(fm, r) / r**2 == pytest.approx(math.exp(-0.7 * 1.3) / (2 * 1.3), rel=1e-6)

    def test_c1_at_r2(self):
        fm = FMetric(0.7, 0.5, 1.3)
        h = 1e-6
        left = (f_metric(fm, 1.3) - f_metric(fm, 1.3 - h)) / h
        right = (f_metric(fm, 1.3 + h) - f_metric(fm, 1.3)) / h
        assert left == pytest.approx(right, rel=1e-5)
        assert f_metric_derivative(fm, 1.3) == pytest.approx(left, rel=1e-5)

    def test_increasing_and_concave_before_r2(self):
        fm = FMetric(2.0, 0.5, 1.5)
        r = np.linspace(0, 1.5, 400)
        f = f_metric(fm, r)
        assert np.all(np.diff(f) > 0)
        assert np.all(np.diff(f, 2) <= 1e-15)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            FMetric(1.0, 2.0, 1.0)
        with pytest.raises(ValueError):
            f_metric(self.FM, -0.1)


class TestOneDimensional:
    def test_identity_in_lemma_regime(self):
        rng = np.random.default_rng(0)
        for k in range(10):
            t, s = rng.normal(size=2)
            eta = rng.uniform(0.01, 1.0)
            m_tilde = rng.uniform(5.0, 8.0) * math.sqrt(eta)
            assert eta <= 4 * m_tilde**2
            diag = oned_diagnostic(t, s, eta, m_tilde, math.inf, 100_000, k)
            assert abs(diag.mean_abs - diag.r) <= 4 * diag.std_err

    def test_identity_without_window(self):
        diag = oned_diagnostic(0.3, -0.1, 0.25, None, math.inf, 100_000, 1)
        assert abs(diag.mean_abs - diag.r) <= 4 * diag.std_err

    def test_narrow_window_is_biased(self):
        # with m_tilde = sqrt(eta)/2 the window rejects most reflections and the identity fails
        eta = 1.0
        diag = oned_diagnostic(0.0, 1.0, eta, math.sqrt(eta) / 2, math.inf, 200_000, 2)
        assert abs(diag.mean_abs - diag.r) > 10 * diag.std_err

    def test_marginals(self):
        rng = np.random.default_rng(3)
        n = 100_000
        z, u = rng.standard_normal(n), rng.random(n)
        tp, sp = oned_coupling(np.full(n, 0.2), np.full(n, 0.7), 0.3, None, math.inf, z, u)
        for v, centre in ((tp, 0.2), (sp, 0.7)):
            mean_within(v[:, None], centre)
            cov_within(v[:, None], centre, np.array([[0.3]]))

    def test_second_moment_constant_positive(self):
        for r in (0.05, 0.5, 2.0):
            diag = oned_diagnostic(0.0, r, 0.25, None, math.inf, 50_000, 4)
            assert diag.c0_hat > 0

    def test_outside_radius_is_synchronous(self):
        tp, sp = oned_coupling(np.array([0.0]), np.array([5.0]), 1.0, None, 1.0, np.array([0.3]), np.array([0.0]))
        assert sp[0] - tp[0] == pytest.approx(5.0)


class TestCoupledStep:
    def test_equal_states_stay_equal(self):
        cfg = CouplingConfig(G_ANISO, 0.2, 1.0)
        b = lambda X: -X
        for seed in range(5):
            x, y, branch = coupled_step([0.3, 0.1], [0.3, 0.1], b, b, root(G_ANISO + np.eye(2)), root(G_ANISO + np.eye(2)), cfg, seed)
            np.testing.assert_array_equal(x, y)
            assert branch in ("synchronous", "merge")

    def test_precondition(self):
        cfg = CouplingConfig(4 * np.eye(2), 0.2, 1.0)
        with pytest.raises(ContractViolation):
            coupled_step([0.0, 0.0], [1.0, 0.0], None, None, np.eye(2), np.eye(2), cfg, 0)

    def test_deterministic(self):
        cfg = CouplingConfig(G_ANISO, 0.2, 1.0)
        a = coupled_step([0.0, 0.0], [0.4, 0.1], None, None, root(G_ANISO), root(G_ANISO), cfg, 5)
        b = coupled_step([0.0, 0.0], [0.4, 0.1], None, None, root(G_ANISO), root(G_ANISO), cfg, 5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert a[2] == b[2]

    @pytest.mark.parametrize("state_dependent", [False, True])
    def test_marginal_law(self, state_dependent):
        rng = np.random.default_rng(7)
        eta = 0.2
        cfg = CouplingConfig(G_ANISO, eta, 1.0)
        extra = random_spd(rng, 2, 0.5)
        if state_dependent:
            sig = lambda X: np.stack([root(G_ANISO + extra * (1 + 0.5 * np.tanh(x[0]))) for x in X])
        else:
            sig = root(G_ANISO + extra)
        b = lambda X: -0.5 * X + 0.1 * np.sin(X)
        bt = lambda X: -0.5 * X + 0.3
        x, y = np.array([0.3, -0.2]), np.array([0.6, 0.4])
        R = 100_000
        out = coupled_step_batch(np.tile(x, (R, 1)), np.tile(y, (R, 1)), b, bt, sig, sig, cfg, np.random.default_rng(8))
        assert np.all(np.bincount(out.branch, minlength=3)[[REFLECT, MERGE]] > 0)
        # oracle: the uncoupled update simulated directly
        direct = np.random.default_rng(9).standard_normal((R, 2))
        for state, drift, got in ((x, b, out.x), (y, bt, out.y)):
            S = sig(state[None])[0] if callable(sig) else sig
            centre = (1 - eta) * state + eta * drift(state[None])[0]
            ref = centre + math.sqrt(eta) * direct @ S.T
            mean_within(got, centre)
            cov_within(got, centre, eta * S @ S.T)
            mean_within(ref, centre)

    @pytest.mark.parametrize("G", [G_ANISO, np.diag([1.5, 0.0])])
    def test_expected_distance_preserved(self, G):
        eta = 0.3
        cfg = CouplingConfig(G, eta, 1.0)
        sig = root(G + 0.4 * np.eye(2))
        b = lambda X: -0.2 * X
        x, y = np.array([0.0, 0.0]), np.array([0.5, 0.2])
        R = 100_000
        out = coupled_step_batch(np.tile(x, (R, 1)), np.tile(y, (R, 1)), b, b, sig, sig, cfg, np.random.default_rng(10))
        Rp = seminorm(cfg, out.x - out.y)
        assert abs(Rp.mean() - out.r_hat[0]) <= 4 * Rp.std(ddof=1) / math.sqrt(R)

    def test_perpendicular_components_cancel(self):
        G = np.array([[2.0, 0.3, 0.0], [0.3, 0.5, 0.1], [0.0, 0.1, 1.0]])
        cfg = CouplingConfig(G, 0.4, 1.0)
        R = 2000
        X = np.zeros((R, 3))
        Y = np.tile([0.5, 0.2, -0.3], (R, 1))
        out = coupled_step_batch(X, Y, None, None, cfg.G_sqrt, cfg.G_sqrt, cfg, np.random.default_rng(11))
        e = (Y[0] - X[0]) * (1 - 0.4)
        e = -e / seminorm(cfg, e)
        # G^+-orthogonal complement of e
        Ge = cfg.G_pinv @ e
        basis = np.linalg.svd(Ge[None, :])[2][1:]
        refl = out.branch == REFLECT
        assert refl.sum() > 100
        D = (out.x - out.y)[refl]
        np.testing.assert_allclose(D @ cfg.G_pinv @ basis.T, 0.0, atol=1e-10)

    def test_reflection_is_isometry(self):
        rng = np.random.default_rng(12)
        cfg = CouplingConfig(random_spd(rng, 3), 0.1, 1.0)
        e = rng.normal(size=3)
        e /= seminorm(cfg, e)
        M = reflection_matrix(cfg, e)
        np.testing.assert_allclose(M @ M.T, np.eye(3), atol=1e-12)
        Z = rng.standard_normal((100_000, 3))
        W = Z @ M.T
        cov_within(W, np.zeros(3), np.eye(3))
        n2 = np.einsum("ij,ij->i", W, W)
        assert abs(n2.mean() - 3) <= 4 * n2.std(ddof=1) / math.sqrt(n2.size)

    def test_switch_radius(self):
        cfg = CouplingConfig(np.eye(2), 0.1, 1.0, switch_radius=0.5)
        out = coupled_step_batch(np.zeros((50, 2)), np.tile([3.0, 0.0], (50, 1)), None, None, np.eye(2), np.eye(2), cfg, np.random.default_rng(0))
        assert np.all(out.branch == SYNC)

    def test_truncated_noise_clips(self):
        cfg = CouplingConfig(np.eye(3), 0.1, 1.0, trunc_parallel=0.5, trunc_perp=1.0)
        rng = np.random.default_rng(13)
        xi = 3 * rng.standard_normal((500, 3))
        v = np.tile([1.0, 0.0, 0.0], (500, 1))
        out = truncated_noise(xi, v, cfg)
        assert np.all(np.abs(out[:, 0]) <= 0.5 + 1e-12)
        assert np.all(np.linalg.norm(out[:, 1:], axis=1) <= 1.0 + 1e-12)
        small = 0.1 * xi / np.linalg.norm(xi, axis=1, keepdims=True)
        np.testing.assert_allclose(truncated_noise(small, v, cfg), small)


class TestContraction:
    FM = FMetric(1.0, 0.5, 2.0)

    def test_pure_decay(self):
        eta, lam = 0.1, 1.0
        inst = CoupledProcess.pure_decay(0.5 * np.eye(2), eta, lam, [1.0, 0.0], [-1.0, 0.0])
        curve = measure_contraction(inst, self.FM, 80, 20_000, 1)
        assert curve.factor <= 1 - eta * lam / 8
        d = np.diff(curve.mean_f)
        live = curve.mean_f[1:] > 10 * curve.std_err[1:]
        assert np.all(d[3:][live[3:]] < 0)
        assert np.all(d[3:] <= 3 * curve.std_err[4:])

    def test_mismatched_drift_plateau(self):
        G = 0.5 * np.eye(2)
        cfg = CouplingConfig(G, 0.1, 1.0)
        inst = CoupledProcess(cfg, np.zeros(2), np.zeros(2), None, lambda X: np.tile([0.5, 0.0], (X.shape[0], 1)))
        curve = measure_contraction(inst, self.FM, 150, 5000, 2)
        assert curve.floor > 3 * curve.floor_se

    def test_identical_start_is_zero(self):
        inst = CoupledProcess.pure_decay(np.eye(2), 0.1, 1.0, [0.4, 0.4], [0.4, 0.4])
        curve = measure_contraction(inst, self.FM, 20, 100, 3)
        assert np.all(curve.mean_f == 0.0)

    def test_csv(self):
        inst = CoupledProcess.pure_decay(np.eye(2), 0.1, 1.0, [1.0, 0.0], [0.0, 0.0])
        text = measure_contraction(inst, self.FM, 5, 50, 4).to_csv()
        lines = text.split("\r\n")
        assert lines[0] == "step,mean_f,std_err,branch_counts_sync,branch_counts_reflect,branch_counts_merge"
        assert len(lines) == 8 and lines[-1] == ""
        assert sum(int(c) for c in lines[2].split(",")[3:]) == 50


class TestReflectionNoise:
    class Mom:
        def __init__(self, mean, cov):
            self.mean, self.cov = mean, cov

    def test_marginals_match_gaussian_step(self):
        rng = np.random.default_rng(14)
        n, eta, lam = 2, 0.1, 0.5
        Sa, Sb = random_spd(rng, n), random_spd(rng, n)
        ma, mb = rng.normal(size=n), rng.normal(size=n)
        tha, thb = np.array([0.2, -0.1]), np.array([0.5, 0.3])
        R = 40_000
        A, B = np.zeros((R, n)), np.zeros((R, n))
        rn = ReflectionNoise(n)
        for i in range(R):
            zeta = rng.standard_normal(n)
            extra = rng.standard_normal(n + 1)
            A[i], B[i] = rn.step([tha, thb], [self.Mom(ma, Sa), self.Mom(mb, Sb)], eta, lam, zeta, extra)
        for th, m, S, got in ((tha, ma, Sa, A), (thb, mb, Sb, B)):
            centre = (1 - eta * lam) * th - eta * m
            mean_within(got, centre)
            cov_within(got, centre, eta**2 * S)
        assert rn.counts["merge"] > 0 and rn.counts["reflection"] > 0

    def test_zero_covariance_is_synchronous(self):
        rn = ReflectionNoise(2)
        mom = self.Mom(np.zeros(2), np.zeros((2, 2)))
        a, b = rn.step([np.ones(2), np.zeros(2)], [mom, mom], 0.1, 1.0, np.ones(2), np.ones(3))
        np.testing.assert_allclose(a - b, 0.9 * np.ones(2))
        assert rn.counts["synchronous"] == 1
