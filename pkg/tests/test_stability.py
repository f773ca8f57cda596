import json
import math
from dataclasses import replace

import numpy as np
import pytest

from scorestab.data import ManifoldSpec
from scorestab.errors import ConfigurationError, ContractViolation
from scorestab.jsonio import dumps
from scorestab.process import ContinuousUniform, Schedule
from scorestab.scores import AnalyticGaussian, FeatureBasis, ScoreModel
from scorestab.stability import (
    LABEL,
    Estimate,
    check_ball_chernoff,
    check_harnack,
    estimate_score_stability,
    harnack_sides,
    harnack_test_function,
    verify_erm_identity,
    verify_generalisation_bound,
)
from scorestab.training import ConstantTrainer, EmpiricalTrainer, ErmTrainer

SCHED = Schedule(1.0, 2.0, 0.01)
W = ContinuousUniform(0.1, 1.0)
CIRCLE = ManifoldSpec.circle()


class FixedSampler:
    """Returns the same leading points on every call, so only the loss draws vary."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)

    def sample(self, n, rng):
        return self.points[np.arange(n) % len(self.points)]


def ones_family(rng, d):
    return lambda Z: np.ones(Z.shape[0])


def within(a: Estimate, b: Estimate, k=4.0):
    return abs(a.value - b.value) <= k * math.hypot(a.std_error, b.std_error)


class TestEstimate:
    def test_constant_algorithm_is_zero(self):
        algo = ConstantTrainer(AnalyticGaussian(np.zeros(2), 1.0, SCHED))
        r = estimate_score_stability(algo, CIRCLE, 8, 16, 64, SCHED, W, 0)
        assert r.eps_stab_sq == Estimate(0.0, 0.0)
        assert r.label == LABEL and r.n_datasets == 16

    def test_single_point_empirical_oracle(self):
        # with N = 1 both models are affine with equal slopes, so the integrand
        # is mu_t^2 ||x_1 - x_tilde||^2 / sigma_t^4 and ||x_1 - x_tilde||^2 is 0 or 4
        spec = ManifoldSpec.two_point(2.0)
        r = estimate_score_stability(EmpiricalTrainer(SCHED), spec, 1, 400, 256, SCHED, W, 1)
        t = np.linspace(W.lo, W.hi, 10_001)
        g = SCHED.mean_scale(t) ** 2 / SCHED.var(t) ** 2
        oracle = 2.0 * np.trapezoid(g, t) / (W.hi - W.lo)
        assert abs(r.eps_stab_sq.value - oracle) <= 4 * r.eps_stab_sq.std_error

    def test_identical_replacement_is_zero(self):
        r = estimate_score_stability(EmpiricalTrainer(SCHED), CIRCLE, 8, 8, 64, SCHED, W, 2, identical=True)
        assert r.eps_stab_sq == Estimate(0.0, 0.0)

    def test_symmetric_in_replaced_index(self):
        N = 4
        first = estimate_score_stability(EmpiricalTrainer(SCHED), CIRCLE, N, 200, 256, SCHED, W, 3, index=0)
        last = estimate_score_stability(EmpiricalTrainer(SCHED), CIRCLE, N, 200, 256, SCHED, W, 4, index=N - 1)
        assert within(first.eps_stab_sq, last.eps_stab_sq)

    def test_std_error_halves_with_four_times_n_mc(self):
        pts = np.random.default_rng(0).normal(size=(4, 2))
        algo = EmpiricalTrainer(SCHED)
        a = estimate_score_stability(algo, FixedSampler(pts), 3, 300, 256, SCHED, W, 5, index=1)
        b = estimate_score_stability(algo, FixedSampler(pts), 3, 300, 1024, SCHED, W, 6, index=1)
        assert a.eps_stab_sq.std_error / b.eps_stab_sq.std_error == pytest.approx(2.0, rel=0.2)

    def test_parallel_matches_serial(self):
        algo = EmpiricalTrainer(SCHED)
        a = estimate_score_stability(algo, CIRCLE, 6, 6, 64, SCHED, W, 7, jobs=1)
        b = estimate_score_stability(algo, CIRCLE, 6, 6, 64, SCHED, W, 7, jobs=2)
        assert dumps(a.to_dict()) == dumps(b.to_dict())
        assert a.replicates_csv() == b.replicates_csv()

    def test_bad_index(self):
        with pytest.raises(ConfigurationError):
            estimate_score_stability(EmpiricalTrainer(SCHED), CIRCLE, 4, 2, 64, SCHED, W, 0, index=4)

    def test_serialisation(self):
        r = estimate_score_stability(EmpiricalTrainer(SCHED), CIRCLE, 4, 3, 64, SCHED, W, 8)
        d = json.loads(dumps(r.to_dict()))
        assert d["config"]["N"] == 4 and d["config_hash"] == r.config_hash
        lines = r.replicates_csv().split("\r\n")
        assert lines[0] == "replicate,index,eps_sq,dsm_emp,dsm_pop,sm_emp,sm_pop,divergence_step"
        assert len(lines) == 5 and lines[-1] == ""


class TestGeneralisationBound:
    def test_constant_passes(self):
        algo = ConstantTrainer(AnalyticGaussian(np.zeros(2), 1.0, SCHED))
        r = estimate_score_stability(algo, CIRCLE, 16, 32, 256, SCHED, W, 0)
        assert verify_generalisation_bound(r).passed

    def test_erm_dictionary_passes(self):
        basis = FeatureBasis(CIRCLE.sample(6, np.random.default_rng(0)), 0.8)
        r = estimate_score_stability(ErmTrainer(basis, SCHED, W, 1024), CIRCLE, 32, 32, 512, SCHED, W, 1)
        v = verify_generalisation_bound(r)
        assert v.passed and v.dsm_slack > 0 and v.sm_slack > 0

    def test_inflated_gap_fails(self):
        r = estimate_score_stability(EmpiricalTrainer(SCHED), CIRCLE, 8, 64, 512, SCHED, W, 2)
        assert verify_generalisation_bound(r).passed
        bad = replace(r, gap_dsm_sqrt=Estimate(10 * r.gap_dsm_sqrt.value, r.gap_dsm_sqrt.std_error))
        assert not verify_generalisation_bound(bad).dsm_pass

    def test_mismatched_hash(self):
        r = estimate_score_stability(EmpiricalTrainer(SCHED), CIRCLE, 4, 3, 64, SCHED, W, 3)
        other = replace(r, config_hash="0" * 16)
        with pytest.raises(ContractViolation):
            verify_generalisation_bound(r, other)

    def test_negative_constant_rejected(self):
        with pytest.raises(ValueError):
            Estimate(0.0, -1.0)


class TestHarnack:
    def test_constant_function_never_violates(self):
        res = check_harnack(SCHED, 0.5, 2.0, 20, 0, n_draws=1000, family=ones_family)
        assert res.violations == 0 and res.min_ratio >= 1.0

    def test_equal_points_reduce_to_jensen(self):
        rng = np.random.default_rng(1)
        xi = rng.standard_normal((100_000, 2))
        for _ in range(20):
            phi = harnack_test_function(rng, 2)
            x = rng.normal(size=2)
            lhs, _, rhs, _ = harnack_sides(SCHED, 0.5, 2.0, phi, x, x, xi)
            assert lhs <= rhs * (1 + 1e-12)

    def test_random_trials(self):
        assert check_harnack(SCHED, 0.5, 2.0, 100, 2).violations == 0

    def test_p_must_exceed_one(self):
        with pytest.raises(ConfigurationError):
            check_harnack(SCHED, 0.5, 1.0, 1, 0)


class TestChernoff:
    def test_circle_within_bound(self):
        res = check_ball_chernoff(CIRCLE, 512, 0.5, 20, 0)
        assert res.passed and res.empirical <= res.bound

    def test_sample_size_precondition(self):
        with pytest.raises(ConfigurationError):
            check_ball_chernoff(CIRCLE, 16, 0.5, 2, 0)

    def test_radius_beyond_reach(self):
        with pytest.raises(ConfigurationError):
            check_ball_chernoff(CIRCLE, 512, 1.5, 2, 0)

    def test_needs_density_floor(self):
        with pytest.raises(ConfigurationError):
            check_ball_chernoff(ManifoldSpec.standard_gaussian(2), 512, 0.5, 2, 0)

    def test_one_point_balls(self):
        N = 16
        res = check_ball_chernoff(CIRCLE, N, 1e-9, 5, 1, enforce_preconditions=False)
        assert res.empirical == pytest.approx(math.sqrt(N), rel=1e-12)

    def test_constant_phi(self):
        const = lambda u: np.full(np.shape(u), 3.0)
        res = check_ball_chernoff(CIRCLE, 512, 0.5, 3, 2, phi=const)
        assert res.empirical == 3.0
        assert res.bound == pytest.approx(3.0 * (1 + math.exp(-512**2 * 0.5 / (2 * math.pi))))


class TestErmIdentity:
    def test_identical_datasets(self):
        res = verify_erm_identity(CIRCLE, 16, FeatureBasis([[0.0, 0.0]], 1.0), SCHED, W, 256, 8, 0, identical=True)
        assert res.lhs == Estimate(0.0, 0.0) and res.passed

    def test_single_feature(self):
        res = verify_erm_identity(CIRCLE, 16, FeatureBasis([[0.0, 0.0]], 1.0), SCHED, W, 512, 32, 1)
        assert res.passed and res.slack > 0 and res.lhs.value > 0

    def test_unrelated_control_is_recorded(self):
        class Far(ScoreModel):
            variant = "far"

            def _eval(self, X, t):
                return np.full_like(X, 50.0)

        res = verify_erm_identity(CIRCLE, 16, FeatureBasis([[0.0, 0.0]], 1.0), SCHED, W, 256, 8, 2, control=Far())
        assert res.lhs.value > 1000
        assert np.isfinite(res.slack)
