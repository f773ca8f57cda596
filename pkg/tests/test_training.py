import math

import numpy as np
import pytest

from scorestab.data import ManifoldSpec, generate
from scorestab.errors import ConfigurationError, ContractViolation, DivergedRunError, UnsupportedOperationError
from scorestab.losses import draw_paired
from scorestab.process import ContinuousUniform, Schedule
from scorestab.scores import Dataset, Dictionary, EmpiricalMixture, FeatureBasis, Mlp
from scorestab.seeding import stream
from scorestab.training import (
    CoupledRunResult,
    ConstantTrainer,
    EmpiricalTrainer,
    ErmTrainer,
    GaussianApprox,
    NoiseDraws,
    PathwiseSgd,
    SgdTrainer,
    StepSizes,
    TrainConfig,
    clip,
    clipped_moments,
    coupled_train,
    clip_rows,
    erm_dictionary,
    fisher_yates_prefix,
    gradient_estimate,
    project_group_l1,
    sgd_gaussian_run,
    sgd_run,
    write_trace_csv,
)
from scorestab.training import _per_resample_grads

SCHED = Schedule(1.0, 2.0, 0.01)
TAU = ContinuousUniform(0.05, 2.0)


def config(**kw):
    base = dict(step_sizes=StepSizes(0.1), weight_decay=0.5, clip=5.0, batch_size=4, resamples=2, num_steps=20)
    base.update(kw)
    return TrainConfig(**base)


def draws(rng, nb, P, d, lo=0.05, hi=2.0):
    return NoiseDraws(rng.uniform(lo, hi, (nb, P)), rng.standard_normal((nb, P, d)))


def minibatch_loss(model, batch, noise):
    nb, P = noise.t.shape
    total = 0.0
    for i in range(nb):
        for j in range(P):
            t = noise.t[i, j]
            mu, s2 = math.exp(-t), -math.expm1(-2 * t)
            x = mu * batch[i] + math.sqrt(s2) * noise.xi[i, j]
            s = model._eval(x[None], np.array([t]))[0]
            total += float(np.sum((s - (mu * batch[i] - x) / s2) ** 2))
    return total / (nb * P)


class TestConfig:
    def test_step_size_decay(self):
        s = StepSizes(0.5, "decay")
        assert s(0) == 0.5 and s(3) == 0.125

    def test_eta_lambda(self):
        with pytest.raises(ConfigurationError):
            config(step_sizes=StepSizes(2.0), weight_decay=0.5)

    @pytest.mark.parametrize("kw", [{"weight_decay": 0.0}, {"clip": -1.0}, {"batch_size": 0}, {"resamples": 0}, {"num_steps": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            config(**kw)

    def test_batch_exceeds_dataset(self):
        ds = Dataset(np.zeros((3, 2)))
        m = Mlp.create(2, [4], SCHED, 0)
        with pytest.raises(ConfigurationError):
            sgd_run(m, ds, config(batch_size=4), SCHED, TAU, 0)

    def test_gaussian_ceiling(self):
        ds = generate(ManifoldSpec.circle(), 8, 0)
        m = Mlp.create(2, [32], SCHED, 0)
        with pytest.raises(ConfigurationError):
            sgd_gaussian_run(m, ds, config(noise_mode=GaussianApprox()), SCHED, TAU, 0)


class TestClip:
    def test_half_norm_unchanged(self):
        v = np.array([0.3, 0.4])
        np.testing.assert_array_equal(clip(v, 1.0), v)

    def test_double_norm_halved(self):
        v = np.array([1.2, 1.6])
        np.testing.assert_allclose(clip(v, 1.0), v / 2)

    def test_zero(self):
        np.testing.assert_array_equal(clip(np.zeros(3), 1.0), np.zeros(3))

    def test_lipschitz_and_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            C = rng.uniform(0.1, 3.0)
            u, v = rng.normal(scale=2.0, size=(2, 5))
            assert np.linalg.norm(clip(u, C) - clip(v, C)) <= 2 * np.linalg.norm(u - v) + 1e-12
            assert np.linalg.norm(clip(v, C)) <= min(np.linalg.norm(v), C) * (1 + 1e-12)


class TestFisherYates:
    def test_without_replacement(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            idx = fisher_yates_prefix(rng, 10, 6)
            assert len(set(idx.tolist())) == 6 and idx.min() >= 0 and idx.max() < 10

    def test_uniform_inclusion(self):
        rng = np.random.default_rng(2)
        counts = np.zeros(8)
        n = 20_000
        for _ in range(n):
            counts[fisher_yates_prefix(rng, 8, 3)] += 1
        p = 3 / 8
        se = math.sqrt(p * (1 - p) / n)
        np.testing.assert_array_less(np.abs(counts / n - p), 4 * se)


class TestGradientEstimate:
    def test_interpolating_model_has_zero_gradient(self):
        ds = Dataset([[0.4, -0.2]])
        emp = EmpiricalMixture(ds, SCHED)
        basis = FeatureBasis([[0.0, 0.0]], 1.0, refs=[emp])
        model = Dictionary(basis, [0.0, 0.0, 1.0], SCHED)
        noise = draws(np.random.default_rng(3), 1, 3, 2)
        g = gradient_estimate(model, ds.points, config(batch_size=1, resamples=3), SCHED, TAU, noise)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_dictionary_finite_differences(self):
        rng = np.random.default_rng(4)
        basis = FeatureBasis(rng.normal(size=(3, 2)), 0.8)
        model = Dictionary(basis, rng.normal(size=6), SCHED)
        batch = rng.normal(size=(4, 2))
        noise = draws(rng, 4, 2, 2, 0.2, 1.5)
        g = gradient_estimate(model, batch, config(), SCHED, TAU, noise)
        h = 1e-5
        fd = np.zeros_like(g)
        for p in range(g.size):
            e = np.zeros_like(g)
            e[p] = h
            fd[p] = (minibatch_loss(model.with_params(model.params + e), batch, noise) - minibatch_loss(model.with_params(model.params - e), batch, noise)) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-6

    def test_duplicated_resamples(self):
        rng = np.random.default_rng(5)
        model = Mlp.create(2, [6], SCHED, 1)
        batch = rng.normal(size=(4, 2))
        noise = draws(rng, 4, 2, 2)
        doubled = NoiseDraws(np.concatenate([noise.t, noise.t], axis=1), np.concatenate([noise.xi, noise.xi], axis=1))
        a = gradient_estimate(model, batch, config(), SCHED, TAU, noise)
        b = gradient_estimate(model, batch, config(resamples=4), SCHED, TAU, doubled)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)

    def test_noise_mismatch(self):
        model = Mlp.create(2, [4], SCHED, 0)
        noise = draws(np.random.default_rng(6), 3, 2, 2)
        with pytest.raises(ContractViolation):
            gradient_estimate(model, np.zeros((4, 2)), config(), SCHED, TAU, noise)

    def test_nonparametric_rejected(self):
        ds = Dataset([[0.0, 0.0]])
        with pytest.raises(UnsupportedOperationError):
            gradient_estimate(EmpiricalMixture(ds, SCHED), ds.points, config(batch_size=1), SCHED, TAU, draws(np.random.default_rng(0), 1, 2, 2))


class TestSgdRun:
    def test_zero_gradient_pure_decay(self):
        # bumps centred far from every noised point evaluate to exactly zero
        basis = FeatureBasis([[1e3, 1e3]], 0.5)
        theta0 = np.array([1.0, -2.0])
        model = Dictionary(basis, theta0, SCHED)
        ds = generate(ManifoldSpec.circle(), 8, 0)
        cfg = config(step_sizes=StepSizes(0.3, "decay"), num_steps=10)
        out = sgd_run(model, ds, cfg, SCHED, TAU, 1)
        factor = np.prod([1 - cfg.step_sizes(k) * cfg.weight_decay for k in range(10)])
        np.testing.assert_allclose(out.params, factor * theta0, rtol=1e-14)

    def test_norm_bound_every_step(self):
        rng = np.random.default_rng(7)
        ds = generate(ManifoldSpec.circle(), 16, 1)
        for run in range(50):
            lam = rng.uniform(0.01, 1.0)
            C = rng.uniform(0.1, 10.0)
            eta = rng.uniform(0.05, 0.99) / lam
            cfg = config(step_sizes=StepSizes(min(eta, 0.99 / lam)), weight_decay=lam, clip=C, num_steps=15)
            model = Mlp.create(2, [8], SCHED, run)
            rows = []
            sgd_run(model, ds, cfg, SCHED, TAU, run, trace=rows)
            bound = max(C * math.e / lam, float(np.linalg.norm(model.params)))
            assert all(r[4] <= bound for r in rows)

    def test_deterministic(self):
        ds = generate(ManifoldSpec.circle(), 8, 2)
        model = Mlp.create(2, [8], SCHED, 3)
        a = sgd_run(model, ds, config(), SCHED, TAU, 11)
        b = sgd_run(model, ds, config(), SCHED, TAU, 11)
        np.testing.assert_array_equal(a.params, b.params)

    def test_nan_raises_with_step(self):
        basis = FeatureBasis([[0.0, 0.0]], 1.0)
        model = Dictionary(basis, [np.nan, 0.0], SCHED)
        ds = generate(ManifoldSpec.circle(), 8, 2)
        with pytest.raises(DivergedRunError) as err:
            sgd_run(model, ds, config(), SCHED, TAU, 0)
        assert err.value.step == 0

    def test_trace_csv(self, tmp_path):
        ds = generate(ManifoldSpec.circle(), 8, 2)
        rows = []
        sgd_run(Mlp.create(2, [4], SCHED, 0), ds, config(num_steps=3), SCHED, TAU, 0, trace=rows)
        p = tmp_path / "trace.csv"
        write_trace_csv(p, rows)
        lines = p.read_bytes().decode().split("\r\n")
        assert lines[0] == "step,loss_est,grad_norm,clipped_flag,theta_norm"
        assert len(lines) == 5

    def test_noise_free_mode_deterministic_in_time_noise(self):
        ds = generate(ManifoldSpec.circle(), 8, 2)
        cfg = config(noise_mode=PathwiseSgd(noise_free=True, n_inner_mean=16), num_steps=5)
        out = sgd_run(Mlp.create(2, [4], SCHED, 0), ds, cfg, SCHED, TAU, 3)
        assert np.all(np.isfinite(out.params))


class TestGaussianMode:
    def test_repeated_noise_has_zero_covariance(self):
        rng = np.random.default_rng(8)
        model = Dictionary(FeatureBasis(rng.normal(size=(2, 2)), 1.0), rng.normal(size=4), SCHED)
        batch = rng.normal(size=(4, 2))
        one = draws(rng, 4, 2, 2)
        t = np.repeat(one.t[None], 8, axis=0)
        xi = np.repeat(one.xi[None], 8, axis=0)
        mom = clipped_moments(model, batch, t, xi, SCHED, config())
        np.testing.assert_allclose(mom.cov, 0.0, atol=1e-20)
        expect = clip(gradient_estimate(model, batch, config(), SCHED, TAU, one), 5.0)
        np.testing.assert_allclose(mom.mean, expect, rtol=1e-12)

    def test_one_parameter_variance(self):
        # 1-D data, one bump, one weight: the clipped scalar gradient
        rng = np.random.default_rng(9)
        model = Dictionary(FeatureBasis([[0.3]], 0.7), [0.4], SCHED)
        batch = np.array([[0.5], [-0.8]])
        cfg = config(batch_size=2, resamples=1, clip=0.5)
        n_cov = 20_000
        t = rng.uniform(0.05, 2.0, (n_cov, 2, 1))
        xi = rng.standard_normal((n_cov, 2, 1, 1))
        mom = clipped_moments(model, batch, t, xi, SCHED, cfg)
        R = 10**6
        bt = rng.uniform(0.05, 2.0, (R, 2, 1))
        bx = rng.standard_normal((R, 2, 1, 1))
        g, _ = _per_resample_grads(model, batch, bt, bx, SCHED, cfg.time_weight_fn)
        brute = clip_rows(g, cfg.clip)[:, 0]
        var = float(brute.var())
        dev = (brute - brute.mean()) ** 2
        # std-error of the n_cov sample variance
        se = float(dev.std() / math.sqrt(n_cov))
        assert abs(float(mom.cov[0, 0]) - var) <= 4 * se

    def test_run_deterministic_and_psd(self):
        ds = generate(ManifoldSpec.circle(), 8, 2)
        model = Dictionary.zeros(FeatureBasis([[0.0, 0.0], [1.0, 0.0]], 1.0), SCHED)
        cfg = config(noise_mode=GaussianApprox(n_inner_cov=16), num_steps=5)
        a = sgd_gaussian_run(model, ds, cfg, SCHED, TAU, 4)
        b = sgd_gaussian_run(model, ds, cfg, SCHED, TAU, 4)
        np.testing.assert_array_equal(a.params, b.params)

    def test_mode_mismatch(self):
        ds = generate(ManifoldSpec.circle(), 8, 2)
        with pytest.raises(ConfigurationError):
            sgd_gaussian_run(Mlp.create(2, [4], SCHED, 0), ds, config(), SCHED, TAU, 0)


class TestErm:
    def test_empirical_direction_weight_one(self):
        ds = generate(ManifoldSpec.circle(), 6, 3)
        emp = EmpiricalMixture(ds, SCHED)
        basis = FeatureBasis(np.zeros((0, 2)), 1.0, refs=[emp], dim=2)
        n_mc = 4096
        model = erm_dictionary(ds, basis, SCHED, TAU, n_mc, 5)
        # sandwich std-error of the 1-D least-squares ratio on the same draws
        d = draw_paired(ds, SCHED, TAU, n_mc, 5)
        X, t, sig, xi = d.states(SCHED)
        phi = emp._eval(X, t)
        y = -xi / sig[:, None]
        w = float(model.params[0])
        den = float(np.sum(phi * phi))
        per_draw = np.sum(phi * (y - w * phi), axis=1)
        se = math.sqrt(float(np.sum(per_draw**2))) / den
        assert abs(w - 1.0) <= 3 * se

    def test_zero_feature_gets_zero_weight(self):
        ds = generate(ManifoldSpec.circle(), 6, 3)
        basis = FeatureBasis([[1e3, 1e3], [0.0, 0.0]], 0.5)
        model = erm_dictionary(ds, basis, SCHED, TAU, 512, 1)
        np.testing.assert_allclose(model.params[:2], 0.0, atol=1e-14)

    def test_refit_identical(self):
        ds = generate(ManifoldSpec.circle(), 6, 3)
        basis = FeatureBasis(np.random.default_rng(0).normal(size=(4, 2)), 0.6)
        a = erm_dictionary(ds, basis, SCHED, TAU, 512, 2)
        b = erm_dictionary(ds, basis, SCHED, TAU, 512, 2)
        np.testing.assert_array_equal(a.params, b.params)

    def test_clamped_solution_feasible(self):
        ds = generate(ManifoldSpec.circle(), 6, 3)
        basis = FeatureBasis(np.random.default_rng(0).normal(size=(4, 2)), 0.6)
        free = erm_dictionary(ds, basis, SCHED, TAU, 512, 2)
        W = free.params.reshape(4, 2)
        D = 0.5 * np.linalg.norm(W, axis=1).sum()
        model = erm_dictionary(ds, basis, SCHED, TAU, 512, 2, clamp=D)
        assert np.linalg.norm(model.params.reshape(4, 2), axis=1).sum() <= D / 2 + 1e-9

    def test_feature_ceiling(self):
        ds = generate(ManifoldSpec.circle(), 6, 3)
        basis = FeatureBasis(np.zeros((10, 2)), 0.6)
        with pytest.raises(ConfigurationError):
            erm_dictionary(ds, basis, SCHED, TAU, 64, 2, max_features=8)

    def test_group_projection(self):
        W = np.array([[3.0, 4.0], [0.0, 1.0]])
        P = project_group_l1(W, 2.0)
        assert np.linalg.norm(P, axis=1).sum() == pytest.approx(2.0)
        np.testing.assert_array_equal(project_group_l1(W, 10.0), W)


class TestCoupledTrain:
    def setup_method(self):
        self.ds = generate(ManifoldSpec.circle(), 16, 4)
        self.cfg = config(batch_size=2, num_steps=5)
        self.trainer = SgdTrainer(Mlp.create(2, [6], SCHED, 0), self.cfg, SCHED, TAU)

    def test_same_dataset(self):
        res = coupled_train(self.ds, self.ds, self.trainer, 3)
        assert res.divergence_step is None
        np.testing.assert_array_equal(res.theta_a, res.theta_b)

    def test_index_never_sampled(self):
        i = 7
        for seed in range(200):
            rng = stream(seed, "batch")
            batches = [fisher_yates_prefix(rng, 16, 2) for _ in range(5)]
            if all(i not in b for b in batches):
                break
        res = coupled_train(self.ds, self.ds.replace(i, [5.0, 5.0]), self.trainer, seed)
        assert res.divergence_step is None
        np.testing.assert_array_equal(res.theta_a, res.theta_b)

    def test_divergence_at_first_batch_with_index(self):
        i = 3
        for seed in range(200):
            rng = stream(seed, "batch")
            batches = [fisher_yates_prefix(rng, 16, 2) for _ in range(5)]
            hits = [k for k, b in enumerate(batches) if i in b]
            if hits and hits[0] >= 2:
                break
        res = coupled_train(self.ds, self.ds.replace(i, [0.0, 1.5]), self.trainer, seed)
        assert res.divergence_step == hits[0]
        np.testing.assert_array_equal(res.trace[: hits[0]], 0.0)
        assert res.trace[hits[0]] > 0

    def test_two_differences_rejected(self):
        other = self.ds.replace(0, [9.0, 9.0]).replace(1, [8.0, 8.0])
        with pytest.raises(ContractViolation):
            coupled_train(self.ds, other, self.trainer, 0)

    def test_erm_diverges_at_zero(self):
        basis = FeatureBasis(np.random.default_rng(0).normal(size=(3, 2)), 0.6)
        res = coupled_train(self.ds, self.ds.replace(0, [0.2, 0.1]), ErmTrainer(basis, SCHED, TAU, 256), 1)
        assert res.divergence_step == 0

    def test_constant_and_empirical(self):
        other = self.ds.replace(0, [0.2, 0.1])
        c = coupled_train(self.ds, other, ConstantTrainer(Mlp.create(2, [4], SCHED, 0)), 0)
        assert c.divergence_step is None
        e = coupled_train(self.ds, other, EmpiricalTrainer(SCHED), 0)
        assert e.divergence_step == 0

    def test_gaussian_reflection_pair(self):
        model = Dictionary.zeros(FeatureBasis([[0.0, 0.0]], 1.0), SCHED)
        cfg = config(batch_size=4, num_steps=30, noise_mode=GaussianApprox(16, coupling="reflection"))
        trainer = SgdTrainer(model, cfg, SCHED, TAU)
        res = coupled_train(self.ds, self.ds.replace(0, [0.0, 1.0]), trainer, 2)
        assert sum(res.branch_counts.values()) == 30

    def test_result_invariant(self):
        with pytest.raises(ContractViolation):
            CoupledRunResult(np.zeros(2), np.ones(2), None)
        with pytest.raises(ContractViolation):
            CoupledRunResult(np.zeros(2), np.zeros(2), 3)
