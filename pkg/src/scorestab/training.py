"""Gradient estimator, clipped SGD with weight decay, its Gaussian-noise
variant, dictionary ERM, and coupled trainers on adjacent datasets."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, DivergedRunError, UnsupportedOperationError
from .losses import draw_paired
from .process import Schedule, TimeSampler, TimeWeighting, WeightFn
from .scores import Dataset, Dictionary, EmpiricalMixture, FeatureBasis, ParametricModel, ScoreModel
from .seeding import SeedLike, stream

log = logging.getLogger(__name__)

TRACE_HEADER = ["step", "loss_est", "grad_norm", "clipped_flag", "theta_norm"]


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StepSizes:
    """eta_k = eta_bar (constant) or eta_bar / (k + 1) (decay), k = 0, 1, ..."""

    eta_bar: float
    kind: str = "constant"

    def __post_init__(self):
        if self.kind not in ("constant", "decay"):
            raise ConfigurationError(f"unknown step-size kind {self.kind!r}")
        if not self.eta_bar > 0:
            raise ConfigurationError("eta_bar must be positive")

    def __call__(self, k: int) -> float:
        return self.eta_bar if self.kind == "constant" else self.eta_bar / (k + 1)

    @property
    def max(self) -> float:
        return self.eta_bar


@dataclass(frozen=True)
class PathwiseSgd:
    """Plain stochastic gradients.

    With ``noise_free`` the estimate is replaced by the average of the clipped
    gradient over ``n_inner_mean`` resamples of (t, xi) with the batch fixed,
    a Monte-Carlo stand-in for the deterministic conditional mean.
    """

    noise_free: bool = False
    n_inner_mean: int = 64


@dataclass(frozen=True)
class GaussianApprox:
    """Clipped-gradient noise replaced by a Gaussian with matched moments.

    ``coupling`` selects how two coupled trajectories share the Gaussian
    noise: ``"synchronous"`` (same xi_k) or ``"reflection"`` (reflection /
    maximal coupling with a common isotropic floor).
    """

    n_inner_cov: int = 64
    coupling: str = "synchronous"
    max_params: int = 256
    floor_fraction: float = 0.999

    def __post_init__(self):
        if self.n_inner_cov < 2:
            raise ConfigurationError("n_inner_cov must be at least 2")
        if self.coupling not in ("synchronous", "reflection"):
            raise ConfigurationError(f"unknown coupling {self.coupling!r}")


@dataclass(frozen=True)
class TrainConfig:
    step_sizes: StepSizes
    weight_decay: float
    clip: float
    batch_size: int
    resamples: int
    num_steps: int
    time_weight_fn: WeightFn = field(default_factory=WeightFn)
    noise_mode: object = field(default_factory=PathwiseSgd)

    def __post_init__(self):
        if not self.weight_decay > 0:
            raise ConfigurationError("weight_decay must be positive")
        if not self.clip > 0:
            raise ConfigurationError("clip must be positive")
        if self.batch_size < 1 or self.resamples < 1 or self.num_steps < 1:
            raise ConfigurationError("batch_size, resamples and num_steps must be >= 1")
        if not self.step_sizes.max * self.weight_decay < 1:
            raise ConfigurationError("step sizes must satisfy eta_k < 1/weight_decay")
        if not isinstance(self.noise_mode, (PathwiseSgd, GaussianApprox)):
            raise ConfigurationError("noise_mode must be PathwiseSgd or GaussianApprox")

    def check_dataset(self, dataset: Dataset) -> None:
        if self.batch_size > dataset.size:
            raise ConfigurationError(f"batch_size {self.batch_size} exceeds N = {dataset.size}")

    @property
    def norm_bound_factor(self) -> float:
        """C e / lambda."""
        return self.clip * math.e / self.weight_decay


@dataclass(frozen=True)
class NoiseDraws:
    """(t_{i,j}, xi_{i,j}) for one mini-batch: t is (N_B, P), xi is (N_B, P, d)."""

    t: np.ndarray
    xi: np.ndarray


# --------------------------------------------------------------------------
# primitives


def clip(v, C: float) -> np.ndarray:
    """min(1, C/||v||) v, with clip(0) = 0."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n <= C:
        return v.copy()
    return v * (C / n)


def clip_rows(V: np.ndarray, C: float) -> np.ndarray:
    n = np.linalg.norm(V, axis=1)
    scale = np.where(n > C, C / np.where(n > 0, n, 1.0), 1.0)
    return V * scale[:, None]


def fisher_yates_prefix(rng: np.random.Generator, N: int, k: int) -> np.ndarray:
    """First k entries of a uniformly random permutation of range(N)."""
    perm = np.arange(N)
    for j in range(k):
        r = int(rng.integers(j, N))
        perm[j], perm[r] = perm[r], perm[j]
    return perm[:k].copy()


def _residual_terms(model: ParametricModel, batch: np.ndarray, noise: NoiseDraws, schedule: Schedule, wfn):
    """Rows X, t, cotangent 2 w r and squared residual weights for a batch."""
    nb, P = noise.t.shape
    if batch.shape[0] != nb:
        raise ContractViolation(f"batch has {batch.shape[0]} points, noise has {nb}")
    d = batch.shape[1]
    t = noise.t.reshape(-1)
    xi = noise.xi.reshape(-1, d)
    mu = schedule.mean_scale(t)
    sig = np.sqrt(schedule.var(t))
    x0 = np.repeat(batch, P, axis=0)
    X = mu[:, None] * x0 + sig[:, None] * xi
    r = model._eval(X, t) + xi / sig[:, None]
    w = np.asarray(wfn(t), dtype=np.float64)
    return X, t, r, w


def gradient_estimate(model: ParametricModel, batch, config: TrainConfig, schedule: Schedule, weighting: TimeWeighting, noise: NoiseDraws) -> np.ndarray:
    """Mini-batch gradient of the weighted denoising loss at the model's parameters."""
    del weighting  # the draws in ``noise`` already follow w^{-1} tau
    if not isinstance(model, ParametricModel):
        raise UnsupportedOperationError(f"{model.variant} has no parameters")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if noise.t.shape != (config.batch_size, config.resamples):
        raise ContractViolation("noise must hold exactly batch_size x resamples tuples")
    X, t, r, w = _residual_terms(model, batch, noise, schedule, config.time_weight_fn)
    return model._vjp(X, t, 2.0 * w[:, None] * r) / t.size


def _per_resample_grads(model, batch, t, xi, schedule, wfn) -> tuple[np.ndarray, np.ndarray]:
    """Gradients for R independent noise sets with the batch fixed.

    t has shape (R, N_B, P), xi (R, N_B, P, d). Returns (R, n_params) gradients
    and the R mini-batch losses.
    """
    R, nb, P = t.shape
    d = batch.shape[1]
    tt = t.reshape(-1)
    xx = xi.reshape(-1, d)
    mu = schedule.mean_scale(tt)
    sig = np.sqrt(schedule.var(tt))
    x0 = np.tile(np.repeat(batch, P, axis=0), (R, 1))
    X = mu[:, None] * x0 + sig[:, None] * xx
    r = model._eval(X, tt) + xx / sig[:, None]
    w = np.asarray(wfn(tt), dtype=np.float64)
    rows = model._vjp_rows(X, tt, 2.0 * w[:, None] * r)
    grads = rows.reshape(R, nb * P, -1).mean(axis=1)
    losses = (w * np.einsum("ij,ij->i", r, r)).reshape(R, -1).mean(axis=1)
    return grads, losses


def psd_sqrt(S: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Symmetric square root with negative eigenvalues clamped to 0.

    Returns the root and the smallest eigenvalue before clamping.
    """
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    lo = float(vals[0]) if vals.size else 0.0
    scale = max(float(np.abs(vals).max()) if vals.size else 0.0, 1e-300)
    if lo < -tol * scale:
        log.warning("covariance estimate has eigenvalue %.3e before clamping", lo)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, lo


@dataclass(frozen=True)
class GradientMoments:
    mean: np.ndarray
    cov: np.ndarray
    sqrt: np.ndarray
    min_eig_pre_clamp: float
    loss: float


def clipped_moments(model, batch, t, xi, schedule, config: TrainConfig) -> GradientMoments:
    """Plug-in mean and covariance of Clip_C(G) over resampled noise."""
    grads, losses = _per_resample_grads(model, batch, t, xi, schedule, config.time_weight_fn)
    g = clip_rows(grads, config.clip)
    m = g.mean(axis=0)
    dev = g - m
    cov = dev.T @ dev / (g.shape[0] - 1)
    root, lo = psd_sqrt(cov)
    return GradientMoments(m, cov, root, lo, float(losses.mean()))


# --------------------------------------------------------------------------
# lock-step training core


@dataclass
class CoupledRunResult:
    theta_a: np.ndarray
    theta_b: np.ndarray
    divergence_step: Optional[int]
    trace: Optional[np.ndarray] = None
    model_a: Optional[ScoreModel] = None
    model_b: Optional[ScoreModel] = None
    branch_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        same = self.theta_a.shape == self.theta_b.shape and np.array_equal(self.theta_a, self.theta_b)
        if same and self.divergence_step is not None and not self.branch_counts.get("merge"):
            raise ContractViolation("equal parameters but a divergence step is recorded")
        if not same and self.divergence_step is None:
            raise ContractViolation("parameters differ but no divergence step is recorded")


class _Streams:
    """Per-run random streams, consumed in a fixed order every step."""

    def __init__(self, seed: SeedLike):
        self.batch = stream(seed, "batch")
        self.time = stream(seed, "time")
        self.xi = stream(seed, "xi")
        self.inner_t = stream(seed, "inner_time")
        self.inner_xi = stream(seed, "inner_xi")
        self.noise = stream(seed, "gauss_noise")


def _lockstep(models: Sequence[ParametricModel], datasets: Sequence[Dataset], config: TrainConfig, schedule: Schedule, weighting: TimeWeighting, seed: SeedLike, trace_rows: list | None = None):
    """Run every (model, dataset) pair through the same random stream.

    Returns the final parameter vectors, the per-step distance trace between
    the first two trajectories, the first step at which they differed, and
    branch counts for reflection-coupled Gaussian noise.
    """
    N, d = datasets[0].points.shape
    for ds in datasets:
        config.check_dataset(ds)
        if ds.points.shape != (N, d):
            raise ContractViolation("coupled datasets must have equal shapes")
    weighting.validate(schedule)
    sampler = TimeSampler(weighting, config.time_weight_fn)
    st = _Streams(seed)
    thetas = [np.array(m.params, dtype=np.float64) for m in models]
    mode = config.noise_mode
    nb, P, K = config.batch_size, config.resamples, config.num_steps
    gaussian = isinstance(mode, GaussianApprox)
    inner = mode.n_inner_cov if gaussian else (mode.n_inner_mean if mode.noise_free else 0)
    n_par = thetas[0].size
    if gaussian and n_par > mode.max_params:
        raise ConfigurationError(f"{n_par} parameters exceed the Gaussian-mode ceiling {mode.max_params}")
    coupler = None
    if gaussian and mode.coupling == "reflection" and len(models) == 2:
        from .coupling import ReflectionNoise

        coupler = ReflectionNoise(n_par, mode.floor_fraction)
    trace = np.zeros(K) if len(models) >= 2 else None
    divergence = None
    for k in range(K):
        eta = config.step_sizes(k)
        idx = fisher_yates_prefix(st.batch, N, nb)
        t = sampler.draw(st.time, (nb, P))
        xi = st.xi.standard_normal((nb, P, d))
        if inner:
            ti = sampler.draw(st.inner_t, (inner, nb, P))
            xii = st.inner_xi.standard_normal((inner, nb, P, d))
        if gaussian:
            zeta = st.noise.standard_normal(n_par)
            extra = st.noise.standard_normal(n_par + 1)
        new = []
        moments = []
        for a, (m0, ds) in enumerate(zip(models, datasets)):
            model = m0.with_params(thetas[a])
            batch = ds.points[idx]
            if gaussian:
                mom = clipped_moments(model, batch, ti, xii, schedule, config)
                moments.append(mom)
                continue
            if inner:
                grads, losses = _per_resample_grads(model, batch, ti, xii, schedule, config.time_weight_fn)
                step = clip_rows(grads, config.clip).mean(axis=0)
                loss, gnorm, clipped = float(losses.mean()), float(np.linalg.norm(step)), False
            else:
                X, tt, r, w = _residual_terms(model, batch, NoiseDraws(t, xi), schedule, config.time_weight_fn)
                G = model._vjp(X, tt, 2.0 * w[:, None] * r) / tt.size
                gnorm = float(np.linalg.norm(G))
                clipped = gnorm > config.clip
                step = clip(G, config.clip)
                loss = float(np.mean(w * np.einsum("ij,ij->i", r, r)))
            new.append((1.0 - eta * config.weight_decay) * thetas[a] - eta * step)
            if trace_rows is not None and a == 0:
                trace_rows.append([k, loss, gnorm, int(clipped), float(np.linalg.norm(new[-1]))])
        if gaussian:
            if coupler is not None:
                new = coupler.step(thetas, moments, eta, config.weight_decay, zeta, extra)
            else:
                new = [
                    (1.0 - eta * config.weight_decay) * th - eta * mom.mean + eta * (mom.sqrt @ zeta)
                    for th, mom in zip(thetas, moments)
                ]
            if trace_rows is not None:
                mom = moments[0]
                trace_rows.append([k, mom.loss, float(np.linalg.norm(mom.mean)), 0, float(np.linalg.norm(new[0]))])
        for a, th in enumerate(new):
            if not np.all(np.isfinite(th)):
                raise DivergedRunError("non-finite parameters", k)
        thetas = new
        if trace is not None:
            diff = thetas[0] - thetas[1]
            trace[k] = float(np.linalg.norm(diff))
            if divergence is None and not np.array_equal(thetas[0], thetas[1]):
                divergence = k
    counts = coupler.counts if coupler is not None else {}
    return thetas, trace, divergence, counts


def _check_mode(config: TrainConfig, gaussian: bool):
    if gaussian != isinstance(config.noise_mode, GaussianApprox):
        want = "GaussianApprox" if gaussian else "PathwiseSgd"
        raise ConfigurationError(f"this trainer needs noise_mode {want}")


def sgd_run(model: ParametricModel, dataset: Dataset, config: TrainConfig, schedule: Schedule, weighting: TimeWeighting, seed: SeedLike, trace: list | None = None) -> ParametricModel:
    """K steps of clipped SGD with weight decay; ``trace`` collects per-step rows."""
    if not isinstance(model, ParametricModel):
        raise UnsupportedOperationError(f"{model.variant} has no parameters")
    _check_mode(config, False)
    thetas, _, _, _ = _lockstep([model], [dataset], config, schedule, weighting, seed, trace)
    return model.with_params(thetas[0])


def sgd_gaussian_run(model: ParametricModel, dataset: Dataset, config: TrainConfig, schedule: Schedule, weighting: TimeWeighting, seed: SeedLike, trace: list | None = None) -> ParametricModel:
    """K steps of the Gaussian-noise approximation of clipped SGD."""
    if not isinstance(model, ParametricModel):
        raise UnsupportedOperationError(f"{model.variant} has no parameters")
    _check_mode(config, True)
    thetas, _, _, _ = _lockstep([model], [dataset], config, schedule, weighting, seed, trace)
    return model.with_params(thetas[0])


def write_trace_csv(path: str | os.PathLike, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), r[3], repr(r[4])])


# --------------------------------------------------------------------------
# dictionary ERM


def project_group_l1(W: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of the rows of W onto {sum_j ||W_j|| <= radius}."""
    norms = np.linalg.norm(W, axis=1)
    if norms.sum() <= radius:
        return W
    # project the norm vector onto the l1 ball (sort-based simplex projection)
    u = np.sort(norms)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, u.size + 1)
    rho = np.nonzero(u * ks > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1)
    shrunk = np.maximum(norms - theta, 0.0)
    scale = np.where(norms > 0, shrunk / np.where(norms > 0, norms, 1.0), 0.0)
    return W * scale[:, None]


def erm_dictionary(dataset: Dataset, basis: FeatureBasis, schedule: Schedule, weighting: TimeWeighting, n_mc: int, seed: SeedLike, clamp: float | None = None, max_features: int = 4096, pg_iters: int = 2000) -> Dictionary:
    """Least-squares minimiser of the Monte-Carlo empirical denoising loss.

    The minimum-norm solution is returned when the design is rank deficient.
    With ``clamp`` the problem is solved over the clamped class by projected
    gradient descent.
    """
    if basis.count > max_features:
        raise ConfigurationError(f"basis of {basis.count} features exceeds the ceiling {max_features}")
    draws = draw_paired(dataset, schedule, weighting, n_mc, seed)
    X, t, sig, xi = draws.states(schedule)
    tmp = Dictionary.zeros(basis, schedule)
    Phi = tmp.design(X, t).reshape(-1, basis.count)
    y = (-xi / sig[:, None]).reshape(-1)
    theta, *_ = np.linalg.lstsq(Phi, y, rcond=None)
    if clamp is None:
        return Dictionary(basis, theta, schedule)
    radius = clamp / 2
    W = theta.reshape(basis.n_bumps, basis.dim)
    if np.linalg.norm(W, axis=1).sum() <= radius:
        return Dictionary(basis, theta, schedule, clamp)
    n = Phi.shape[0]
    A = Phi.T @ Phi / n
    b = Phi.T @ y / n
    L = float(np.linalg.eigvalsh(A)[-1])
    th = project_group_l1(W, radius).reshape(-1)
    for _ in range(pg_iters):
        g = A @ th - b
        nxt = project_group_l1((th - g / L).reshape(basis.n_bumps, basis.dim), radius).reshape(-1)
        if np.max(np.abs(nxt - th)) < 1e-13:
            th = nxt
            break
        th = nxt
    return Dictionary(basis, th, schedule, clamp)


# --------------------------------------------------------------------------
# trainers and coupled runs


class Trainer:
    """Learning algorithm handle: a deterministic map (dataset, seed) -> model."""

    name = "trainer"

    def fit(self, dataset: Dataset, seed: SeedLike) -> ScoreModel:
        raise NotImplementedError

    def fit_coupled(self, dataset_a: Dataset, dataset_b: Dataset, seed: SeedLike) -> CoupledRunResult:
        a, b = self.fit(dataset_a, seed), self.fit(dataset_b, seed)
        pa = np.array(getattr(a, "params", np.zeros(0)))
        pb = np.array(getattr(b, "params", np.zeros(0)))
        return CoupledRunResult(pa, pb, None if np.array_equal(pa, pb) else 0, None, a, b)

    def describe(self) -> dict:
        return {"name": self.name}


class ConstantTrainer(Trainer):
    """Returns the same model whatever the data."""

    name = "constant"

    def __init__(self, model: ScoreModel):
        self.model = model

    def fit(self, dataset, seed):
        return self.model

    def fit_coupled(self, dataset_a, dataset_b, seed):
        p = np.array(getattr(self.model, "params", np.zeros(0)))
        return CoupledRunResult(p, p.copy(), None, None, self.model, self.model)


class EmpiricalTrainer(Trainer):
    """Returns the empirical score of the training set."""

    name = "empirical"

    def __init__(self, schedule: Schedule):
        self.schedule = schedule

    def fit(self, dataset, seed):
        return EmpiricalMixture(dataset, self.schedule)

    def fit_coupled(self, dataset_a, dataset_b, seed):
        a, b = self.fit(dataset_a, seed), self.fit(dataset_b, seed)
        pa, pb = dataset_a.points.reshape(-1), dataset_b.points.reshape(-1)
        return CoupledRunResult(pa, pb, None if np.array_equal(pa, pb) else 0, None, a, b)


class ErmTrainer(Trainer):
    name = "erm"

    def __init__(self, basis: FeatureBasis, schedule: Schedule, weighting: TimeWeighting, n_mc: int = 4096, clamp: float | None = None):
        self.basis, self.schedule, self.weighting = basis, schedule, weighting
        self.n_mc, self.clamp = n_mc, clamp

    def fit(self, dataset, seed):
        return erm_dictionary(dataset, self.basis, self.schedule, self.weighting, self.n_mc, seed, self.clamp)

    def fit_coupled(self, dataset_a, dataset_b, seed):
        a, b = self.fit(dataset_a, seed), self.fit(dataset_b, seed)
        same = np.array_equal(a.params, b.params)
        return CoupledRunResult(np.array(a.params), np.array(b.params), None if same else 0, None, a, b)

    def describe(self):
        return {"name": self.name, "n_mc": self.n_mc, "features": self.basis.count, "clamp": self.clamp}


class SgdTrainer(Trainer):
    """Clipped SGD (pathwise or Gaussian-noise) from a fixed initial model."""

    def __init__(self, init: ParametricModel, config: TrainConfig, schedule: Schedule, weighting: TimeWeighting):
        if not isinstance(init, ParametricModel):
            raise UnsupportedOperationError(f"{init.variant} has no parameters")
        self.init, self.config, self.schedule, self.weighting = init, config, schedule, weighting

    @property
    def name(self):
        return "sgd_gaussian" if isinstance(self.config.noise_mode, GaussianApprox) else "sgd"

    def fit(self, dataset, seed):
        thetas, _, _, _ = _lockstep([self.init], [dataset], self.config, self.schedule, self.weighting, seed)
        return self.init.with_params(thetas[0])

    def fit_coupled(self, dataset_a, dataset_b, seed):
        thetas, trace, div, counts = _lockstep(
            [self.init, self.init], [dataset_a, dataset_b], self.config, self.schedule, self.weighting, seed
        )
        return CoupledRunResult(
            thetas[0], thetas[1], div, trace, self.init.with_params(thetas[0]), self.init.with_params(thetas[1]), counts
        )

    def describe(self):
        c = self.config
        return {
            "name": self.name,
            "eta_bar": c.step_sizes.eta_bar,
            "step_kind": c.step_sizes.kind,
            "weight_decay": c.weight_decay,
            "clip": c.clip,
            "batch_size": c.batch_size,
            "resamples": c.resamples,
            "num_steps": c.num_steps,
        }


def coupled_train(dataset_a: Dataset, dataset_b: Dataset, trainer: Trainer, shared_seed: SeedLike) -> CoupledRunResult:
    """Train on adjacent datasets with every random draw shared."""
    diff = dataset_a.differing_indices(dataset_b)
    if diff.size > 1:
        raise ContractViolation(f"datasets differ at {diff.size} indices")
    return trainer.fit_coupled(dataset_a, dataset_b, shared_seed)


def with_steps(config: TrainConfig, num_steps: int) -> TrainConfig:
    return replace(config, num_steps=num_steps)


__all__ = [
    "StepSizes",
    "PathwiseSgd",
    "GaussianApprox",
    "TrainConfig",
    "NoiseDraws",
    "CoupledRunResult",
    "GradientMoments",
    "clip",
    "clip_rows",
    "fisher_yates_prefix",
    "gradient_estimate",
    "clipped_moments",
    "psd_sqrt",
    "sgd_run",
    "sgd_gaussian_run",
    "erm_dictionary",
    "project_group_l1",
    "Trainer",
    "ConstantTrainer",
    "EmpiricalTrainer",
    "ErmTrainer",
    "SgdTrainer",
    "coupled_train",
    "write_trace_csv",
    "with_steps",
]
