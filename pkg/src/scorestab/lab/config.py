"""Strict TOML experiment configuration and builders for the library objects
it describes."""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..data import ManifoldSpec
from ..errors import ConfigurationError
from ..jsonio import stable_hash
from ..process import ContinuousUniform, DiscreteAtoms, Schedule, TimeWeighting, WeightFn
from ..scores import AnalyticGaussian, Dictionary, FeatureBasis, Mlp
from ..seeding import derive, stream
from ..training import (
    ConstantTrainer,
    EmpiricalTrainer,
    ErmTrainer,
    GaussianApprox,
    PathwiseSgd,
    SgdTrainer,
    StepSizes,
    TrainConfig,
    Trainer,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PIPELINES = ("train", "sample", "stability", "coupling", "verify")
CHECKS = ("generalisation", "harnack", "chernoff", "erm_identity")


@dataclass(frozen=True)
class ScheduleSection:
    alpha: float = 1.0
    horizon: float = 2.0
    early_stop: float = 0.01


@dataclass(frozen=True)
class WeightingSection:
    kind: str = "uniform"
    lo: float = 0.1
    hi: float = 1.0
    times: tuple = ()
    weights: tuple = ()


@dataclass(frozen=True)
class DataSection:
    kind: str = "circle"
    N: int = 32
    radius: float = 1.0
    ambient_dim: int = 2
    separation: float = 2.0
    means: tuple = ()
    scale: float = 1.0


@dataclass(frozen=True)
class AlgorithmSection:
    """``kind`` is constant, empirical, erm or sgd; ``clamp = 0`` means unclamped."""

    kind: str = "empirical"
    model: str = "dictionary"
    n_features: int = 8
    bandwidth: float = 0.8
    hidden: tuple = (16,)
    n_mc: int = 1024
    clamp: float = 0.0
    eta_bar: float = 0.05
    step_kind: str = "constant"
    weight_decay: float = 0.1
    clip: float = 10.0
    batch_size: int = 8
    resamples: int = 4
    num_steps: int = 100
    noise: str = "pathwise"
    noise_free: bool = False
    n_inner: int = 64
    coupling: str = "synchronous"
    time_weight: str = "one"


@dataclass(frozen=True)
class SamplerSection:
    """``dt = 0`` picks early_stop / 2 for Euler-Maruyama."""

    integrator: str = "exponential"
    kappa: float = 0.05
    dt: float = 0.0
    num_samples: int = 1000
    denoise: bool = False
    radius: float = 0.05
    min_fraction: float = 0.0
    early_stops: tuple = ()
    kappas: tuple = ()
    heldout: int = 1000


@dataclass(frozen=True)
class StabilitySection:
    """``index = -1`` replaces a uniformly drawn index."""

    n_outer: int = 64
    n_mc: int = 4096
    index: int = -1
    identical: bool = False


@dataclass(frozen=True)
class CouplingSection:
    """Pure-decay instance; ``drift_offset`` > 0 gives the second chain a constant extra drift."""

    dim: int = 2
    eta: float = 0.1
    lambda_decay: float = 1.0
    g_scale: float = 0.5
    x0: tuple = (1.0, 0.0)
    y0: tuple = (-1.0, 0.0)
    drift_offset: float = 0.0
    horizon_steps: int = 80
    replicates: int = 20_000
    a: float = 1.0
    r1: float = 0.5
    r2: float = 2.0
    window: str = "none"
    excess_noise: str = "root"
    floor_fraction: float = 0.2


@dataclass(frozen=True)
class VerifySection:
    checks: tuple = CHECKS
    harnack_t: float = 0.5
    harnack_p: float = 2.0
    harnack_trials: int = 1000
    harnack_draws: int = 100_000
    chernoff_N: int = 512
    chernoff_r: float = 0.5
    chernoff_trials: int = 50
    erm_N: int = 16
    erm_features: int = 1
    erm_outer: int = 32
    erm_n_mc: int = 1024


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


SECTIONS = {
    "schedule": ScheduleSection,
    "weighting": WeightingSection,
    "data": DataSection,
    "algorithm": AlgorithmSection,
    "sampler": SamplerSection,
    "stability": StabilitySection,
    "coupling": CouplingSection,
    "verify": VerifySection,
    "output": OutputSection,
}
TOP_LEVEL = ("pipeline", "seed")


def _coerce(value: Any, default: Any, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be an array")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    raise ConfigurationError(f"{where} has an unsupported type")


def _section(cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kw = {}
    for key, value in raw.items():
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kw[key] = _coerce(value, default, f"{name}.{key}")
    return cls(**kw)


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one run; the hash ignores output paths."""

    pipeline: str
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    weighting: WeightingSection = field(default_factory=WeightingSection)
    data: DataSection = field(default_factory=DataSection)
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    stability: StabilitySection = field(default_factory=StabilitySection)
    coupling: CouplingSection = field(default_factory=CouplingSection)
    verify: VerifySection = field(default_factory=VerifySection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration must be a table")
        unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL))
        if unknown:
            raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
        if "pipeline" not in raw:
            raise ConfigurationError("missing top-level key 'pipeline'")
        kw = {name: _section(cls_, raw[name], name) for name, cls_ in SECTIONS.items() if name in raw}
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigurationError("seed must be an integer in [0, 2^64)")
        pipeline = raw["pipeline"]
        if not isinstance(pipeline, str):
            raise ConfigurationError("pipeline must be a string")
        cfg = cls(pipeline=pipeline, seed=seed, **kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read {path}: {exc.strerror}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            if not 0 <= seed < 2**64:
                raise ConfigurationError("seed must lie in [0, 2^64)")
            cfg = dataclasses.replace(cfg, seed=seed)
        if out is not None:
            cfg = dataclasses.replace(cfg, output=OutputSection(out))
        return cfg

    def to_dict(self, include_output: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_output:
            d.pop("output")
        return d

    @property
    def hash(self) -> str:
        return stable_hash(self.to_dict(include_output=False))

    # ------------------------------------------------------------------
    # validation and builders

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ConfigurationError(f"pipeline must be one of {', '.join(PIPELINES)}")
        sched = self.build_schedule()
        self.build_weighting().validate(sched)
        self.build_data()
        if self.data.N < 1:
            raise ConfigurationError("data.N must be >= 1")
        a = self.algorithm
        if a.kind not in ("constant", "empirical", "erm", "sgd"):
            raise ConfigurationError(f"unknown algorithm kind {a.kind!r}")
        if a.kind == "sgd":
            if a.model not in ("dictionary", "mlp"):
                raise ConfigurationError(f"unknown model {a.model!r}")
            if a.noise not in ("pathwise", "gaussian"):
                raise ConfigurationError(f"unknown noise mode {a.noise!r}")
            cfg = self.build_train_config()
            if cfg.batch_size > self.data.N:
                raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds N = {self.data.N}")
        if a.kind in ("erm", "sgd") and (a.n_features < 1 or not a.bandwidth > 0):
            raise ConfigurationError("n_features must be >= 1 and bandwidth positive")
        if a.clamp < 0:
            raise ConfigurationError("clamp must be >= 0")
        s = self.sampler
        if s.integrator not in ("exponential", "euler_maruyama"):
            raise ConfigurationError(f"unknown integrator {s.integrator!r}")
        if self.pipeline == "sample":
            self.build_sampler(sched)
            for eps in s.early_stops:
                Schedule(sched.alpha, sched.horizon, float(eps))
        st = self.stability
        if st.n_outer < 1 or st.n_mc < 2:
            raise ConfigurationError("stability needs n_outer >= 1 and n_mc >= 2")
        if not -1 <= st.index < self.data.N:
            raise ConfigurationError("stability.index must be -1 or a valid dataset index")
        c = self.coupling
        if len(c.x0) != c.dim or len(c.y0) != c.dim:
            raise ConfigurationError("coupling.x0 and coupling.y0 must have length dim")
        if c.window not in ("none", "paper"):
            raise ConfigurationError("coupling.window must be 'none' or 'paper'")
        if self.pipeline == "coupling":
            self.build_coupling()
        bad = sorted(set(self.verify.checks) - set(CHECKS))
        if bad:
            raise ConfigurationError(f"unknown verify check(s): {', '.join(map(str, bad))}")

    def build_schedule(self) -> Schedule:
        s = self.schedule
        return Schedule(s.alpha, s.horizon, s.early_stop)

    def build_weighting(self) -> TimeWeighting:
        w = self.weighting
        if w.kind == "uniform":
            return ContinuousUniform(w.lo, w.hi)
        if w.kind == "atoms":
            return DiscreteAtoms(w.times, w.weights)
        raise ConfigurationError(f"unknown weighting kind {w.kind!r}")

    def build_data(self) -> ManifoldSpec:
        d = self.data
        if d.kind == "circle":
            return ManifoldSpec.circle(d.radius, d.ambient_dim)
        if d.kind == "two_point":
            return ManifoldSpec.two_point(d.separation, d.ambient_dim)
        if d.kind == "blobs":
            return ManifoldSpec.blobs(np.asarray(d.means, dtype=float), d.scale)
        raise ConfigurationError(f"unknown data kind {d.kind!r}")

    def build_basis(self, n_features: int | None = None) -> FeatureBasis:
        spec = self.build_data()
        n = self.algorithm.n_features if n_features is None else n_features
        centers = spec.sample(n, stream(self.seed, "basis"))
        return FeatureBasis(centers, self.algorithm.bandwidth)

    def build_train_config(self) -> TrainConfig:
        a = self.algorithm
        if a.noise == "gaussian":
            mode = GaussianApprox(a.n_inner, coupling=a.coupling)
        else:
            mode = PathwiseSgd(noise_free=a.noise_free, n_inner_mean=a.n_inner)
        wfn = WeightFn(a.time_weight, self.build_schedule() if a.time_weight == "sigma2" else None)
        return TrainConfig(StepSizes(a.eta_bar, a.step_kind), a.weight_decay, a.clip, a.batch_size, a.resamples, a.num_steps, wfn, mode)

    def build_trainer(self) -> Trainer:
        a = self.algorithm
        sched, tau = self.build_schedule(), self.build_weighting()
        dim = self.data.ambient_dim
        if a.kind == "constant":
            return ConstantTrainer(AnalyticGaussian(np.zeros(dim), 1.0, sched))
        if a.kind == "empirical":
            return EmpiricalTrainer(sched)
        clamp = a.clamp if a.clamp > 0 else None
        if a.kind == "erm":
            return ErmTrainer(self.build_basis(), sched, tau, a.n_mc, clamp)
        if a.model == "mlp":
            init = Mlp.create(dim, list(a.hidden), sched, derive(self.seed, "init"))
        else:
            init = Dictionary.zeros(self.build_basis(), sched, clamp)
        return SgdTrainer(init, self.build_train_config(), sched, tau)

    def build_sampler(self, schedule: Schedule | None = None):
        from ..sampling import SamplerConfig

        sched = schedule if schedule is not None else self.build_schedule()
        s = self.sampler
        if s.integrator == "exponential":
            return SamplerConfig.exponential(sched, s.kappa, s.num_samples, s.denoise)
        dt = s.dt if s.dt > 0 else sched.early_stop / 2
        return SamplerConfig.euler_maruyama(sched, dt, s.num_samples)

    def build_coupling(self):
        from ..coupling import CoupledProcess, CouplingConfig, FMetric

        c = self.coupling
        G = c.g_scale * np.eye(c.dim)
        m = math.sqrt(c.eta) / 2 if c.window == "paper" else None
        cfg = CouplingConfig(G, c.eta, c.lambda_decay, m=m, excess_noise=c.excess_noise)
        offset = np.zeros(c.dim)
        offset[0] = c.drift_offset
        drift_b = None if c.drift_offset == 0 else (lambda X, o=offset: np.broadcast_to(o, X.shape).copy())
        inst = CoupledProcess(cfg, np.asarray(c.x0, dtype=float), np.asarray(c.y0, dtype=float), None, drift_b)
        return inst, FMetric(c.a, c.r1, c.r2)
