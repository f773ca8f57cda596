"""Ornstein-Uhlenbeck forward process, step grids and time weightings."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, UnsupportedOperationError
from .seeding import SeedLike, as_generator

# Tolerance used when snapping L = (T-1)/kappa and log(1/eps)/log(1+kappa)
# onto integers before flooring.
_SNAP = 1e-9


@dataclass(frozen=True)
class Schedule:
    alpha: float
    horizon: float
    early_stop: float

    def __post_init__(self):
        a, T, eps = float(self.alpha), float(self.horizon), float(self.early_stop)
        if not all(math.isfinite(v) for v in (a, T, eps)):
            raise ConfigurationError("schedule fields must be finite")
        if a < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {a}")
        if not 0 < eps < T:
            raise ConfigurationError(f"need 0 < early_stop < horizon, got {eps}, {T}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "horizon", T)
        object.__setattr__(self, "early_stop", eps)

    @property
    def prior_variance(self) -> float:
        return 1.0 / self.alpha if self.alpha > 0 else 2.0 * self.horizon

    def mean_scale(self, t):
        """mu_t, vectorised over ``t``."""
        return np.exp(-self.alpha * np.asarray(t, dtype=float))

    def var(self, t):
        """sigma_t^2, vectorised over ``t``."""
        t = np.asarray(t, dtype=float)
        if self.alpha > 0:
            return -np.expm1(-2.0 * self.alpha * t) / self.alpha
        return 2.0 * t

    def check_time(self, t, *, positive: bool = False):
        arr = np.asarray(t, dtype=float)
        lo_bad = arr <= 0 if positive else arr < 0
        if np.any(~np.isfinite(arr)) or np.any(lo_bad) or np.any(arr > self.horizon * (1 + 1e-12)):
            bound = "(0" if positive else "[0"
            raise DomainError(f"time outside {bound}, {self.horizon}]: {t}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "horizon": self.horizon, "early_stop": self.early_stop}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(alpha=d["alpha"], horizon=d["horizon"], early_stop=d["early_stop"])


@dataclass(frozen=True)
class KernelCoeffs:
    mean_scale: float
    var: float


def kernel_coeffs(schedule: Schedule, t: float) -> KernelCoeffs:
    """Mean scale and variance of X_t given X_0."""
    schedule.check_time(t)
    return KernelCoeffs(float(schedule.mean_scale(t)), float(schedule.var(t)))


def sample_forward(schedule: Schedule, x0, t: float, seed: SeedLike) -> np.ndarray:
    """One draw of X_t | X_0 = x0."""
    kc = kernel_coeffs(schedule, t)
    x0 = np.asarray(x0, dtype=float)
    if kc.var == 0.0:
        return x0.copy()
    rng = as_generator(seed)
    return kc.mean_scale * x0 + math.sqrt(kc.var) * rng.standard_normal(x0.shape)


# --------------------------------------------------------------------------
# time weightings


class TimeWeighting:
    """Probability measure tau on (0, T]."""

    def validate(self, schedule: Schedule) -> None:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "TimeWeighting":
        kind = d.get("kind")
        if kind == "uniform":
            return ContinuousUniform(d["lo"], d["hi"])
        if kind == "atoms":
            return DiscreteAtoms(tuple(d["times"]), tuple(d["weights"]))
        raise ConfigurationError(f"unknown weighting kind {kind!r}")


@dataclass(frozen=True)
class ContinuousUniform(TimeWeighting):
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not 0 < lo < hi:
            raise ConfigurationError(f"ContinuousUniform needs 0 < lo < hi, got {lo}, {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def length(self) -> float:
        # Scale factor between the unnormalised indicator weighting and this one.
        return self.hi - self.lo

    def validate(self, schedule: Schedule) -> None:
        if self.hi > schedule.horizon * (1 + 1e-12):
            raise ConfigurationError("ContinuousUniform.hi exceeds the horizon")

    def to_dict(self) -> dict:
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class DiscreteAtoms(TimeWeighting):
    times: tuple
    weights: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        weights = tuple(float(w) for w in self.weights)
        if len(times) == 0 or len(times) != len(weights):
            raise ConfigurationError("atoms need matching non-empty times and weights")
        if any(t <= 0 for t in times):
            raise ConfigurationError("atom times must be positive")
        if any(w < 0 for w in weights) or abs(math.fsum(weights) - 1.0) > 1e-12:
            raise ConfigurationError("atom weights must be non-negative and sum to 1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", weights)

    def validate(self, schedule: Schedule) -> None:
        if max(self.times) > schedule.horizon * (1 + 1e-12):
            raise ConfigurationError("atom time exceeds the horizon")

    def to_dict(self) -> dict:
        return {"kind": "atoms", "times": list(self.times), "weights": list(self.weights)}


def point_mass(t: float) -> DiscreteAtoms:
    return DiscreteAtoms((t,), (1.0,))


# --------------------------------------------------------------------------
# time-weight functions w_t used by the gradient estimator


@dataclass(frozen=True)
class WeightFn:
    """Named positive function of time.

    ``kind`` is ``"one"`` (w = 1) or ``"sigma2"`` (w = sigma_t^2 under ``schedule``).
    """

    kind: str = "one"
    schedule: Schedule | None = None

    def __post_init__(self):
        if self.kind not in ("one", "sigma2"):
            raise ConfigurationError(f"unknown weight function {self.kind!r}")
        if self.kind == "sigma2" and self.schedule is None:
            raise ConfigurationError("sigma2 weight function needs a schedule")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "one":
            return np.ones_like(t)
        return self.schedule.var(t)


class TimeSampler:
    """Sampler for t ~ w^{-1} tau, normalised.

    ``normaliser`` is the integral of 1/w against tau; the gradient estimator
    uses the normalised law as its definition.
    """

    _GRID = 4097

    def __init__(self, weighting: TimeWeighting, weight_fn: Callable | None = None):
        self.weighting = weighting
        self.weight_fn = weight_fn
        self.constant = weight_fn is None or (isinstance(weight_fn, WeightFn) and weight_fn.kind == "one")
        if isinstance(weighting, DiscreteAtoms):
            times = np.asarray(weighting.times)
            base = np.asarray(weighting.weights)
            inv = base / self._w(times) if not self.constant else base.copy()
            self.normaliser = float(math.fsum(inv))
            probs = inv / self.normaliser
            self._times = times
            self._cdf = np.cumsum(probs)
            self._cdf[-1] = 1.0
            self.probs = probs
        elif isinstance(weighting, ContinuousUniform):
            if self.constant:
                self.normaliser = 1.0
            else:
                grid = np.linspace(weighting.lo, weighting.hi, self._GRID)
                dens = 1.0 / self._w(grid)
                cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
                total = cum[-1]
                self.normaliser = float(total / weighting.length)
                self._grid = grid
                self._cum = cum / total
        else:
            raise ConfigurationError(f"unsupported weighting {type(weighting).__name__}")

    def _w(self, t):
        w = np.asarray(self.weight_fn(t), dtype=float)
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ConfigurationError("weight function must be finite and positive on the support")
        inv = 1.0 / w
        if np.any(~np.isfinite(inv)):
            raise ConfigurationError("w^{-1} is not integrable against the weighting")
        return w

    def weight(self, t):
        if self.constant:
            return np.ones_like(np.asarray(t, dtype=float))
        return np.asarray(self.weight_fn(t), dtype=float)

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.random(size)
        wt = self.weighting
        if isinstance(wt, DiscreteAtoms):
            idx = np.searchsorted(self._cdf, u, side="right")
            return self._times[np.minimum(idx, len(self._times) - 1)]
        if self.constant:
            return wt.lo + (wt.hi - wt.lo) * u
        return np.interp(u, self._cum, self._grid)


def sample_time(weighting: TimeWeighting, weight_fn: Callable | None, seed: SeedLike) -> float:
    """One draw of t with density proportional to 1/w against tau."""
    return float(TimeSampler(weighting, weight_fn).draw(as_generator(seed), None))


def sample_times(weighting: TimeWeighting, weight_fn: Callable | None, n: int, seed: SeedLike) -> np.ndarray:
    return TimeSampler(weighting, weight_fn).draw(as_generator(seed), n)


# --------------------------------------------------------------------------
# step grid


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) <= _SNAP * max(1.0, abs(v)) else v


@dataclass(frozen=True)
class StepGrid:
    kappa: float
    times: tuple
    num_steps: int
    horizon: float

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times, dtype=float)

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "times": list(self.times), "num_steps": self.num_steps, "horizon": self.horizon}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["k", "t_k"])
        for k, t in enumerate(self.times):
            w.writerow([k, repr(float(t))])
        return buf.getvalue()


def build_step_grid(schedule: Schedule, kappa: float) -> StepGrid:
    """Linear-then-geometric grid t_0 = 0 < ... < t_K <= T - eps."""
    kappa = float(kappa)
    if not kappa > 0 or not math.isfinite(kappa):
        raise ConfigurationError(f"kappa must be positive, got {kappa}")
    T, eps = schedule.horizon, schedule.early_stop
    if T < 1:
        raise UnsupportedOperationError("step grid formula assumes horizon >= 1")
    L = _snap((T - 1.0) / kappa)
    tail = _snap(math.log(1.0 / eps) / math.log1p(kappa))
    K = int(math.floor(L + tail))
    if K < 1:
        raise ConfigurationError("grid has no steps; decrease kappa or early_stop")
    times = []
    for k in range(K + 1):
        if k < L:
            times.append(kappa * k)
        else:
            times.append(T - (1.0 + kappa) ** (L - k))
    return StepGrid(kappa=kappa, times=tuple(times), num_steps=K, horizon=T)


def discrete_weighting(grid: StepGrid, schedule: Schedule) -> DiscreteAtoms:
    """Uniform atoms at T - t_k, k = 0..K-1."""
    K = grid.num_steps
    times = tuple(schedule.horizon - t for t in grid.times[:K])
    # 1/K repeated K times need not fsum to exactly 1; fix the last weight.
    w = [1.0 / K] * K
    w[-1] = 1.0 - math.fsum(w[:-1])
    return DiscreteAtoms(times, tuple(w))


def weighting_support(weighting: TimeWeighting) -> tuple[float, float]:
    if isinstance(weighting, ContinuousUniform):
        return weighting.lo, weighting.hi
    return min(weighting.times), max(weighting.times)


__all__ = [
    "Schedule",
    "KernelCoeffs",
    "TimeWeighting",
    "ContinuousUniform",
    "DiscreteAtoms",
    "WeightFn",
    "TimeSampler",
    "StepGrid",
    "kernel_coeffs",
    "sample_forward",
    "sample_time",
    "sample_times",
    "build_step_grid",
    "discrete_weighting",
    "point_mass",
    "weighting_support",
]

