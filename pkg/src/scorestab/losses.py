"""Monte-Carlo estimators of the score-matching losses and their constants."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import kernels
from .errors import ContractViolation, DomainError, UnsupportedOperationError
from .process import ContinuousUniform, Schedule, TimeSampler, TimeWeighting
from .scores import Dataset, EmpiricalMixture, ScoreModel
from .seeding import SeedLike, stream

CSV_HEADER = ["loss_kind", "value", "std_error", "n", "seed", "config_hash"]


@dataclass(frozen=True)
class LossEstimate:
    value: float
    std_error: float
    num_samples: int

    def __post_init__(self):
        if not math.isfinite(self.value) or not self.std_error >= 0 or self.num_samples < 1:
            raise ValueError(f"invalid loss estimate {self}")

    @classmethod
    def from_values(cls, values: np.ndarray) -> "LossEstimate":
        values = np.asarray(values, dtype=np.float64)
        n = values.size
        se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(values.mean()), se, n)

    def csv_row(self, kind: str, seed: Any, config_hash: str) -> list:
        return [kind, repr(self.value), repr(self.std_error), self.num_samples, seed, config_hash]


def append_csv(path: str | os.PathLike, rows: list[list]) -> None:
    """Append estimate rows, writing the header for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        if new:
            w.writerow(CSV_HEADER)
        w.writerows(rows)


def weighting_scale(weighting: TimeWeighting) -> float:
    """Mass of the unnormalised indicator weighting (1 for atoms)."""
    return weighting.length if isinstance(weighting, ContinuousUniform) else 1.0


# --------------------------------------------------------------------------
# paired draws


@dataclass(frozen=True)
class McDraws:
    """One paired Monte-Carlo stream.

    ``index`` is the dataset index per outer draw (None for distribution
    targets); ``xi`` has shape (n, n_inner, d).
    """

    index: np.ndarray | None
    x0: np.ndarray
    t: np.ndarray
    xi: np.ndarray

    @property
    def n(self) -> int:
        return self.t.size

    def states(self, schedule: Schedule):
        """Noised states X_t, flattened with times, sigma and xi per row."""
        n, P, d = self.xi.shape
        mu = schedule.mean_scale(self.t)
        sig = np.sqrt(schedule.var(self.t))
        X = mu[:, None, None] * self.x0[:, None, :] + sig[:, None, None] * self.xi
        return (
            X.reshape(n * P, d),
            np.repeat(self.t, P),
            np.repeat(sig, P),
            self.xi.reshape(n * P, d),
        )


def is_dataset(data) -> bool:
    return isinstance(data, Dataset)


def draw_x0(data, n: int, seed: SeedLike):
    rng = stream(seed, "x0")
    if is_dataset(data):
        idx = rng.integers(0, data.size, size=n)
        return idx, data.points[idx]
    if not hasattr(data, "sample"):
        raise ContractViolation("data must be a Dataset or expose sample(n, rng)")
    return None, np.asarray(data.sample(n, rng), dtype=np.float64)


def draw_paired(data, schedule: Schedule, weighting: TimeWeighting, n_mc: int, seed: SeedLike, n_inner: int = 1) -> McDraws:
    """Draw (x0, t, xi) from three independent sub-streams of ``seed``.

    The t and xi streams do not depend on ``data``, so estimates on adjacent
    datasets or on the population share them exactly.
    """
    if n_mc < 2:
        raise DomainError("n_mc must be at least 2")
    if n_inner < 1:
        raise DomainError("n_inner must be at least 1")
    if is_dataset(data) and data.size < 1:
        raise DomainError("empty dataset")
    weighting.validate(schedule)
    idx, x0 = draw_x0(data, n_mc, seed)
    t = TimeSampler(weighting).draw(stream(seed, "t"), n_mc)
    xi = stream(seed, "xi").standard_normal((n_mc, n_inner, x0.shape[1]))
    return McDraws(idx, x0, t, xi)


def _reduce(values: np.ndarray, draws: McDraws) -> np.ndarray:
    return values.reshape(draws.n, -1).mean(axis=1)


def dsm_values(model: ScoreModel, draws: McDraws, schedule: Schedule) -> np.ndarray:
    """Per-outer-draw integrand ||s(X_t, t) - (mu x0 - X_t)/sigma^2||^2."""
    X, t, sig, xi = draws.states(schedule)
    s = model._eval(X, t)
    r = s + xi / sig[:, None]
    return _reduce(np.einsum("ij,ij->i", r, r), draws)


def sm_values(model: ScoreModel, reference: ScoreModel, draws: McDraws, schedule: Schedule) -> np.ndarray:
    if not reference.exact:
        raise UnsupportedOperationError(f"reference {reference.variant} has no closed form")
    X, t, _, _ = draws.states(schedule)
    r = model._eval(X, t) - reference._eval(X, t)
    return _reduce(np.einsum("ij,ij->i", r, r), draws)


def csm_values(data, draws: McDraws, schedule: Schedule, exact_score: ScoreModel | None = None) -> np.ndarray:
    """Per-outer-draw integrand of the separation constant.

    For a dataset the posterior covariance trace is exact; for a distribution
    the constant is the denoising loss of its exact score.
    """
    if is_dataset(data):
        X, t, _, _ = draws.states(schedule)
        mu = schedule.mean_scale(t)
        s2 = schedule.var(t)
        _, tr = kernels.posterior_stats(data.points, X, mu, s2)
        return _reduce(mu * mu / (s2 * s2) * tr, draws)
    if exact_score is None:
        if not hasattr(data, "exact_score"):
            raise UnsupportedOperationError("distribution exposes no exact score")
        exact_score = data.exact_score(schedule)
    return dsm_values(exact_score, draws, schedule)


# --------------------------------------------------------------------------
# public estimators


def estimate_dsm(model: ScoreModel, data, schedule: Schedule, weighting: TimeWeighting, n_mc: int, seed: SeedLike, n_inner: int = 1) -> LossEstimate:
    """Denoising score-matching loss on a dataset (empirical) or distribution (population)."""
    draws = draw_paired(data, schedule, weighting, n_mc, seed, n_inner)
    return LossEstimate.from_values(dsm_values(model, draws, schedule))


def estimate_sm(model: ScoreModel, reference_score: ScoreModel, data, schedule: Schedule, weighting: TimeWeighting, n_mc: int, seed: SeedLike, n_inner: int = 1) -> LossEstimate:
    """Score-matching loss against an exactly known reference score."""
    if not reference_score.exact:
        raise UnsupportedOperationError(f"reference {reference_score.variant} has no closed form")
    draws = draw_paired(data, schedule, weighting, n_mc, seed, n_inner)
    return LossEstimate.from_values(sm_values(model, reference_score, draws, schedule))


def estimate_csm(data, schedule: Schedule, weighting: TimeWeighting, n_mc: int, n_inner: int, seed: SeedLike) -> LossEstimate:
    """Separation constant between the denoising and plain losses."""
    draws = draw_paired(data, schedule, weighting, n_mc, seed, n_inner)
    return LossEstimate.from_values(csm_values(data, draws, schedule))


def reference_score(data, schedule: Schedule) -> ScoreModel:
    """Exact score of ``data``: empirical for a dataset, closed form for a distribution."""
    if is_dataset(data):
        return EmpiricalMixture(data, schedule)
    if not hasattr(data, "exact_score"):
        raise UnsupportedOperationError("distribution exposes no exact score")
    return data.exact_score(schedule)


@dataclass(frozen=True)
class Decomposition:
    dsm: LossEstimate
    sm: LossEstimate
    csm: LossEstimate
    residual: float
    combined_se: float
    paired_se: float

    @property
    def within(self) -> float:
        """|residual| in units of the combined standard error."""
        return abs(self.residual) / self.combined_se if self.combined_se > 0 else (0.0 if self.residual == 0 else math.inf)


def loss_decomposition(model: ScoreModel, data, schedule: Schedule, weighting: TimeWeighting, n_mc: int, seed: SeedLike, n_inner: int = 1) -> Decomposition:
    """Paired estimates of dsm, sm and csm on one stream and the residual dsm - sm - csm."""
    draws = draw_paired(data, schedule, weighting, n_mc, seed, n_inner)
    ref = reference_score(data, schedule)
    a = dsm_values(model, draws, schedule)
    b = sm_values(model, ref, draws, schedule)
    c = csm_values(data, draws, schedule, None if is_dataset(data) else ref)
    A, B, C = (LossEstimate.from_values(v) for v in (a, b, c))
    resid = LossEstimate.from_values(a - b - c)
    combined = math.sqrt(A.std_error**2 + B.std_error**2 + C.std_error**2)
    return Decomposition(A, B, C, A.value - B.value - C.value, combined, resid.std_error)


__all__ = [
    "LossEstimate",
    "McDraws",
    "Decomposition",
    "append_csv",
    "draw_paired",
    "dsm_values",
    "sm_values",
    "csm_values",
    "estimate_dsm",
    "estimate_sm",
    "estimate_csm",
    "loss_decomposition",
    "reference_score",
    "weighting_scale",
]
