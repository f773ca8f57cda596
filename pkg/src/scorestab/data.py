"""Synthetic data laws supported on low-dimensional sets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .process import Schedule
from .scores import AnalyticGaussian, Dataset, EmpiricalMixture, GaussianMixtureScore, ScoreModel
from .seeding import SeedLike, as_generator

# Angle nodes used for the circle's reference score. The periodic trapezoid
# rule converges geometrically once sigma_t exceeds a few node spacings.
CIRCLE_NODES = 4096


@dataclass(frozen=True)
class ManifoldSpec:
    """A data law with its geometric constants.

    ``kind`` is ``"circle"``, ``"blobs"`` or ``"two_point"``. ``density_floor``
    is None for laws without a positive lower density bound (Gaussian blobs).
    """

    kind: str
    ambient_dim: int = 2
    radius: float = 1.0
    means: tuple = ()
    scale: float = 1.0
    separation: float = 2.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if self.kind not in ("circle", "blobs", "two_point"):
            raise ConfigurationError(f"unknown manifold kind {self.kind!r}")
        if self.ambient_dim < 1:
            raise ConfigurationError("ambient_dim must be >= 1")
        if self.kind == "circle":
            if self.ambient_dim < 2 or not self.radius > 0:
                raise ConfigurationError("circle needs ambient_dim >= 2 and radius > 0")
        elif self.kind == "blobs":
            m = np.atleast_2d(np.asarray(self.means, dtype=float))
            if m.size == 0 or m.shape[1] != self.ambient_dim or not self.scale > 0:
                raise ConfigurationError("blobs need means of width ambient_dim and scale > 0")
            object.__setattr__(self, "means", tuple(map(tuple, m.tolist())))
        elif not self.separation > 0:
            raise ConfigurationError("two_point separation must be positive")

    # constructors --------------------------------------------------------
    @classmethod
    def circle(cls, radius: float = 1.0, ambient_dim: int = 2) -> "ManifoldSpec":
        return cls("circle", ambient_dim=ambient_dim, radius=radius)

    @classmethod
    def blobs(cls, means, scale: float) -> "ManifoldSpec":
        m = np.atleast_2d(np.asarray(means, dtype=float))
        return cls("blobs", ambient_dim=m.shape[1], means=tuple(map(tuple, m.tolist())), scale=scale)

    @classmethod
    def standard_gaussian(cls, dim: int) -> "ManifoldSpec":
        return cls.blobs(np.zeros((1, dim)), 1.0)

    @classmethod
    def two_point(cls, separation: float = 2.0, ambient_dim: int = 2) -> "ManifoldSpec":
        return cls("two_point", ambient_dim=ambient_dim, separation=separation)

    # geometry ------------------------------------------------------------
    @property
    def intrinsic_dim(self) -> int:
        return {"circle": 1, "blobs": self.ambient_dim, "two_point": 0}[self.kind]

    @property
    def reach(self) -> float:
        if self.kind == "circle":
            return self.radius
        if self.kind == "two_point":
            return self.separation / 2
        return math.inf

    @property
    def density_floor(self) -> float | None:
        if self.kind == "circle":
            return 1.0 / (2 * math.pi * self.radius)
        if self.kind == "two_point":
            return 0.5
        return None

    def two_points(self) -> np.ndarray:
        e = np.zeros((2, self.ambient_dim))
        e[0, 0], e[1, 0] = -self.separation / 2, self.separation / 2
        return e

    def ball_mass(self, r: float) -> float:
        """nu(B_r(x)) for any x on the support (exact for circle and two_point)."""
        if self.kind == "circle":
            if r >= 2 * self.radius:
                return 1.0
            return 2 * math.asin(r / (2 * self.radius)) / math.pi
        if self.kind == "two_point":
            return 1.0 if r >= self.separation else 0.5
        raise ConfigurationError("ball mass is only defined for circle and two_point")

    # sampling ------------------------------------------------------------
    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.zeros((n, self.ambient_dim))
        if self.kind == "circle":
            th = rng.uniform(0.0, 2 * math.pi, n)
            out[:, 0] = self.radius * np.cos(th)
            out[:, 1] = self.radius * np.sin(th)
            return out
        if self.kind == "two_point":
            return self.two_points()[rng.integers(0, 2, n)]
        m = np.asarray(self.means)
        return m[rng.integers(0, len(m), n)] + self.scale * rng.standard_normal((n, self.ambient_dim))

    def exact_score(self, schedule: Schedule) -> ScoreModel:
        key = ("score", schedule)
        if key not in self._cache:
            self._cache[key] = self._make_score(schedule)
        return self._cache[key]

    def _make_score(self, schedule: Schedule) -> ScoreModel:
        if self.kind == "two_point":
            return EmpiricalMixture(Dataset(self.two_points()), schedule)
        if self.kind == "circle":
            th = 2 * math.pi * np.arange(CIRCLE_NODES) / CIRCLE_NODES
            nodes = np.zeros((CIRCLE_NODES, self.ambient_dim))
            nodes[:, 0] = self.radius * np.cos(th)
            nodes[:, 1] = self.radius * np.sin(th)
            return EmpiricalMixture(Dataset(nodes), schedule)
        m = np.asarray(self.means)
        if len(m) == 1:
            return AnalyticGaussian(m[0], self.scale**2, schedule)
        return GaussianMixtureScore(m, self.scale, schedule)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "ambient_dim": self.ambient_dim}
        if self.kind == "circle":
            d["radius"] = self.radius
        elif self.kind == "blobs":
            d["means"] = [list(v) for v in self.means]
            d["scale"] = self.scale
        else:
            d["separation"] = self.separation
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifoldSpec":
        kind = d.get("kind")
        if kind == "circle":
            return cls.circle(d.get("radius", 1.0), d.get("ambient_dim", 2))
        if kind == "two_point":
            return cls.two_point(d.get("separation", 2.0), d.get("ambient_dim", 2))
        if kind == "blobs":
            return cls.blobs(d["means"], d["scale"])
        raise ConfigurationError(f"unknown manifold kind {kind!r}")


def generate(spec: ManifoldSpec, N: int, seed: SeedLike) -> Dataset:
    """N i.i.d. draws from ``spec``."""
    if N < 1:
        raise ConfigurationError("N must be at least 1")
    return Dataset(spec.sample(N, as_generator(seed)))


__all__ = ["ManifoldSpec", "generate", "CIRCLE_NODES"]
