"""Score functions: analytic Gaussian, empirical mixture, linear dictionary, MLP."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractViolation, DomainError, UnsupportedOperationError
from .process import Schedule


class Dataset:
    """Finite training set S = {x_1, ..., x_N} stored as an (N, d) array."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DomainError("dataset needs at least one point of dimension >= 1")
        if not np.all(np.isfinite(pts)):
            raise DomainError("dataset points must be finite")
        pts.setflags(write=False)
        self.points = pts

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def replace(self, i: int, x) -> "Dataset":
        """Adjacent dataset S^i with x_i swapped for ``x``."""
        pts = self.points.copy()
        pts[i] = np.asarray(x, dtype=np.float64)
        return Dataset(pts)

    def differing_indices(self, other: "Dataset") -> np.ndarray:
        if self.points.shape != other.points.shape:
            raise ContractViolation("datasets have different shapes")
        return np.flatnonzero(np.any(self.points != other.points, axis=1))

    def to_dict(self) -> dict:
        return {"points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        return cls(d["points"])


def _as_batch(x, t, schedule: Schedule):
    """Normalise (x, t) to an (M, d) array and an (M,) time array."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    tt = np.asarray(t, dtype=np.float64)
    if tt.ndim == 0:
        tt = np.full(X.shape[0], float(tt))
    elif tt.shape != (X.shape[0],):
        raise ContractViolation("time array must have one entry per row")
    if np.any(~np.isfinite(tt)) or np.any(tt <= 0):
        raise DomainError("score evaluation needs t > 0")
    if np.any(tt > schedule.horizon * (1 + 1e-12)):
        raise DomainError(f"time beyond horizon {schedule.horizon}")
    return X, tt, single


# --------------------------------------------------------------------------
# base class


class ScoreModel:
    """Common surface of every score family."""

    variant = "abstract"
    schedule: Schedule

    # batched evaluation on validated input
    def _eval(self, X: np.ndarray, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, t):
        return evaluate(self, x, t)

    @property
    def has_params(self) -> bool:
        return False

    @property
    def exact(self) -> bool:
        """True when the model is a closed-form reference score."""
        return False

    def to_dict(self) -> dict:
        raise NotImplementedError


class ParametricModel(ScoreModel):
    params: np.ndarray

    @property
    def has_params(self) -> bool:
        return True

    @property
    def n_params(self) -> int:
        return int(self.params.size)

    def with_params(self, theta) -> "ParametricModel":
        raise NotImplementedError

    def _vjp(self, X, t, cot) -> np.ndarray:
        """Sum over rows of J_m^T cot_m."""
        return self._vjp_rows(X, t, cot).sum(axis=0)

    def _vjp_rows(self, X, t, cot) -> np.ndarray:
        """Per-row J_m^T cot_m, shape (M, n_params)."""
        raise NotImplementedError


# --------------------------------------------------------------------------
# closed-form references


class AnalyticGaussian(ScoreModel):
    """Exact score of N(m, c I) pushed through the forward process."""

    variant = "analytic_gaussian"

    def __init__(self, data_mean, data_cov_scale: float, schedule: Schedule):
        self.data_mean = np.array(data_mean, dtype=np.float64).reshape(-1)
        if not data_cov_scale > 0:
            raise ConfigurationError("data_cov_scale must be positive")
        self.data_cov_scale = float(data_cov_scale)
        self.schedule = schedule

    @property
    def exact(self) -> bool:
        return True

    def _eval(self, X, t):
        mu = self.schedule.mean_scale(t)[:, None]
        v = mu * mu * self.data_cov_scale + self.schedule.var(t)[:, None]
        return -(X - mu * self.data_mean[None, :]) / v

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "data_mean": self.data_mean.tolist(),
            "data_cov_scale": self.data_cov_scale,
            "schedule": self.schedule.to_dict(),
        }


class GaussianMixtureScore(ScoreModel):
    """Exact score of an equal-weight mixture of N(m_j, s^2 I) components."""

    variant = "gaussian_mixture"

    def __init__(self, means, scale: float, schedule: Schedule):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        if not scale > 0:
            raise ConfigurationError("mixture scale must be positive")
        self.scale = float(scale)
        self.schedule = schedule

    @property
    def exact(self) -> bool:
        return True

    def _eval(self, X, t):
        mu = self.schedule.mean_scale(t)
        v = mu * mu * self.scale**2 + self.schedule.var(t)
        m, _ = kernels.posterior_stats(self.means, X, mu, v)
        return (mu[:, None] * m - X) / v[:, None]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "means": self.means.tolist(),
            "scale": self.scale,
            "schedule": self.schedule.to_dict(),
        }


class EmpiricalMixture(ScoreModel):
    """Score of the forward process started from the empirical measure of ``dataset``."""

    variant = "empirical_mixture"

    def __init__(self, dataset: Dataset, schedule: Schedule):
        self.dataset = dataset
        self.schedule = schedule

    @property
    def exact(self) -> bool:
        return True

    def posterior(self, X, t):
        """Posterior mean of X_0 and trace of its covariance given X_t = X."""
        mu = self.schedule.mean_scale(t)
        return kernels.posterior_stats(self.dataset.points, X, mu, self.schedule.var(t))

    def _eval(self, X, t):
        mu = self.schedule.mean_scale(t)
        s2 = self.schedule.var(t)
        m, _ = kernels.posterior_stats(self.dataset.points, X, mu, s2)
        return (mu[:, None] * m - X) / s2[:, None]

    def to_dict(self) -> dict:
        return {"variant": self.variant, "dataset": self.dataset.to_dict(), "schedule": self.schedule.to_dict()}


def log_softmax_posterior(dataset: Dataset, schedule: Schedule, x, t: float):
    """Posterior weights over the training points and the posterior mean."""
    X, tt, _ = _as_batch(x, t, schedule)
    if X.shape[0] != 1:
        raise ContractViolation("log_softmax_posterior takes a single query vector")
    mu = schedule.mean_scale(tt)
    w = kernels.posterior_weights(dataset.points, X, mu, schedule.var(tt))[0]
    return w, w @ dataset.points


# --------------------------------------------------------------------------
# linear dictionary


class FeatureBasis:
    """Bounded features for the dictionary class.

    Bump features are g_j(x) e_k with g_j(x) = exp(-||x - c_j||^2 / 2b^2), one
    per (center, coordinate) pair, laid out row-major as a (J, d) weight
    matrix. ``refs`` appends one feature per reference score model r, equal to
    sigma_t^2 r(x, t); those are unbounded and are meant for diagnostics only.
    """

    def __init__(self, centers, bandwidth: float, refs: Sequence[ScoreModel] = (), dim: int | None = None):
        c = np.asarray(centers, dtype=np.float64)
        if c.size == 0:
            if dim is None:
                raise ConfigurationError("empty centers need an explicit dim")
            c = np.zeros((0, dim))
        c = np.atleast_2d(c)
        if not bandwidth > 0:
            raise ConfigurationError("bandwidth must be positive")
        self.centers = c
        self.bandwidth = float(bandwidth)
        self.refs = tuple(refs)
        self.dim = c.shape[1]
        if self.count < 1:
            raise ConfigurationError("feature basis is empty")

    @property
    def n_bumps(self) -> int:
        return self.centers.shape[0]

    @property
    def count(self) -> int:
        return self.n_bumps * self.dim + len(self.refs)

    @property
    def bounded(self) -> bool:
        return not self.refs

    def bumps(self, X) -> np.ndarray:
        if self.n_bumps == 0:
            return np.zeros((X.shape[0], 0))
        return kernels.bump_features(X, self.centers, self.bandwidth)

    def ref_values(self, X, t) -> list:
        out = []
        for r in self.refs:
            out.append(r._eval(X, t) * r.schedule.var(t)[:, None])
        return out

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "bandwidth": self.bandwidth,
            "dim": self.dim,
            "refs": [r.to_dict() for r in self.refs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureBasis":
        refs = [model_from_dict(r) for r in d.get("refs", [])]
        return cls(d["centers"], d["bandwidth"], refs, dim=d.get("dim"))


def project_clamp(weights: np.ndarray, basis: FeatureBasis, clamp: float | None) -> np.ndarray:
    """Scale bump weights so that sum_j ||W_j|| <= clamp / 2."""
    if clamp is None:
        return weights
    if not basis.bounded:
        raise ConfigurationError("clamp requires a basis of bounded features")
    W = weights.reshape(basis.n_bumps, basis.dim)
    total = float(np.linalg.norm(W, axis=1).sum())
    if total <= clamp / 2:
        return weights
    return weights * ((clamp / 2) / total)


class Dictionary(ParametricModel):
    """s(x, t) = sigma_t^{-2} sum_p theta_p phi_p(x, t)."""

    variant = "dictionary"

    def __init__(self, basis: FeatureBasis, weights, schedule: Schedule, clamp: float | None = None):
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if w.size != basis.count:
            raise ConfigurationError(f"expected {basis.count} weights, got {w.size}")
        if clamp is not None and not clamp > 0:
            raise ConfigurationError("clamp must be positive")
        self.basis = basis
        self.clamp = None if clamp is None else float(clamp)
        self.schedule = schedule
        self.params = project_clamp(w, basis, self.clamp)
        self.params.setflags(write=False)

    @classmethod
    def zeros(cls, basis: FeatureBasis, schedule: Schedule, clamp: float | None = None) -> "Dictionary":
        return cls(basis, np.zeros(basis.count), schedule, clamp)

    def with_params(self, theta) -> "Dictionary":
        return Dictionary(self.basis, theta, self.schedule, self.clamp)

    def _bump_weights(self):
        nb = self.basis.n_bumps * self.basis.dim
        return self.params[:nb].reshape(self.basis.n_bumps, self.basis.dim), self.params[nb:]

    def _eval(self, X, t):
        W, ref_w = self._bump_weights()
        out = self.basis.bumps(X) @ W
        for wr, val in zip(ref_w, self.basis.ref_values(X, t)):
            out = out + wr * val
        return out / self.schedule.var(t)[:, None]

    def design(self, X, t) -> np.ndarray:
        """Feature tensor Phi with s = Phi @ theta, shape (M, d, n_params)."""
        M, d = X.shape
        g = self.basis.bumps(X) / self.schedule.var(t)[:, None]
        J = self.basis.n_bumps
        Phi = np.zeros((M, d, self.basis.count))
        for k in range(d):
            Phi[:, k, k : J * d : d] = g
        for r, val in enumerate(self.basis.ref_values(X, t)):
            Phi[:, :, J * d + r] = val / self.schedule.var(t)[:, None]
        return Phi

    def _vjp_rows(self, X, t, cot):
        c = cot / self.schedule.var(t)[:, None]
        g = self.basis.bumps(X)
        rows = (g[:, :, None] * c[:, None, :]).reshape(X.shape[0], -1)
        refs = self.basis.ref_values(X, t)
        if refs:
            extra = np.stack([np.einsum("ij,ij->i", v, c) for v in refs], axis=1)
            rows = np.concatenate([rows, extra], axis=1)
        return rows

    def _vjp(self, X, t, cot):
        c = cot / self.schedule.var(t)[:, None]
        g = self.basis.bumps(X)
        out = (g.T @ c).reshape(-1)
        refs = self.basis.ref_values(X, t)
        if refs:
            out = np.concatenate([out, [float(np.sum(v * c)) for v in refs]])
        return out

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "basis": self.basis.to_dict(),
            "weights": self.params.tolist(),
            "clamp": self.clamp,
            "schedule": self.schedule.to_dict(),
        }


# --------------------------------------------------------------------------
# MLP

_FREQS = np.array([1.0, 2.0, 4.0, 8.0]) * math.pi
EMBED_DIM = 1 + 2 * len(_FREQS)


def time_embedding(t: np.ndarray) -> np.ndarray:
    wt = t[:, None] * _FREQS[None, :]
    return np.concatenate([t[:, None], np.sin(wt), np.cos(wt)], axis=1)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(np.float64)


class Mlp(ParametricModel):
    """Fully connected network on (x, embed(t)) with linear output.

    ``layer_dims`` lists every width from the input (d + 9) to the output (d).
    The parameter vector stores, per layer, the (fan_in, fan_out) weight
    matrix row-major followed by the bias.
    """

    variant = "mlp"
    ACTIVATIONS = ("tanh", "relu")

    def __init__(self, layer_dims, params, schedule: Schedule, activation: str = "tanh"):
        dims = [int(v) for v in layer_dims]
        if len(dims) < 2 or any(v < 1 for v in dims):
            raise ConfigurationError("layer_dims needs at least input and output widths")
        if dims[0] != dims[-1] + EMBED_DIM:
            raise ConfigurationError(f"input width must be output width + {EMBED_DIM}")
        if activation not in self.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        theta = np.array(params, dtype=np.float64).reshape(-1)
        if theta.size != self.param_count(dims):
            raise ConfigurationError(f"expected {self.param_count(dims)} params, got {theta.size}")
        self.layer_dims = tuple(dims)
        self.activation = activation
        self.schedule = schedule
        self.params = theta
        self.params.setflags(write=False)

    @staticmethod
    def param_count(dims) -> int:
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    @classmethod
    def create(cls, dim: int, hidden: Sequence[int], schedule: Schedule, seed, activation: str = "tanh") -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
        from .seeding import as_generator

        rng = as_generator(seed)
        dims = [dim + EMBED_DIM, *hidden, dim]
        chunks = []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(a)
            chunks.append(rng.uniform(-bound, bound, a * b + b))
        return cls(dims, np.concatenate(chunks), schedule, activation)

    def with_params(self, theta) -> "Mlp":
        return Mlp(self.layer_dims, theta, self.schedule, self.activation)

    def _layers(self):
        out, off = [], 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = self.params[off : off + a * b].reshape(a, b)
            off += a * b
            out.append((W, self.params[off : off + b]))
            off += b
        return out

    def _forward(self, X, t):
        h = np.concatenate([X, time_embedding(t)], axis=1)
        layers = self._layers()
        cache = []
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            a = z if i == len(layers) - 1 else _act(self.activation, z)
            cache.append((h, z, a))
            h = a
        return h, cache, layers

    def _eval(self, X, t):
        return self._forward(X, t)[0]

    def _backward(self, X, t, cot, per_row: bool):
        _, cache, layers = self._forward(X, t)
        grads = []
        delta = cot
        for i in range(len(layers) - 1, -1, -1):
            h, z, a = cache[i]
            W, _ = layers[i]
            if i != len(layers) - 1:
                delta = delta * _act_grad(self.activation, z, a)
            if per_row:
                gW = (h[:, :, None] * delta[:, None, :]).reshape(h.shape[0], -1)
                grads.append(np.concatenate([gW, delta], axis=1))
            else:
                grads.append(np.concatenate([(h.T @ delta).reshape(-1), delta.sum(axis=0)]))
            delta = delta @ W.T
        grads.reverse()
        return np.concatenate(grads, axis=-1)

    def _vjp(self, X, t, cot):
        return self._backward(X, t, cot, per_row=False)

    def _vjp_rows(self, X, t, cot):
        return self._backward(X, t, cot, per_row=True)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "layer_dims": list(self.layer_dims),
            "params": self.params.tolist(),
            "activation": self.activation,
            "schedule": self.schedule.to_dict(),
        }


# --------------------------------------------------------------------------
# public functions


def evaluate(model: ScoreModel, x, t):
    """s(x, t) for one vector (returns (d,)) or a batch of rows (returns (M, d))."""
    X, tt, single = _as_batch(x, t, model.schedule)
    out = model._eval(X, tt)
    return out[0] if single else out


def param_gradient(model: ScoreModel, x, t, cotangent) -> np.ndarray:
    """J^T cotangent with J the Jacobian of s_theta(x, t) in theta.

    For a batch of rows the per-row products are summed.
    """
    if not isinstance(model, ParametricModel):
        raise UnsupportedOperationError(f"{model.variant} has no parameters")
    X, tt, _ = _as_batch(x, t, model.schedule)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(X.shape)
    return model._vjp(X, tt, cot)


def model_from_dict(d: dict) -> ScoreModel:
    kind = d.get("variant")
    schedule = Schedule.from_dict(d["schedule"])
    if kind == AnalyticGaussian.variant:
        return AnalyticGaussian(d["data_mean"], d["data_cov_scale"], schedule)
    if kind == GaussianMixtureScore.variant:
        return GaussianMixtureScore(d["means"], d["scale"], schedule)
    if kind == EmpiricalMixture.variant:
        return EmpiricalMixture(Dataset.from_dict(d["dataset"]), schedule)
    if kind == Dictionary.variant:
        return Dictionary(FeatureBasis.from_dict(d["basis"]), d["weights"], schedule, d.get("clamp"))
    if kind == Mlp.variant:
        return Mlp(d["layer_dims"], d["params"], schedule, d.get("activation", "tanh"))
    raise ConfigurationError(f"unknown score variant {kind!r}")


__all__ = [
    "Dataset",
    "ScoreModel",
    "ParametricModel",
    "AnalyticGaussian",
    "GaussianMixtureScore",
    "EmpiricalMixture",
    "FeatureBasis",
    "Dictionary",
    "Mlp",
    "EMBED_DIM",
    "evaluate",
    "param_gradient",
    "log_softmax_posterior",
    "model_from_dict",
    "project_clamp",
    "time_embedding",
]
