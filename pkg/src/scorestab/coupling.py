"""Reflection / maximal / synchronous couplings of discrete-time diffusions
with anisotropic volatility, the concave metric f, and contraction curves."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError, ContractViolation
from .seeding import SeedLike, as_generator, stream

log = logging.getLogger(__name__)

SYNC, REFLECT, MERGE = 0, 1, 2
BRANCH_NAMES = {SYNC: "synchronous", REFLECT: "reflection", MERGE: "merge"}


def _sym_funcs(G: np.ndarray, rel_tol: float = 1e-10):
    """Pseudo-inverse, square root and pseudo-inverse square root of a PSD matrix."""
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    top = max(float(np.abs(vals).max()), 0.0) if vals.size else 0.0
    keep = vals > rel_tol * top
    v = np.where(keep, vals, 0.0)
    inv = np.where(keep, 1.0 / np.where(keep, vals, 1.0), 0.0)
    sqrt = (vecs * np.sqrt(v)) @ vecs.T
    pinv = (vecs * inv) @ vecs.T
    pinv_sqrt = (vecs * np.sqrt(inv)) @ vecs.T
    return pinv, sqrt, pinv_sqrt, float(vals.min()) if vals.size else 0.0


@dataclass(frozen=True)
class CouplingConfig:
    """Noise floor G and step parameters.

    ``m`` is the half-width of the optional reflection window on the
    standardised coordinate; None disables the window. ``excess_noise``
    selects how the noise above the floor is generated: ``"root"`` uses
    (sigma sigma^T - G)^{1/2} Z', which keeps the one-step law exact;
    ``"literal"`` uses (sigma - G^{1/2}) Z'.
    """

    G: np.ndarray
    eta: float
    lambda_decay: float
    trunc_parallel: float = math.inf
    trunc_perp: float = math.inf
    switch_radius: float = math.inf
    m: Optional[float] = None
    excess_noise: str = "root"
    G_pinv: np.ndarray = field(init=False, repr=False, compare=False)
    G_sqrt: np.ndarray = field(init=False, repr=False, compare=False)
    G_sqrt_pinv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        if G.shape[0] != G.shape[1] or not np.allclose(G, G.T, rtol=0, atol=1e-12 * max(1.0, np.abs(G).max())):
            raise ConfigurationError("G must be a symmetric matrix")
        pinv, sqrt, pinv_sqrt, lo = _sym_funcs(G)
        if lo < -1e-12:
            raise ConfigurationError(f"G has negative eigenvalue {lo:.3e}")
        if not self.eta > 0 or not self.lambda_decay > 0:
            raise ConfigurationError("eta and lambda_decay must be positive")
        if not self.switch_radius > 0:
            raise ConfigurationError("switch_radius must be positive")
        if not (self.trunc_parallel > 0 and self.trunc_perp > 0):
            raise ConfigurationError("truncation radii must be positive")
        if self.m is not None and not self.m > 0:
            raise ConfigurationError("window m must be positive or None")
        if self.excess_noise not in ("root", "literal"):
            raise ConfigurationError(f"unknown excess_noise {self.excess_noise!r}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "G_pinv", pinv)
        object.__setattr__(self, "G_sqrt", sqrt)
        object.__setattr__(self, "G_sqrt_pinv", pinv_sqrt)

    @property
    def dim(self) -> int:
        return self.G.shape[0]

    @classmethod
    def paper_window(cls, G, eta, lambda_decay, **kw) -> "CouplingConfig":
        """Configuration with the window m = sqrt(eta)/2."""
        return cls(G, eta, lambda_decay, m=math.sqrt(eta) / 2, **kw)


def seminorm(config: CouplingConfig, v) -> float | np.ndarray:
    """sqrt(v^T G^+ v); rows of a 2-D input are handled independently."""
    v = np.asarray(v, dtype=np.float64)
    q = np.einsum("...i,ij,...j->...", v, config.G_pinv, v)
    return np.sqrt(np.maximum(q, 0.0))


# --------------------------------------------------------------------------
# concave metric


@dataclass(frozen=True)
class FMetric:
    a: float
    r1: float
    r2: float

    def __post_init__(self):
        if not (self.a > 0 and self.r1 > 0 and self.r2 > self.r1):
            raise ConfigurationError("FMetric needs a > 0 and 0 < r1 < r2")


def f_metric(fm: FMetric, r):
    """Concave exponential profile up to r2, quadratic continuation beyond."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("f is defined for r >= 0")
    a, r2 = fm.a, fm.r2
    inner = -np.expm1(-a * np.minimum(r, r2)) / a
    outer = -math.expm1(-a * r2) / a + math.exp(-a * r2) / (2 * r2) * (r * r - r2 * r2)
    out = np.where(r <= r2, inner, outer)
    return float(out) if out.ndim == 0 else out


def f_metric_derivative(fm: FMetric, r):
    r = np.asarray(r, dtype=np.float64)
    out = np.where(r <= fm.r2, np.exp(-fm.a * np.minimum(r, fm.r2)), math.exp(-fm.a * fm.r2) * r / fm.r2)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# one-dimensional coupling


def oned_coupling(t, s, eta: float, m_tilde: float | None, r1: float, z, u):
    """Reflection / maximal coupling of N(t, eta) and N(s, eta).

    ``z`` are standard normals and ``u`` uniforms; ``m_tilde`` None means no
    window. Returns (t', s').
    """
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    se = math.sqrt(eta)
    tp = t + se * z
    logratio = (-(tp - s) ** 2 + (tp - t) ** 2) / (2 * eta)
    ok = np.abs(t - s) <= r1
    if m_tilde is not None:
        ok = ok & (np.abs(se * z) < m_tilde)
    with np.errstate(divide="ignore"):
        merge = ok & (np.log(u) <= logratio)
    refl = ok & ~merge
    sp = np.where(merge, tp, np.where(refl, s - se * z, s + se * z))
    return tp, sp


@dataclass(frozen=True)
class OnedDiagnostic:
    r: float
    mean_abs: float
    std_err: float
    second_moment: float
    c0_hat: float


def oned_diagnostic(t: float, s: float, eta: float, m_tilde: float | None, r1: float, n: int, seed: SeedLike) -> OnedDiagnostic:
    """Monte-Carlo E|t'-s'| and the fitted constant of the second-moment bound."""
    rng = stream(seed, "oned")
    z = rng.standard_normal(n)
    u = rng.random(n)
    tp, sp = oned_coupling(np.full(n, t), np.full(n, s), eta, m_tilde, r1, z, u)
    d = np.abs(tp - sp)
    r = abs(t - s)
    se = math.sqrt(eta)
    lo, hi = (0.0, r + se) if r <= se else (r - se, r)
    inside = (d > lo) & (d < hi)
    m2 = float(np.mean((d - r) ** 2 * inside))
    denom = 0.5 * min(se, r) * se
    return OnedDiagnostic(r, float(d.mean()), float(d.std(ddof=1) / math.sqrt(n)), m2, m2 / denom if denom > 0 else math.inf)


def reflection_matrix(config: CouplingConfig, e: np.ndarray) -> np.ndarray:
    """I - 2 u u^T with u = (G^{1/2})^+ e for a G^+-unit vector e."""
    u = config.G_sqrt_pinv @ np.asarray(e, dtype=np.float64)
    return np.eye(config.dim) - 2.0 * np.outer(u, u)


# --------------------------------------------------------------------------
# multivariate coupled step


def _drift(fn, X):
    if fn is None:
        return np.zeros_like(X)
    out = np.asarray(fn(X), dtype=np.float64)
    return np.broadcast_to(out, X.shape)


def _vol(fn, X, d):
    if fn is None:
        raise ContractViolation("a volatility is required")
    if callable(fn):
        S = np.asarray(fn(X), dtype=np.float64)
    else:
        S = np.asarray(fn, dtype=np.float64)
    if S.shape == (d, d):
        return S, True
    if S.shape == (X.shape[0], d, d):
        return S, False
    raise ContractViolation(f"volatility has shape {S.shape}")


def _excess(S, const, config: CouplingConfig):
    """Matrix applied to Z' for volatility S (one matrix or a stack)."""
    if config.excess_noise == "literal":
        return S - config.G_sqrt
    M = S @ np.swapaxes(S, -1, -2) - config.G
    vals, vecs = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    lo = float(vals.min())
    if lo < -1e-10:
        raise ContractViolation(f"volatility below the noise floor (min eigenvalue {lo:.3e})")
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return root


def _apply(A, Z, const):
    return Z @ A.T if const else np.einsum("rij,rj->ri", A, Z)


def truncated_noise(xi: np.ndarray, v: np.ndarray, config: CouplingConfig) -> np.ndarray:
    """Split xi along v (G^+-unit rows) and its complement, clip each in the seminorm."""
    proj = np.einsum("ri,ri->r", v, xi)[:, None] * v
    perp = xi - proj
    n1 = seminorm(config, proj)
    n2 = seminorm(config, perp)
    c1 = np.where(n1 > config.trunc_parallel, config.trunc_parallel / np.where(n1 > 0, n1, 1.0), 1.0)
    c2 = np.where(n2 > config.trunc_perp, config.trunc_perp / np.where(n2 > 0, n2, 1.0), 1.0)
    return c1[:, None] * proj + c2[:, None] * perp


@dataclass
class StepOutcome:
    x: np.ndarray
    y: np.ndarray
    branch: np.ndarray
    r_hat: np.ndarray
    z: np.ndarray


def coupled_step_batch(X, Y, drift_b, drift_b_tilde, vol_sigma, vol_sigma_tilde, config: CouplingConfig, rng: np.random.Generator, truncated: bool = False) -> StepOutcome:
    """One coupled step for R independent pairs (rows of X and Y).

    Every call draws Z' (R, d), Z (R, d) and a uniform (R,) in that order,
    whatever branch fires.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    R, d = X.shape
    if d != config.dim:
        raise ContractViolation("state dimension does not match G")
    Zp = rng.standard_normal((R, d))
    Z = rng.standard_normal((R, d))
    U = rng.random(R)
    eta, se = config.eta, math.sqrt(config.eta)
    decay = 1.0 - eta * config.lambda_decay
    xt = decay * X + eta * _drift(drift_b, X)
    yt = decay * Y + eta * _drift(drift_b_tilde, Y)
    if truncated:
        diff_t = xt - yt
        rt = seminorm(config, diff_t)
        v = np.where(rt[:, None] > 0, diff_t / np.where(rt > 0, rt, 1.0)[:, None], 0.0)
        Zp = truncated_noise(Zp, v, config)
    Sx, cx = _vol(vol_sigma, X, d)
    Sy, cy = _vol(vol_sigma_tilde, Y, d)
    xh = xt + se * _apply(_excess(Sx, cx, config), Zp, cx)
    yh = yt + se * _apply(_excess(Sy, cy, config), Zp, cy)
    noise = se * Z @ config.G_sqrt.T
    Xn = xh + noise
    diff = xh - yh
    rh = seminorm(config, diff)
    safe = np.where(rh > 0, rh, 1.0)
    e = diff / safe[:, None]
    u = e @ config.G_sqrt_pinv.T
    z = np.einsum("ri,ri->r", u, Z)
    ok = (rh > 0) & (rh <= config.switch_radius)
    if config.m is not None:
        ok &= z * z < config.m * config.m / eta
    logratio = -rh * rh / (2 * eta) - rh * z / se
    with np.errstate(divide="ignore"):
        merge = ok & (np.log(U) <= logratio)
    refl = ok & ~merge
    # G^{1/2}(I - 2 u u^T) Z = G^{1/2} Z - 2 z G^{1/2} u
    Gu = u @ config.G_sqrt.T
    Yr = yh + noise - 2.0 * se * z[:, None] * Gu
    Ys = yh + noise
    Yn = np.where(merge[:, None], Xn, np.where(refl[:, None], Yr, Ys))
    branch = np.where(merge, MERGE, np.where(refl, REFLECT, SYNC))
    if np.any(rh == 0) and np.any(np.any(diff != 0, axis=1) & (rh == 0)):
        log.debug("difference lies in the kernel of G; synchronous step used")
    return StepOutcome(Xn, Yn, branch, rh, z)


def coupled_step(x, y, drift_b, drift_b_tilde, vol_sigma, vol_sigma_tilde, config: CouplingConfig, seed: SeedLike, truncated: bool = False):
    """Single coupled step; returns (x', y', branch name)."""
    out = coupled_step_batch(
        np.asarray(x, dtype=np.float64)[None, :],
        np.asarray(y, dtype=np.float64)[None, :],
        drift_b,
        drift_b_tilde,
        vol_sigma,
        vol_sigma_tilde,
        config,
        as_generator(seed),
        truncated,
    )
    return out.x[0], out.y[0], BRANCH_NAMES[int(out.branch[0])]


# --------------------------------------------------------------------------
# contraction curves


@dataclass
class CoupledProcess:
    """Two discrete diffusions sharing eta, lambda and the floor G."""

    config: CouplingConfig
    x0: np.ndarray
    y0: np.ndarray
    drift_b: Optional[Callable] = None
    drift_b_tilde: Optional[Callable] = None
    vol_sigma: object = None
    vol_sigma_tilde: object = None
    truncated: bool = False

    def __post_init__(self):
        if self.vol_sigma is None:
            self.vol_sigma = self.config.G_sqrt
        if self.vol_sigma_tilde is None:
            self.vol_sigma_tilde = self.vol_sigma

    @classmethod
    def pure_decay(cls, G, eta, lam, x0, y0, **kw) -> "CoupledProcess":
        cfg = CouplingConfig(np.asarray(G, dtype=float), eta, lam, **kw)
        return cls(cfg, np.asarray(x0, dtype=float), np.asarray(y0, dtype=float))

    def describe(self) -> dict:
        return {
            "eta": self.config.eta,
            "lambda": self.config.lambda_decay,
            "G": self.config.G.tolist(),
            "x0": np.asarray(self.x0).tolist(),
            "y0": np.asarray(self.y0).tolist(),
            "window": self.config.m,
            "switch_radius": None if math.isinf(self.config.switch_radius) else self.config.switch_radius,
            "truncated": self.truncated,
        }


@dataclass
class ContractionCurve:
    mean_f: np.ndarray
    std_err: np.ndarray
    counts: np.ndarray  # (steps, 3): sync, reflect, merge
    factor: float
    floor: float
    floor_se: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["step", "mean_f", "std_err", "branch_counts_sync", "branch_counts_reflect", "branch_counts_merge"])
        for k in range(self.mean_f.size):
            c = self.counts[k]
            w.writerow([k, repr(float(self.mean_f[k])), repr(float(self.std_err[k])), int(c[0]), int(c[1]), int(c[2])])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "factor": self.factor,
            "floor": self.floor,
            "floor_se": self.floor_se,
            "final_mean_f": float(self.mean_f[-1]),
            "steps": int(self.mean_f.size - 1),
        }


def fit_geometric(curve: np.ndarray, floor: float, rel_cut: float = 0.02) -> float:
    """Per-step factor from a least-squares line through log(curve - floor).

    Uses the initial stretch where the de-biased curve stays above
    ``rel_cut`` times its starting value.
    """
    deb = np.asarray(curve, dtype=np.float64) - floor
    if deb.size < 2 or deb[0] <= 0:
        return float("nan")
    ok = deb > rel_cut * deb[0]
    end = int(np.argmin(ok)) if not ok.all() else deb.size
    if end < 2:
        end = 2
    k = np.arange(end)
    y = np.log(np.maximum(deb[:end], 1e-300))
    slope = np.polyfit(k, y, 1)[0]
    return float(math.exp(slope))


def measure_contraction(instance: CoupledProcess, fm: FMetric, horizon_steps: int, replicates: int, seed: SeedLike, floor_fraction: float = 0.2) -> ContractionCurve:
    """Monte-Carlo E[f(R_k)] for k = 0..horizon_steps with R in the G^+ seminorm."""
    cfg = instance.config
    X = np.tile(np.asarray(instance.x0, dtype=float), (replicates, 1))
    Y = np.tile(np.asarray(instance.y0, dtype=float), (replicates, 1))
    rng = stream(seed, "contraction")
    means = np.zeros(horizon_steps + 1)
    ses = np.zeros(horizon_steps + 1)
    counts = np.zeros((horizon_steps + 1, 3), dtype=np.int64)

    def record(k):
        fv = f_metric(fm, seminorm(cfg, X - Y))
        means[k] = fv.mean()
        ses[k] = fv.std(ddof=1) / math.sqrt(replicates) if replicates > 1 else 0.0

    record(0)
    for k in range(1, horizon_steps + 1):
        out = coupled_step_batch(
            X, Y, instance.drift_b, instance.drift_b_tilde, instance.vol_sigma, instance.vol_sigma_tilde, cfg, rng, instance.truncated
        )
        X, Y = out.x, out.y
        counts[k] = np.bincount(out.branch, minlength=3)
        record(k)
    tail = max(1, int(round(floor_fraction * (horizon_steps + 1))))
    floor = float(means[-tail:].mean())
    floor_se = float(np.sqrt(np.mean(ses[-tail:] ** 2)))
    factor = fit_geometric(means, floor)
    return ContractionCurve(means, ses, counts, factor, floor, floor_se)


# --------------------------------------------------------------------------
# Gaussian parameter noise coupled by reflection (used by training)


class ReflectionNoise:
    """Couple theta' = (1 - eta lam) theta - eta m + eta S^{1/2} xi for two trajectories.

    The common floor is G = c eta min(lambda_min(S_a), lambda_min(S_b)) I
    with c = ``floor_fraction``; when it vanishes the step is synchronous.
    """

    def __init__(self, n: int, floor_fraction: float = 0.999):
        self.n = n
        self.floor_fraction = floor_fraction
        self.counts = {"synchronous": 0, "reflection": 0, "merge": 0}

    def step(self, thetas, moments, eta, lam, zeta, extra):
        n = self.n
        Zp, Z, U = zeta, extra[:n], float(ndtr(extra[n]))
        decay = 1.0 - eta * lam
        lo = min(float(np.linalg.eigvalsh(m.cov)[0]) for m in moments)
        g2 = self.floor_fraction * eta * max(lo, 0.0)
        xs = []
        for th, mom in zip(thetas, moments):
            xt = decay * th - eta * mom.mean
            excess = eta * mom.cov - g2 * np.eye(n)
            vals, vecs = np.linalg.eigh(0.5 * (excess + excess.T))
            root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
            xs.append(xt + math.sqrt(eta) * (root @ Zp))
        xh, yh = xs
        g = math.sqrt(g2)
        se = math.sqrt(eta)
        Xn = xh + se * g * Z
        if g == 0.0 or np.array_equal(xh, yh):
            self.counts["synchronous"] += 1
            return [Xn, yh + se * g * Z]
        diff = xh - yh
        rh = float(np.linalg.norm(diff)) / g
        u = diff / (rh * g)  # (G^{1/2})^+ e for the G^+-unit direction e = diff / rh
        z = float(u @ Z)
        logratio = -rh * rh / (2 * eta) - rh * z / se
        if U == 0.0 or math.log(U) <= logratio:
            self.counts["merge"] += 1
            return [Xn, Xn.copy()]
        self.counts["reflection"] += 1
        return [Xn, yh + se * g * (Z - 2.0 * z * u)]


__all__ = [
    "CouplingConfig",
    "FMetric",
    "CoupledProcess",
    "ContractionCurve",
    "StepOutcome",
    "ReflectionNoise",
    "seminorm",
    "f_metric",
    "f_metric_derivative",
    "oned_coupling",
    "oned_diagnostic",
    "OnedDiagnostic",
    "reflection_matrix",
    "coupled_step",
    "coupled_step_batch",
    "truncated_noise",
    "measure_contraction",
    "fit_geometric",
    "SYNC",
    "REFLECT",
    "MERGE",
]
