"""Score-stability estimates, generalisation-gap measurements and checks of
the supporting inequalities (Harnack, ball concentration, ERM averaging)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .jsonio import stable_hash
from .losses import draw_paired, dsm_values, estimate_csm, sm_values
from .parallel import parallel_map
from .process import Schedule, TimeWeighting
from .scores import Dataset, EmpiricalMixture, ScoreModel
from .seeding import SeedLike, derive, stream
from .training import ErmTrainer, Trainer, coupled_train

LABEL = "coupling upper bound"
REPLICATE_HEADER = ["replicate", "index", "eps_sq", "dsm_emp", "dsm_pop", "sm_emp", "sm_pop", "divergence_step"]


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ValueError("std_error must be non-negative")

    @classmethod
    def of(cls, values) -> "Estimate":
        v = np.asarray(values, dtype=np.float64)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return cls(float(v.mean()), se)

    def to_dict(self) -> dict:
        return {"value": self.value, "std_error": self.std_error}


def sqrt_estimate(e: Estimate) -> Estimate:
    """Delta-method square root; the standard error is 0 at a zero mean."""
    v = max(e.value, 0.0)
    r = math.sqrt(v)
    return Estimate(r, e.std_error / (2 * r) if r > 0 else 0.0)


# --------------------------------------------------------------------------
# replicates


@dataclass(frozen=True)
class _Job:
    trainer: Trainer
    sampler: object
    N: int
    schedule: Schedule
    weighting: TimeWeighting
    n_mc: int
    root: np.random.SeedSequence
    replicate: int
    index: Optional[int]
    identical: bool
    erm_lhs: bool
    control: Optional[ScoreModel]


@dataclass(frozen=True)
class ReplicateValues:
    replicate: int
    index: int
    eps_sq: float
    dsm_emp: float
    dsm_pop: float
    sm_emp: float
    sm_pop: float
    divergence_step: Optional[int]
    erm_lhs: float = float("nan")

    def row(self) -> list:
        div = "" if self.divergence_step is None else self.divergence_step
        return [self.replicate, self.index] + [repr(float(v)) for v in (self.eps_sq, self.dsm_emp, self.dsm_pop, self.sm_emp, self.sm_pop)] + [div]


def _conditional_distance(a: ScoreModel, b: ScoreModel, x_tilde: np.ndarray, job: _Job, seed) -> float:
    """Monte-Carlo of the weighted L2 distance between a and b given X_0 = x_tilde."""
    if a is b:
        return 0.0
    draws = draw_paired(Dataset(x_tilde[None, :]), job.schedule, job.weighting, job.n_mc, seed)
    X, t, _, _ = draws.states(job.schedule)
    diff = a._eval(X, t) - b._eval(X, t)
    return float(np.mean(np.einsum("ij,ij->i", diff, diff)))


def _run_replicate(job: _Job) -> ReplicateValues:
    root = job.root
    rng_data = stream(root, "dataset")
    S = Dataset(np.asarray(job.sampler.sample(job.N, rng_data), dtype=np.float64))
    i = int(stream(root, "index").integers(0, job.N)) if job.index is None else int(job.index)
    x_tilde = S.points[i].copy() if job.identical else np.asarray(job.sampler.sample(1, stream(root, "replacement")), dtype=np.float64)[0]
    Si = S.replace(i, x_tilde)
    res = coupled_train(S, Si, job.trainer, derive(root, "train"))
    s_hat = res.model_a
    s_hat_i = job.control if job.control is not None else res.model_b
    eps_sq = _conditional_distance(s_hat, s_hat_i, x_tilde, job, derive(root, "stability"))
    loss_seed = derive(root, "loss")
    d_emp = draw_paired(S, job.schedule, job.weighting, job.n_mc, loss_seed)
    d_pop = draw_paired(job.sampler, job.schedule, job.weighting, job.n_mc, loss_seed)
    dsm_emp = float(dsm_values(s_hat, d_emp, job.schedule).mean())
    dsm_pop = float(dsm_values(s_hat, d_pop, job.schedule).mean())
    sm_emp = float(sm_values(s_hat, EmpiricalMixture(S, job.schedule), d_emp, job.schedule).mean())
    exact = job.sampler.exact_score(job.schedule) if hasattr(job.sampler, "exact_score") else None
    sm_pop = float(sm_values(s_hat, exact, d_pop, job.schedule).mean()) if exact is not None else float("nan")
    lhs = float("nan")
    if job.erm_lhs:
        if s_hat is s_hat_i:
            lhs = 0.0
        else:
            X, t, _, _ = d_emp.states(job.schedule)
            diff = s_hat._eval(X, t) - s_hat_i._eval(X, t)
            lhs = float(np.mean(np.einsum("ij,ij->i", diff, diff)))
    return ReplicateValues(job.replicate, i, eps_sq, dsm_emp, dsm_pop, sm_emp, sm_pop, res.divergence_step, lhs)


def _replicates(trainer, sampler, N, schedule, weighting, n_outer, n_mc, seed, jobs, index, identical, erm_lhs=False, control=None):
    if N < 1 or n_outer < 1:
        raise ConfigurationError("N and n_outer must be >= 1")
    if index is not None and not 0 <= index < N:
        raise ConfigurationError(f"index {index} outside [0, {N})")
    weighting.validate(schedule)
    work = [
        _Job(trainer, sampler, N, schedule, weighting, n_mc, derive(seed, "replicate", r), r, index, identical, erm_lhs, control)
        for r in range(n_outer)
    ]
    return parallel_map(_run_replicate, work, jobs)


# --------------------------------------------------------------------------
# report


@dataclass
class StabilityReport:
    """Shared-randomness coupling estimate of the stability constant and the gaps it bounds."""

    eps_stab_sq: Estimate
    gap_dsm_sqrt: Estimate
    gap_sm: Estimate
    dsm_emp: Estimate
    dsm_pop: Estimate
    n_datasets: int
    n_replacements: int
    config_hash: str
    config: dict = field(default_factory=dict)
    replicates: list = field(default_factory=list)
    label: str = LABEL

    def __post_init__(self):
        if self.eps_stab_sq.value < 0:
            raise ContractViolation("eps_stab_sq must be non-negative")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config_hash": self.config_hash,
            "config": self.config,
            "n_datasets": self.n_datasets,
            "n_replacements": self.n_replacements,
            "eps_stab_sq": self.eps_stab_sq.to_dict(),
            "gap_dsm_sqrt": self.gap_dsm_sqrt.to_dict(),
            "gap_sm": self.gap_sm.to_dict(),
            "dsm_emp": self.dsm_emp.to_dict(),
            "dsm_pop": self.dsm_pop.to_dict(),
        }

    def replicates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(REPLICATE_HEADER)
        for r in self.replicates:
            w.writerow(r.row())
        return buf.getvalue()


def _report(values: list[ReplicateValues], config: dict, config_hash: str | None) -> StabilityReport:
    eps = np.array([v.eps_sq for v in values])
    a = np.array([v.dsm_emp for v in values])
    b = np.array([v.dsm_pop for v in values])
    A, B = Estimate.of(a), Estimate.of(b)
    ra, rb = math.sqrt(max(A.value, 0.0)), math.sqrt(max(B.value, 0.0))
    # paired delta method on sqrt(mean b) - sqrt(mean a)
    lin = (b / (2 * rb) if rb > 0 else 0 * b) - (a / (2 * ra) if ra > 0 else 0 * a)
    gap = Estimate(abs(rb - ra), Estimate.of(lin).std_error)
    sm_diff = np.array([v.sm_pop - v.sm_emp for v in values])
    gap_sm = Estimate.of(sm_diff) if np.all(np.isfinite(sm_diff)) else Estimate(float("nan"), 0.0)
    h = config_hash if config_hash is not None else stable_hash(config)
    return StabilityReport(Estimate.of(eps), gap, gap_sm, A, B, len(values), len(values), h, config, values)


def estimate_score_stability(
    algorithm: Trainer,
    data_sampler,
    N: int,
    n_outer: int,
    n_mc: int,
    schedule: Schedule,
    weighting: TimeWeighting,
    seed: SeedLike,
    jobs: int = 1,
    index: int | None = None,
    identical: bool = False,
    config_hash: str | None = None,
) -> StabilityReport:
    """Per replicate: draw S and x_tilde, train on S and S^i with shared randomness,
    then estimate the distance integrand under X_t | X_0 = x_tilde and both losses.

    ``index`` fixes the replaced position (uniform otherwise); ``identical``
    forces x_tilde = x_i.
    """
    values = _replicates(algorithm, data_sampler, N, schedule, weighting, n_outer, n_mc, seed, jobs, index, identical)
    config = {
        "algorithm": algorithm.describe(),
        "data": data_sampler.to_dict() if hasattr(data_sampler, "to_dict") else repr(data_sampler),
        "N": N,
        "n_outer": n_outer,
        "n_mc": n_mc,
        "schedule": schedule.to_dict(),
        "weighting": weighting.to_dict(),
        "seed": seed if isinstance(seed, int) else repr(seed),
        "index": index,
        "identical": identical,
    }
    return _report(values, config, config_hash)


@dataclass(frozen=True)
class GeneralisationVerdict:
    dsm_pass: bool
    sm_pass: bool
    dsm_lhs: float
    dsm_rhs: float
    dsm_slack: float
    dsm_tolerance: float
    sm_lhs: float
    sm_rhs: float
    sm_slack: float
    sm_tolerance: float

    @property
    def passed(self) -> bool:
        return self.dsm_pass and self.sm_pass

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__} | {"passed": self.passed}


def verify_generalisation_bound(report: StabilityReport, stability: StabilityReport | None = None) -> GeneralisationVerdict:
    """Check both gap inequalities with a 3 combined std-error allowance.

    ``stability`` supplies the stability constant from a separate report of
    the same configuration; by default ``report`` provides both sides.
    """
    src = report if stability is None else stability
    if src.config_hash != report.config_hash:
        raise ContractViolation("reports come from different configurations")
    eps = sqrt_estimate(src.eps_stab_sq)
    g = report.gap_dsm_sqrt
    tol1 = 3 * math.hypot(g.std_error, eps.std_error)
    dsm_rhs = eps.value
    dsm_pass = g.value <= dsm_rhs + tol1
    gs = report.gap_sm
    if math.isnan(gs.value):
        sm_pass, sm_rhs, tol2 = True, float("nan"), float("nan")
    else:
        e2 = src.eps_stab_sq
        D = report.dsm_emp
        rD = math.sqrt(max(D.value, 0.0))
        e = eps.value
        sm_rhs = 2 * e * rD + e2.value
        d_e2 = (rD / e + 1.0) if e > 0 else 1.0
        d_D = e / rD if rD > 0 else 0.0
        tol2 = 3 * math.sqrt(gs.std_error**2 + (d_e2 * e2.std_error) ** 2 + (d_D * D.std_error) ** 2)
        sm_pass = gs.value <= sm_rhs + tol2
    return GeneralisationVerdict(
        bool(dsm_pass),
        bool(sm_pass),
        g.value,
        dsm_rhs,
        dsm_rhs + tol1 - g.value,
        tol1,
        gs.value,
        sm_rhs,
        sm_rhs + tol2 - gs.value if not math.isnan(gs.value) else float("nan"),
        tol2,
    )


# --------------------------------------------------------------------------
# Harnack inequality


@dataclass(frozen=True)
class HarnackResult:
    trials: int
    violations: int
    max_excess_z: float
    min_ratio: float

    def to_dict(self) -> dict:
        return {"trials": self.trials, "violations": self.violations, "max_excess_z": self.max_excess_z, "min_ratio": self.min_ratio}


def harnack_test_function(rng: np.random.Generator, d: int):
    """Random squared affine polynomial times a Gaussian envelope."""
    b0 = rng.normal()
    b = rng.normal(size=d)
    c = rng.normal(size=d)
    w = rng.uniform(0.3, 2.0)

    def phi(Z):
        poly = b0 + Z @ b
        dz = Z - c
        return poly * poly * np.exp(-np.einsum("ij,ij->i", dz, dz) / (2 * w * w))

    return phi


def harnack_sides(schedule: Schedule, t: float, p: float, phi: Callable, x, y, xi: np.ndarray):
    """Monte-Carlo (lhs, se_lhs, rhs, se_rhs) with shared Gaussian draws."""
    mu = float(schedule.mean_scale(t))
    s2 = float(schedule.var(t))
    s = math.sqrt(s2)
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    fx = phi(mu * x + s * xi)
    fy = phi(mu * y + s * xi) ** p
    n = xi.shape[0]
    lhs, se_l = float(fx.mean()), float(fx.std(ddof=1) / math.sqrt(n))
    m, se_m = float(fy.mean()), float(fy.std(ddof=1) / math.sqrt(n))
    factor = math.exp(mu * mu * float(np.sum((x - y) ** 2)) / (2 * (p - 1) * s2))
    root = m ** (1 / p) if m > 0 else 0.0
    rhs = root * factor
    se_r = (root / (p * m)) * se_m * factor if m > 0 else 0.0
    return lhs, se_l, rhs, se_r


def check_harnack(
    schedule: Schedule,
    t: float,
    p: float,
    trials: int,
    seed: SeedLike,
    n_draws: int = 100_000,
    dim: int = 2,
    radius: float = 1.0,
    family: Callable = harnack_test_function,
    jobs: int = 1,
) -> HarnackResult:
    """Count trials where the left side exceeds the right by more than 4 combined std-errors.

    ``family(rng, dim)`` returns a positive test function acting on rows.
    """
    if not p > 1:
        raise ConfigurationError("p must exceed 1")
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    schedule.check_time(t, positive=True)
    work = [(schedule, t, p, derive(seed, "harnack", k), n_draws, dim, radius, family) for k in range(trials)]
    out = parallel_map(_harnack_trial, work, jobs)
    z = np.array([o[0] for o in out])
    ratio = np.array([o[1] for o in out])
    return HarnackResult(trials, int(np.sum(z > 4.0)), float(z.max()), float(ratio.min()))


def _in_ball(rng, d, radius):
    v = rng.normal(size=d)
    return radius * rng.random() ** (1 / d) * v / np.linalg.norm(v)


def _harnack_trial(args):
    schedule, t, p, ss, n_draws, dim, radius, family = args
    rng = stream(ss, "setup")
    phi = family(rng, dim)
    x, y = _in_ball(rng, dim, radius), _in_ball(rng, dim, radius)
    xi = stream(ss, "xi").standard_normal((n_draws, dim))
    lhs, se_l, rhs, se_r = harnack_sides(schedule, t, p, phi, x, y, xi)
    se = math.hypot(se_l, se_r)
    z = (lhs - rhs) / se if se > 0 else (math.inf if lhs > rhs else -math.inf)
    return z, rhs / lhs if lhs > 0 else math.inf


# --------------------------------------------------------------------------
# ball concentration


@dataclass(frozen=True)
class ChernoffResult:
    empirical: float
    std_error: float
    bound: float
    passed: bool
    N: int
    r: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def inverse_sqrt(u):
    return np.asarray(u, dtype=float) ** -0.5


def chernoff_bound(spec, N: int, r: float, phi: Callable = inverse_sqrt) -> float:
    c = spec.density_floor
    if c is None or not c > 0:
        raise ConfigurationError("data law has no positive density floor")
    ds = spec.intrinsic_dim
    m = c * r**ds
    return float(phi(1.0 / N)) * math.exp(-c * N * N * r**ds) + float(phi(m / 2))


def check_ball_chernoff(spec, N: int, r: float, trials: int, seed: SeedLike, phi: Callable = inverse_sqrt, enforce_preconditions: bool = True) -> ChernoffResult:
    """Monte-Carlo E[phi(empirical mass of B_r(x_i))] against the ball bound.

    ``enforce_preconditions=False`` skips the sample-size check, for
    diagnostics at radii where the bound is not claimed.
    """
    c = spec.density_floor
    if c is None or not c > 0:
        raise ConfigurationError("data law has no positive density floor")
    if not 0 < r <= spec.reach:
        raise ConfigurationError(f"r must lie in (0, reach = {spec.reach}]")
    ds = spec.intrinsic_dim
    if enforce_preconditions and N < 4.0 / (c * r**ds):
        raise ConfigurationError(f"N = {N} is below 4 / (c r^d*) = {4.0 / (c * r**ds):.3f}")
    vals = np.empty(trials)
    for k in range(trials):
        X = spec.sample(N, stream(seed, "chernoff", k))
        D2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
        mass = np.count_nonzero(D2 <= r * r, axis=1) / N
        vals[k] = float(np.mean(phi(mass)))
    e = Estimate.of(vals)
    bound = chernoff_bound(spec, N, r, phi)
    return ChernoffResult(e.value, e.std_error, bound, bool(e.value <= bound + 3 * e.std_error), N, r)


# --------------------------------------------------------------------------
# ERM averaging inequality


@dataclass(frozen=True)
class ErmIdentityResult:
    lhs: Estimate
    rhs: float
    rhs_se: float
    sm_emp: Estimate
    eps_stab_sq: Estimate
    c_sm: Estimate
    slack: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs.to_dict(),
            "rhs": self.rhs,
            "rhs_std_error": self.rhs_se,
            "sm_emp": self.sm_emp.to_dict(),
            "eps_stab_sq": self.eps_stab_sq.to_dict(),
            "c_sm": self.c_sm.to_dict(),
            "slack": self.slack,
            "passed": self.passed,
        }


def verify_erm_identity(
    data_sampler,
    N: int,
    basis,
    schedule: Schedule,
    weighting: TimeWeighting,
    n_mc: int,
    n_outer: int,
    seed: SeedLike,
    clamp: float | None = None,
    identical: bool = False,
    control: ScoreModel | None = None,
    jobs: int = 1,
) -> ErmIdentityResult:
    """Monte-Carlo both sides of the averaged ERM stability inequality.

    ``control`` replaces the model trained on S^i (negative control).
    """
    trainer = ErmTrainer(basis, schedule, weighting, n_mc, clamp)
    values = _replicates(trainer, data_sampler, N, schedule, weighting, n_outer, n_mc, seed, jobs, None, identical, True, control)
    lhs = Estimate.of([v.erm_lhs for v in values])
    sm = Estimate.of([v.sm_emp for v in values])
    e2 = Estimate.of([v.eps_sq for v in values])
    csm_ = estimate_csm(data_sampler, schedule, weighting, n_mc, 1, derive(seed, "csm"))
    C = Estimate(csm_.value, csm_.std_error)
    e, rC = sqrt_estimate(e2), sqrt_estimate(C)
    rhs = 8 * sm.value + (8 / N) * e.value * (rC.value + e.value)
    d_e = (8 / N) * (rC.value + 2 * e.value)
    d_rC = (8 / N) * e.value
    rhs_se = math.sqrt((8 * sm.std_error) ** 2 + (d_e * e.std_error) ** 2 + (d_rC * rC.std_error) ** 2)
    tol = 3 * math.hypot(lhs.std_error, rhs_se)
    slack = rhs + tol - lhs.value
    return ErmIdentityResult(lhs, rhs, rhs_se, sm, e2, C, slack, bool(slack >= 0))


__all__ = [
    "Estimate",
    "StabilityReport",
    "ReplicateValues",
    "GeneralisationVerdict",
    "HarnackResult",
    "ChernoffResult",
    "ErmIdentityResult",
    "estimate_score_stability",
    "verify_generalisation_bound",
    "check_harnack",
    "harnack_sides",
    "harnack_test_function",
    "check_ball_chernoff",
    "chernoff_bound",
    "inverse_sqrt",
    "verify_erm_identity",
    "LABEL",
]
