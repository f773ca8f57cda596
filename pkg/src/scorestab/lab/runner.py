"""Pipeline execution: each pipeline returns a report, a pass flag and CSV
payloads, which are written atomically into the output directory."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import os
import shutil
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from ..data import generate
from ..errors import ConfigurationError, ScoreStabError
from ..jsonio import dumps
from ..losses import estimate_dsm, estimate_sm
from ..seeding import derive
from .config import ExperimentConfig

REPORT_NAME = "report.json"


@dataclass
class RunResult:
    passed: bool
    report: dict
    files: dict = field(default_factory=dict)  # name -> text


class StageError(ScoreStabError):
    """A module error tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class _Stages:
    """Names the running stage so errors can report it."""

    def __init__(self):
        self.current = "setup"

    def __call__(self, name: str):
        self.current = name
        return self


def _dataset(cfg: ExperimentConfig):
    return generate(cfg.build_data(), cfg.data.N, derive(cfg.seed, "dataset"))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _losses(cfg, model, dataset, n_mc, seed) -> dict:
    sched, tau, spec = cfg.build_schedule(), cfg.build_weighting(), cfg.build_data()
    pairs = {
        "dsm_emp": estimate_dsm(model, dataset, sched, tau, n_mc, seed),
        "dsm_pop": estimate_dsm(model, spec, sched, tau, n_mc, seed),
        "sm_pop": estimate_sm(model, spec.exact_score(sched), spec, sched, tau, n_mc, seed),
    }
    return {k: dataclasses.asdict(v) for k, v in pairs.items()}


def run_train(cfg: ExperimentConfig, jobs: int, stage: _Stages) -> RunResult:
    from ..training import TRACE_HEADER, SgdTrainer, sgd_gaussian_run, sgd_run

    stage("data")
    ds = _dataset(cfg)
    stage("train")
    trainer = cfg.build_trainer()
    files = {}
    seed = derive(cfg.seed, "train")
    if isinstance(trainer, SgdTrainer):
        rows: list = []
        run = sgd_gaussian_run if cfg.algorithm.noise == "gaussian" else sgd_run
        model = run(trainer.init, ds, trainer.config, trainer.schedule, trainer.weighting, seed, rows)
        files["trace.csv"] = _csv(TRACE_HEADER, [[r[0], repr(r[1]), repr(r[2]), r[3], repr(r[4])] for r in rows])
    else:
        model = trainer.fit(ds, seed)
    stage("losses")
    report = {"algorithm": trainer.describe(), "losses": _losses(cfg, model, ds, cfg.stability.n_mc, derive(cfg.seed, "loss"))}
    report["model"] = model.to_dict()
    return RunResult(True, report, files)


def run_sample(cfg: ExperimentConfig, jobs: int, stage: _Stages) -> RunResult:
    from ..sampling import kappa_sweep, memorization_profile, sample_backward, sweep_csv

    stage("data")
    ds = _dataset(cfg)
    stage("train")
    model = cfg.build_trainer().fit(ds, derive(cfg.seed, "train"))
    s = cfg.sampler
    dim = cfg.data.ambient_dim
    stage("sample")
    sched = cfg.build_schedule()
    out = sample_backward(model, cfg.build_sampler(sched), derive(cfg.seed, "sample"), dim=dim)
    prof = memorization_profile(out.samples, ds)
    frac = prof.fraction_within(s.radius)
    report = {
        "num_samples": s.num_samples,
        "aborted": out.aborted,
        "radius": s.radius,
        "fraction_within": frac,
        "mean_nn_distance": float(prof.distance.mean()) if prof.distance.size else float("nan"),
        "dataset": ds.to_dict(),
    }
    files = {"samples.csv": prof.to_csv(out.samples)}
    if s.early_stops:
        stage("early_stop_sweep")
        rows = []
        for eps in s.early_stops:
            sub = dataclasses.replace(cfg, schedule=dataclasses.replace(cfg.schedule, early_stop=float(eps)))
            sch = sub.build_schedule()
            m = sub.build_trainer().fit(ds, derive(cfg.seed, "train"))
            o = sample_backward(m, cfg.build_sampler(sch), derive(cfg.seed, "sample"), dim=dim)
            p = memorization_profile(o.samples, ds)
            rows.append([repr(float(eps)), repr(p.fraction_within(s.radius)), repr(float(p.distance.mean())), o.aborted])
        files["memorization.csv"] = _csv(["early_stop", "fraction_within", "mean_nn_distance", "aborted"], rows)
        report["early_stop_sweep"] = [dict(zip(["early_stop", "fraction_within", "mean_nn_distance", "aborted"], r)) for r in rows]
    if s.kappas:
        stage("kappa_sweep")
        held = generate(cfg.build_data(), s.heldout, derive(cfg.seed, "heldout")).points
        rows = kappa_sweep(model, sched, [float(k) for k in s.kappas], held, s.num_samples, [cfg.seed])
        files["kappa_sweep.csv"] = sweep_csv(rows)
    passed = not (frac < s.min_fraction)
    report["min_fraction"] = s.min_fraction
    return RunResult(bool(passed), report, files)


def run_stability(cfg: ExperimentConfig, jobs: int, stage: _Stages) -> RunResult:
    from ..stability import estimate_score_stability, verify_generalisation_bound

    stage("stability")
    st = cfg.stability
    report = estimate_score_stability(
        cfg.build_trainer(),
        cfg.build_data(),
        cfg.data.N,
        st.n_outer,
        st.n_mc,
        cfg.build_schedule(),
        cfg.build_weighting(),
        derive(cfg.seed, "stability"),
        jobs=jobs,
        index=None if st.index < 0 else st.index,
        identical=st.identical,
        config_hash=cfg.hash,
    )
    stage("verify")
    verdict = verify_generalisation_bound(report)
    d = report.to_dict()
    d.pop("config")
    d["verdict"] = verdict.to_dict()
    return RunResult(verdict.passed, d, {"replicates.csv": report.replicates_csv()})


def run_coupling(cfg: ExperimentConfig, jobs: int, stage: _Stages) -> RunResult:
    from ..coupling import measure_contraction

    stage("coupling")
    c = cfg.coupling
    inst, fm = cfg.build_coupling()
    curve = measure_contraction(inst, fm, c.horizon_steps, c.replicates, derive(cfg.seed, "coupling"), c.floor_fraction)
    ceiling = 1 - c.eta * c.lambda_decay / 8
    d = curve.to_dict()
    report = {"instance": inst.describe(), "curve": d, "factor_ceiling": ceiling}
    if c.drift_offset > 0:
        passed = curve.floor > 3 * curve.floor_se
    else:
        passed = bool(np.isfinite(curve.factor) and curve.factor <= ceiling)
    report["passed"] = passed
    return RunResult(passed, report, {"contraction.csv": curve.to_csv()})


def run_verify(cfg: ExperimentConfig, jobs: int, stage: _Stages) -> RunResult:
    from .. import stability as stab

    v = cfg.verify
    sched, tau, spec = cfg.build_schedule(), cfg.build_weighting(), cfg.build_data()
    results = {}
    for check in v.checks:
        stage(check)
        seed = derive(cfg.seed, "verify", list(v.checks).index(check))
        if check == "generalisation":
            rep = stab.estimate_score_stability(
                cfg.build_trainer(), spec, cfg.data.N, cfg.stability.n_outer, cfg.stability.n_mc, sched, tau, seed, jobs=jobs, config_hash=cfg.hash
            )
            r = stab.verify_generalisation_bound(rep).to_dict()
        elif check == "harnack":
            h = stab.check_harnack(sched, v.harnack_t, v.harnack_p, v.harnack_trials, seed, v.harnack_draws, dim=cfg.data.ambient_dim, jobs=jobs)
            r = h.to_dict() | {"passed": h.violations == 0}
        elif check == "chernoff":
            r = stab.check_ball_chernoff(spec, v.chernoff_N, v.chernoff_r, v.chernoff_trials, seed).to_dict()
        else:
            basis = cfg.build_basis(v.erm_features)
            r = stab.verify_erm_identity(spec, v.erm_N, basis, sched, tau, v.erm_n_mc, v.erm_outer, seed, jobs=jobs).to_dict()
        results[check] = r
    passed = all(bool(r["passed"]) for r in results.values())
    return RunResult(passed, {"checks": results, "passed": passed})


RUNNERS = {"train": run_train, "sample": run_sample, "stability": run_stability, "coupling": run_coupling, "verify": run_verify}


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RunResult:
    """Execute the configured pipeline; module errors are re-raised tagged with their stage."""
    stage = _Stages()
    try:
        res = RUNNERS[cfg.pipeline](cfg, jobs, stage)
    except ScoreStabError as exc:
        if isinstance(exc, (StageError, ConfigurationError)):
            raise
        raise StageError(stage.current, exc) from exc
    digests = {name: hashlib.sha256(text.encode("utf-8")).hexdigest() for name, text in sorted(res.files.items())}
    res.report = {
        "pipeline": cfg.pipeline,
        "version": __version__,
        "config_hash": cfg.hash,
        "config": cfg.to_dict(include_output=False),
        "passed": bool(res.passed),
        "files": digests,
        "result": res.report,
    }
    return res


def write_outputs(res: RunResult, out_dir: str) -> list[str]:
    """Write the report and CSVs; on any failure nothing partial is left behind."""
    os.makedirs(out_dir, exist_ok=True)
    stage_dir = tempfile.mkdtemp(prefix=".partial-", dir=out_dir)
    names = [REPORT_NAME] + sorted(res.files)
    try:
        with open(os.path.join(stage_dir, REPORT_NAME), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps(res.report))
            fh.write("\n")
        for name, text in res.files.items():
            with open(os.path.join(stage_dir, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for name in names:
            os.replace(os.path.join(stage_dir, name), os.path.join(out_dir, name))
    finally:
        shutil.rmtree(stage_dir, ignore_errors=True)
    return [os.path.join(out_dir, n) for n in names]
