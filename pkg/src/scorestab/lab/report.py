"""Cross-run comparison tables built from JSON reports."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass

from scipy.stats import spearmanr

from ..errors import ConfigurationError
from ..jsonio import stable_hash

# pipeline -> (axis path in the config, metric path in the result, metric name)
AXES = {
    "stability": (("data", "N"), ("eps_stab_sq",), "eps_stab_sq"),
    "sample": (("schedule", "early_stop"), ("fraction_within",), "fraction_within"),
    "coupling": (("coupling", "eta"), ("curve", "factor"), "contraction_factor"),
    "train": (("data", "N"), ("losses", "dsm_pop"), "dsm_pop"),
    "verify": (("seed",), ("passed",), "passed"),
}
HEADER = ["report", "config_hash", "axis", "axis_value", "metric", "value", "std_error", "passed"]


def _get(d, path):
    for k in path:
        d = d[k]
    return d


def family_key(report: dict) -> str:
    """Hash of the configuration with the sweep axis and the seed removed."""
    cfg = copy.deepcopy(report["config"])
    axis = AXES[report["pipeline"]][0]
    cfg["seed"] = None
    node = cfg
    for k in axis[:-1]:
        node = node[k]
    node[axis[-1]] = None
    return stable_hash({"pipeline": report["pipeline"], "config": cfg})


@dataclass
class Summary:
    rows: list
    monotone: str | None
    spearman_rho: float | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(HEADER)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
        lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in self.rows]
        if self.monotone is not None:
            lines += ["", f"Spearman rho over the axis: {self.spearman_rho:.4f} ({self.monotone})"]
        return "\n".join(lines) + "\n"


def load_report(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read report {path}: {exc}") from exc
    if not isinstance(d, dict) or d.get("pipeline") not in AXES or "config" not in d:
        raise ConfigurationError(f"{path} is not a run report")
    return d


def emit_summary(paths) -> Summary:
    """One row per report, sorted by the family's axis; refuses mixed families."""
    paths = list(paths)
    if not paths:
        raise ConfigurationError("summarize needs at least one report")
    reports = [load_report(p) for p in paths]
    keys = {family_key(r) for r in reports}
    if len(keys) > 1:
        listing = ", ".join(f"{p}: {r['config_hash']}" for p, r in zip(paths, reports))
        raise ConfigurationError(f"reports come from different experiment families ({listing})")
    rows = []
    for p, r in zip(paths, reports):
        axis, metric, name = AXES[r["pipeline"]]
        m = _get(r["result"], metric)
        value, se = (m["value"], m["std_error"]) if isinstance(m, dict) else (m, "")
        rows.append([str(p), r["config_hash"], ".".join(axis), _get(r["config"], axis), name, value, se, r["passed"]])
    rows.sort(key=lambda row: (row[3], row[0]))
    monotone, rho = None, None
    xs = [row[3] for row in rows]
    ys = [float(row[5]) for row in rows]
    if len(rows) >= 3 and len(set(xs)) > 1 and len(set(ys)) > 1:
        rho = float(spearmanr(xs, ys).statistic)
        if math.isclose(rho, -1.0):
            monotone = "decreasing"
        elif math.isclose(rho, 1.0):
            monotone = "increasing"
        else:
            monotone = "not monotone"
    return Summary(rows, monotone, rho)
