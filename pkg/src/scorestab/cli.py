"""Command-line entry point.

Exit codes: 0 all checks passed, 1 a check or stage failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import os
import sys
from importlib import resources

from .errors import ConfigurationError, ScoreStabError

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
PIPELINES = ("train", "sample", "stability", "coupling", "verify")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _jobs(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return v


def bundled_config(name: str) -> str:
    """Path of a shipped example config, e.g. ``memorize2d``."""
    ref = resources.files("scorestab") / "configs" / f"{name}.toml"
    if not ref.is_file():
        raise ConfigurationError(f"no bundled config named {name!r}")
    return str(ref)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scorestab", description="Score-stability laboratory for diffusion models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in PIPELINES:
        sp = sub.add_parser(name, help=f"run the {name} pipeline")
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--config", help="TOML experiment config")
        g.add_argument("--demo", help="name of a bundled config (e.g. memorize2d)")
        sp.add_argument("--seed", type=_u64, default=None, help="root seed (overrides the config)")
        sp.add_argument("--jobs", type=_jobs, default=1, help="worker processes")
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
    sp = sub.add_parser("summarize", help="tabulate a family of reports")
    sp.add_argument("reports", nargs="*", help="report.json files")
    sp.add_argument("--out", default=None, help="directory for summary.md and summary.csv")
    return p


def _run(args) -> int:
    from .lab.config import ExperimentConfig
    from .lab.runner import run_experiment, write_outputs

    path = args.config if args.config else bundled_config(args.demo)
    cfg = ExperimentConfig.load(path).with_overrides(args.seed, args.out)
    if cfg.pipeline != args.command:
        raise ConfigurationError(f"config describes the {cfg.pipeline!r} pipeline, not {args.command!r}")
    res = run_experiment(cfg, jobs=args.jobs)
    written = write_outputs(res, cfg.output.dir)
    status = "PASS" if res.passed else "FAIL"
    print(f"{status} {cfg.pipeline} config_hash={cfg.hash}")
    for w in written:
        print(f"  wrote {w}")
    return EXIT_PASS if res.passed else EXIT_FAIL


def _summarize(args) -> int:
    from .lab.report import emit_summary

    if not args.reports:
        raise ConfigurationError("summarize needs at least one report file")
    s = emit_summary(args.reports)
    md = s.to_markdown()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "summary.md"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(md)
        with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(s.to_csv())
    sys.stdout.write(md)
    return EXIT_PASS


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "summarize":
            return _summarize(args)
        return _run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScoreStabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
