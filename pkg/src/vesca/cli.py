"""Command-line entry point.

Usage::

    vesca synth     --config run.json [--seed S] [--out DIR]
    vesca attack    --config run.json [--seed S] [--jobs N] [--out DIR]
    vesca evaluate  --config run.json [--seed S] [--jobs N] [--out DIR] [--ablation]
    vesca report    --out DIR [--format table|csv|json]
    vesca gradcheck [--cases N] [--seed S]
    vesca volcheck  [--cases N] [--seed S]
    vesca config    (prints the default configuration)

``VESCA_LOG`` selects the attack trace written to ``trace.jsonl``: ``off``,
``vertex`` (last record per vertex, the default) or ``iter`` (every
iteration). Wall-clock timings go to the log on standard error only, never
into artifacts.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, default_config_dict, load_config
from .harness import reports_from_json
from .oracles import encoder_gradient_suite, log_volume_grad_suite, volume_suite
from .pipeline import TRACE_LEVELS
from .workflow import (
    REPORT_JSON,
    MissingArtifactsError,
    run_attack,
    run_evaluate,
    write_dataset,
)

log = logging.getLogger("vesca")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesca", description="Simplicial-complex adversarial attack")
    sub = p.add_subparsers(dest="command", required=True)

    def run_cmd(name, help_text, jobs=True):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", required=True, help="run configuration (JSON)")
        c.add_argument("--seed", type=int, help="override the root seed")
        c.add_argument("--out", help="output directory (overrides out_dir)")
        if jobs:
            c.add_argument("--jobs", type=int, help="worker processes for per-image attacks")
        return c

    run_cmd("synth", "write the synthetic dataset", jobs=False)
    run_cmd("attack", "build complexes and sample adversarial images")
    ev = run_cmd("evaluate", "evaluate stored attack artifacts")
    ev.add_argument("--ablation", action="store_true", help="add every ablation row")

    rep = sub.add_parser("report", help="print an evaluation report")
    rep.add_argument("--out", required=True, help="directory holding report.json")
    rep.add_argument("--format", choices=("table", "csv", "json"), default="table")

    gc = sub.add_parser("gradcheck", help="encoder input-gradient self-check")
    gc.add_argument("--cases", type=int, default=10)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)

    vc = sub.add_parser("volcheck", help="simplex volume and log-volume gradient self-check")
    vc.add_argument("--cases", type=int, default=100)
    vc.add_argument("--seed", type=int, default=0)

    sub.add_parser("config", help="print the default configuration")
    return p


def _trace_level() -> str:
    level = os.environ.get("VESCA_LOG", "vertex").strip().lower() or "vertex"
    if level not in TRACE_LEVELS:
        raise ConfigError(f"VESCA_LOG must be one of {', '.join(TRACE_LEVELS)}")
    return level


def _load(args, parser) -> tuple:
    if not Path(args.config).is_file():
        parser.print_usage(sys.stderr)
        print(f"vesca: error: config file not found: {args.config}", file=sys.stderr)
        raise SystemExit(2)
    cfg = load_config(args.config)
    if args.seed is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        cfg = RunConfig.from_dict(d)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    return cfg, out


def _print_suite(title, suite) -> None:
    for line in suite.lines():
        print(line)
    status = "PASS" if suite.passed else "FAIL"
    n_fail = sum(not c.passed for c in suite.cases)
    print(f"{title}: {status} ({len(suite.cases) - n_fail}/{len(suite.cases)} cases)")


def _format_table(reports) -> str:
    head = f"{'row':<16}{'model':<9}{'clean':>8}{'adv':>8}{'degr':>8}{'decline%':>10}" \
           f"{'shift':>9}{'mmd2':>9}"
    lines = [head]
    for r in reports:
        for model, m in r.models.items():
            dr = "-" if m.decline_rate is None else f"{m.decline_rate:.2f}"
            lines.append(f"{r.row:<16}{model:<9}{m.clean:>8.4f}{m.adversarial:>8.4f}"
                         f"{m.degradation:>8.4f}{dr:>10}{r.feature_shift:>9.4f}"
                         f"{r.domain_gap:>9.4f}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        if args.command == "config":
            print(json.dumps(default_config_dict(), indent=2, sort_keys=True))
            return 0
        if args.command == "gradcheck":
            suite = encoder_gradient_suite(args.cases, args.seed, args.tolerance,
                                           corrupt=args.corrupt_backward)
            _print_suite("gradcheck", suite)
            return 0 if suite.passed else 1
        if args.command == "volcheck":
            vol = volume_suite(args.cases, args.seed)
            grad = log_volume_grad_suite(max(1, args.cases // 10), args.seed)
            _print_suite("volcheck volume", vol)
            _print_suite("volcheck log-volume gradient", grad)
            return 0 if vol.passed and grad.passed else 1
        if args.command == "report":
            path = Path(args.out) / REPORT_JSON
            if not path.is_file():
                print(f"vesca: missing report: {path}", file=sys.stderr)
                return 1
            text = path.read_text()
            if args.format == "json":
                sys.stdout.write(text)
            elif args.format == "csv":
                sys.stdout.write((Path(args.out) / "report.csv").read_text())
            else:
                print(_format_table(reports_from_json(text)))
            return 0

        cfg, out = _load(args, parser)
        if args.command == "synth":
            paths = write_dataset(cfg, out / "data")
            print(f"wrote {len(paths)} files to {out / 'data'}")
        elif args.command == "attack":
            art = run_attack(cfg, out, jobs=args.jobs, trace_level=_trace_level())
            print(f"attacked {len(art.results)} images; artifacts in {out}")
        elif args.command == "evaluate":
            reports = run_evaluate(cfg, out, ablation=args.ablation, jobs=args.jobs)
            print(_format_table(reports))
        return 0
    except ConfigError as exc:
        print(f"vesca: configuration error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactsError as exc:
        print(f"vesca: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"vesca: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
