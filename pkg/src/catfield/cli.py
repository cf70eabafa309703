"""Command line entry point.

    catfield --config run.yaml [--stage NAME] [--baseline object-level]
             [--ablate representative=random] [--ablate subcat=off] [--seed N]
    catfield report OUTDIR
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from pydantic import ValidationError

from .pipeline import STAGES, MissingMetricsError, PipelineConfig, report, run_pipeline

ABLATIONS = {
    "representative": ("uncertainty", "random"),
    "subcat": ("on", "off"),
}


def _ablation(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep or name not in ABLATIONS or value not in ABLATIONS[name]:
        choices = ", ".join(f"{k}={'|'.join(v)}" for k, v in ABLATIONS.items())
        raise argparse.ArgumentTypeError(f"expected one of {choices}, got {text!r}")
    return name, value


def run_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catfield", description="Category-level neural field reconstruction pipeline.")
    p.add_argument("--config", required=True, help="YAML or JSON pipeline config")
    p.add_argument("--stage", choices=STAGES, help="run only this stage (plus anything it needs)")
    p.add_argument("--baseline", choices=["object-level"], help="run the per-object baseline instead")
    p.add_argument("--ablate", type=_ablation, action="append", default=[], metavar="NAME=VALUE")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--outdir", help="override the config output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    data = cfg.model_dump()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.outdir:
        data["outdir"] = args.outdir
    if args.baseline:
        data["method"] = args.baseline
    for name, value in args.ablate:
        if name == "representative":
            data["representative"]["method"] = value
        else:
            data["registration"]["subcategorize"] = value == "on"
    return PipelineConfig.model_validate(data)


def main_run(argv) -> int:
    args = run_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(PipelineConfig.load(args.config), args)
    except (OSError, ValueError, ValidationError) as exc:
        print(json.dumps({"status": "error", "stage": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    status = run_pipeline(cfg, [args.stage] if args.stage else None)
    if status["status"] != "ok":
        print(json.dumps(status), file=sys.stderr)
        return 1
    return 0


def main_report(argv) -> int:
    p = argparse.ArgumentParser(prog="catfield report", description="Summarize metrics of a pipeline output directory.")
    p.add_argument("outdir")
    args = p.parse_args(argv)
    try:
        table, csv_path = report(args.outdir)
    except (MissingMetricsError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(table)
    print(f"\nwritten {csv_path}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv[:1] == ["report"]:
        return main_report(argv[1:])
    return main_run(argv)


if __name__ == "__main__":
    sys.exit(main())
