"""Command-line entry points for staged or end-to-end experiment runs.

Every subcommand takes ``--config`` (JSON, see README for the schema) and
``--out-dir``; ``--set section.key=value`` overrides individual config
entries. Failures print a machine-readable JSON error to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    RunConfig,
    load_ml_fit,
    load_predicted,
    load_run_dataset,
    load_traces,
    run_experiment,
    stage_diagnostics,
    stage_fit_ml,
    stage_generate,
    stage_latents,
    stage_predict,
    stage_sample,
    stage_score,
)

STAGES = ("generate", "fit-ml", "sample", "predict", "score", "figures", "run")


def _apply_overrides(payload: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return payload


def _load_config(args) -> RunConfig | None:
    """Build the config; ``None`` when nothing was specified (use run defaults)."""
    if not args.config and not args.set:
        return None
    payload: dict = {}
    if args.config:
        with open(args.config) as fh:
            payload = json.load(fh)
    payload = _apply_overrides(payload, args.set or [])
    return RunConfig.from_dict(payload)


def _run_stage(stage: str, config: RunConfig | None, out_dir: Path) -> None:
    if stage == "figures":
        from .figures import emit_figures

        emit_figures(out_dir, config)
        return
    if config is None:
        config = RunConfig()
    if stage == "run":
        run_experiment(config, out_dir)
        return
    if stage == "generate":
        stage_generate(config, out_dir)
        return
    dataset, truth = load_run_dataset(config, out_dir)
    if stage == "fit-ml":
        stage_fit_ml(config, dataset, out_dir)
        return
    ml = load_ml_fit(out_dir)
    if stage == "sample":
        traces = stage_sample(config, dataset, ml, out_dir)
        stage_diagnostics(traces, out_dir)
        return
    if stage == "predict":
        pooled = None
        if not config.ml_only:
            traces = load_traces(out_dir)
            pooled = stage_latents(config, dataset, traces, ml, out_dir)
        stage_predict(config, dataset, ml, out_dir, pooled, truth)
        return
    if stage == "score":
        traces = load_traces(out_dir) if not config.ml_only else None
        predicted = load_predicted(out_dir)
        stage_score(config, predicted, traces, ml, out_dir)
        return
    raise ValueError(f"unknown stage {stage!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgplvm",
        description="Supervised GP latent variable model experiments",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out-dir", type=Path, required=True, help="run directory")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config entry, e.g. --set mcmc.iterations=100",
        )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        _run_stage(args.stage, config, args.out_dir)
    except Exception as exc:
        print(
            json.dumps(
                {"error": str(exc), "type": type(exc).__name__, "stage": args.stage}
            ),
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
