"""Command line for simulation, training, evaluation and sweeps.

Usage:
    python -m scripts.fdia_cli demo3bus --json
    python -m scripts.fdia_cli gen --case case14 --role source --out data/source.fdia
    python -m scripts.fdia_cli gen --case case14 --delta 0.5 --role target --out data/target.fdia
    python -m scripts.fdia_cli pretrain --source data/source.fdia --target data/target.fdia --out models/stage1.ckpt
    python -m scripts.fdia_cli finetune --model models/stage1.ckpt --target data/target.fdia \
        --source data/source.fdia --out models/final.ckpt
    python -m scripts.fdia_cli eval --model models/final.ckpt --test data/test.fdia --report reports/eval.json
    python -m scripts.fdia_cli sweep --case case14 --deltas 0,0.1,0.5 --report-dir reports

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``FDIA_WORKERS`` sets the worker count for generation, residual
evaluation and sweeps.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from google.cloud import storage

from detector.baselines import BaselineKind, evaluate_baseline, load_baseline, save_baseline, train_baseline
from detector.config import ConfigBundle, load_config
from detector.metrics import ConfusionCounts, compute_metrics
from detector.network import CHECKPOINT_MAGIC, MLPModel, init_model, load_checkpoint, save_checkpoint
from detector.reports import ReportFormat, emit_report
from detector.sweep import run_delta_sweep, run_sigma_sweep
from detector.transfer import Stage2Mode, build_stage2_dataset, classify, finetune, pretrain
from gridsim.attacks import AttackMode
from gridsim.dataset import (
    Dataset,
    Domain,
    Label,
    export_csv,
    generate_source_dataset,
    generate_target_dataset,
    generate_target_test_dataset,
    load_dataset,
    normalize_and_split,
    save_dataset,
)
from gridsim.demo import run_3bus_demo
from gridsim.errors import FdiaError, LayoutError
from gridsim.grid_model import PerturbSpec, load_case, perturb_case

logger = logging.getLogger("fdia-cli")

GENERATORS = {
    Domain.SOURCE: generate_source_dataset,
    Domain.TARGET: generate_target_dataset,
    Domain.TARGET_TEST: generate_target_test_dataset,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_gcs_uri(uri: str) -> Tuple[str, str]:
    if not uri.startswith("gs://"):
        raise ValueError(f"Expected GCS URI beginning with gs://, received: {uri}")
    without_scheme = uri[5:]
    if "/" in without_scheme:
        bucket, prefix = without_scheme.split("/", 1)
    else:
        bucket, prefix = without_scheme, ""
    return bucket, prefix.rstrip("/")


def upload_artifacts(paths: Sequence[Path], upload_gcs: str) -> None:
    bucket_name, prefix = parse_gcs_uri(upload_gcs)
    client = storage.Client()
    bucket = client.bucket(bucket_name)
    for path in paths:
        destination = f"{prefix}/{path.name}" if prefix else path.name
        bucket.blob(destination).upload_from_filename(path)
        logger.info("Uploaded to gs://%s/%s", bucket_name, destination)


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _workers() -> int:
    return max(1, int(os.getenv("FDIA_WORKERS", "1")))


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = _Parser(prog="fdia", description="Stealthy FDIA simulation and transfer-learning detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    demo = sub.add_parser("demo3bus", help="Residual test on the 3-bus DC example.")
    demo.add_argument("--json", action="store_true", help="Print a JSON record instead of text.")

    gen = sub.add_parser("gen", help="Generate a labelled dataset.")
    gen.add_argument("--case", default="case14", help="Embedded case name or case JSON path.")
    gen.add_argument("--delta", type=float, default=0.0, help="Line-parameter error level of the running system.")
    gen.add_argument("--sigma", type=float, help="Measurement noise level (overrides the config).")
    gen.add_argument("--role", type=Domain.parse, required=True, help="source, target or target-test.")
    gen.add_argument("--out", type=Path, required=True, help="Destination dataset file.")
    gen.add_argument("--seed", type=int, help="Generation seed (overrides the config).")
    gen.add_argument("--n-base", type=int, help="Number of base load profiles.")
    gen.add_argument("--n-per-base", type=int, help="Draws per base profile.")
    gen.add_argument("--attack-mode", choices=[m.value for m in AttackMode], help="Attack intensity mode.")
    gen.add_argument("--config", type=Path, help="TOML config ([generation] section).")
    gen.add_argument("--csv", type=Path, help="Also export the samples as CSV.")
    gen.add_argument("--upload-gcs", type=str, help="Optional gs://bucket/prefix destination for the outputs.")

    pre = sub.add_parser("pretrain", help="Stage-1 training with the MMD term.")
    pre.add_argument("--source", type=Path, required=True)
    pre.add_argument("--target", type=Path, required=True)
    pre.add_argument("--test", type=Path, help="Optional target-test set tracked in the trace.")
    pre.add_argument("--config", type=Path)
    pre.add_argument("--out", type=Path, required=True)
    pre.add_argument("--trace", type=Path, help="Write the convergence trace as CSV.")

    fine = sub.add_parser("finetune", help="Stage-2 fine-tuning on target data.")
    fine.add_argument("--model", type=Path, required=True)
    fine.add_argument("--target", type=Path, required=True)
    fine.add_argument("--source", type=Path, help="Source dataset for attack replay (required in replay mode).")
    fine.add_argument("--test", type=Path)
    fine.add_argument("--config", type=Path)
    fine.add_argument("--out", type=Path, required=True)
    fine.add_argument("--trace", type=Path)

    base = sub.add_parser("baseline", help="Train a comparison detector.")
    base.add_argument("--kind", choices=[k.value for k in BaselineKind], required=True)
    base.add_argument("--source", type=Path, required=True)
    base.add_argument("--case", default="case14", help="Nominal case (bdd only).")
    base.add_argument("--config", type=Path)
    base.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("eval", help="Score a checkpoint or baseline on a test set.")
    ev.add_argument("--model", type=Path, required=True)
    ev.add_argument("--test", type=Path, required=True)
    ev.add_argument("--report", type=Path, help="Write the metrics as JSON.")

    sweep = sub.add_parser("sweep", help="Delta and source-sigma scenario sweeps.")
    sweep.add_argument("--case", default="case14")
    sweep.add_argument("--deltas", type=_float_list, default=[], help="Comma-separated delta levels.")
    sweep.add_argument("--sigmas", type=_float_list, default=[], help="Comma-separated source noise levels.")
    sweep.add_argument("--sigma-delta", type=float, default=0.5, help="Fixed delta of the sigma sweep.")
    sweep.add_argument("--config", type=Path)
    sweep.add_argument("--report-dir", type=Path, required=True)
    sweep.add_argument("--format", choices=[f.value for f in ReportFormat], action="append", dest="formats")
    sweep.add_argument("--upload-gcs", type=str)

    return parser.parse_args(argv)


# -- subcommands ------------------------------------------------------------------------


def cmd_demo3bus(args: argparse.Namespace) -> None:
    report = run_3bus_demo()
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.to_text())


def cmd_gen(args: argparse.Namespace) -> None:
    bundle = load_config(args.config)
    overrides = {
        "sigma": args.sigma,
        "seed": args.seed,
        "n_base": args.n_base,
        "n_per_base": args.n_per_base,
        "attack_mode": args.attack_mode,
    }
    cfg = replace(bundle.generation, **{k: v for k, v in overrides.items() if v is not None})
    case = load_case(args.case)
    if args.delta:
        if args.role is Domain.SOURCE:
            logger.warning("Source data is normally generated with delta=0; using delta=%g as asked", args.delta)
        case = perturb_case(case, PerturbSpec(args.delta, seed=cfg.seed, scope=bundle.sweep.perturb_scope))

    dataset = GENERATORS[args.role](case, cfg, _workers())
    written = [save_dataset(dataset, args.out)]
    if args.csv:
        written.append(export_csv(dataset, args.csv))
    print(f"Wrote {args.role.slug} dataset: {args.out} ({len(dataset)} samples, {dataset.class_counts()})")
    if args.upload_gcs:
        upload_artifacts(written, args.upload_gcs)


def _prepare(path: Path, seed: int, model_or_stats=None) -> Dataset:
    data = load_dataset(path)
    stats = getattr(model_or_stats, "norm_stats", model_or_stats)
    return normalize_and_split(data, seed, stats)


def cmd_pretrain(args: argparse.Namespace) -> None:
    bundle = load_config(args.config)
    cfg = bundle.train
    source = _prepare(args.source, cfg.seed)
    target = _prepare(args.target, cfg.seed, source.norm_stats)
    if target.layout != source.layout:
        raise LayoutError(f"{args.target} was generated on another measurement layout than {args.source}")
    test = _prepare(args.test, cfg.seed, source.norm_stats) if args.test else None

    model = init_model(bundle.mlp_config(source.n_features), cfg.seed)
    trained, trace = pretrain(model, source, target, cfg, test)
    save_checkpoint(trained, args.out)
    if args.trace:
        trace.to_csv(args.trace)
    print(f"Stage 1 stopped ({trace.stop_reason}) at iteration {trace.best_iteration}; wrote {args.out}")


def cmd_finetune(args: argparse.Namespace) -> None:
    bundle = load_config(args.config)
    cfg = bundle.train
    model = load_checkpoint(args.model)
    if model.norm_stats is None:
        raise UsageError(f"{args.model} carries no normalization statistics; run pretrain first")
    target = _prepare(args.target, cfg.seed, model)
    if cfg.stage2_mode is Stage2Mode.REPLAY and cfg.replay_ratio > 0:
        if args.source is None:
            raise UsageError("replay mode needs --source (or set stage2_mode = 'strict')")
        source = _prepare(args.source, cfg.seed, model)
    else:
        source = target
    test = _prepare(args.test, cfg.seed, model) if args.test else None

    stage2 = build_stage2_dataset(target, source, cfg)
    trained, trace = finetune(model, stage2, cfg, test)
    save_checkpoint(trained, args.out)
    if args.trace:
        trace.to_csv(args.trace)
    print(f"Stage 2 stopped ({trace.stop_reason}) on {len(stage2)} samples; wrote {args.out}")


def cmd_baseline(args: argparse.Namespace) -> None:
    bundle = load_config(args.config)
    source = _prepare(args.source, bundle.train.seed)
    kind = BaselineKind(args.kind)
    model = train_baseline(
        kind,
        source,
        bundle.baselines,
        case=load_case(args.case) if kind is BaselineKind.BDD else None,
        train_cfg=bundle.train,
        model_cfg=bundle.mlp_config(source.n_features),
        seed=bundle.train.seed,
        workers=_workers(),
    )
    save_baseline(model, args.out)
    print(f"Trained {kind.value} baseline {model.hyper}; wrote {args.out}")


def _is_checkpoint(path: Path) -> bool:
    with Path(path).open("rb") as handle:
        return handle.read(len(CHECKPOINT_MAGIC)) == CHECKPOINT_MAGIC


def cmd_eval(args: argparse.Namespace) -> None:
    if _is_checkpoint(args.model):
        model: MLPModel = load_checkpoint(args.model)
        if model.norm_stats is None:
            raise UsageError(f"{args.model} carries no normalization statistics")
        test = _prepare(args.test, 0, model)
        verdicts = classify(model, test.features).verdicts
        name = "proposed"
    else:
        baseline = load_baseline(args.model)
        test = _prepare(args.test, 0, baseline.metadata.get("norm_stats"))
        verdicts = evaluate_baseline(baseline, test, _workers())
        name = baseline.kind.value

    counts = ConfusionCounts.from_verdicts(verdicts, test.labels == Label.ATTACK)
    metrics = compute_metrics(counts)
    record = {
        "method": name,
        "model": str(args.model),
        "test": str(args.test),
        "samples": len(test),
        "counts": {"tp": counts.tp, "tn": counts.tn, "fp": counts.fp, "fn": counts.fn},
        "acc": metrics.acc,
        "mar": metrics.mar,
    }
    mar = "n/a" if metrics.mar is None else f"{metrics.mar * 100:.2f}%"
    print(f"{name}: ACC {metrics.acc * 100:.2f}%  MAR {mar}  ({len(test)} samples)")
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")


def _write_reports(results, stem: str, bundle: ConfigBundle, args: argparse.Namespace) -> List[Path]:
    written = []
    for fmt in args.formats or [f.value for f in ReportFormat]:
        fmt = ReportFormat(fmt)
        suffix = {"markdown": "md", "csv": "csv", "json": "json"}[fmt.value]
        path = args.report_dir / f"{stem}.{suffix}"
        path.write_text(emit_report(results, fmt, include_runtime=bundle.sweep.include_runtime), encoding="utf-8")
        written.append(path)
        logger.info("Wrote %s", path)
    return written


def cmd_sweep(args: argparse.Namespace) -> None:
    bundle = load_config(args.config)
    case = load_case(args.case)
    args.report_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    if args.deltas:
        results = run_delta_sweep(case, args.deltas, bundle, _workers())
        written += _write_reports(results, f"delta_sweep_{case.id}", bundle, args)
    if args.sigmas:
        results = run_sigma_sweep(case, args.sigmas, args.sigma_delta, bundle, _workers())
        written += _write_reports(results, f"sigma_sweep_{case.id}", bundle, args)
    if not written:
        print("No scenarios requested; nothing to do.")
        return
    print("Wrote " + ", ".join(str(p) for p in written))
    if args.upload_gcs:
        upload_artifacts(written, args.upload_gcs)


COMMANDS = {
    "demo3bus": cmd_demo3bus,
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s :: %(message)s",
    )
    args = parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fdia: error: {exc}", file=sys.stderr)
        return 1
    except FdiaError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return 2
    except ValueError as exc:
        print(f"fdia: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
