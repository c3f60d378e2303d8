"""Operator surface: build the dataset, inspect stage plans, train, and
evaluate, all driven by one YAML config.

Commands exit 0 on success and 1 on any pipeline error (bad config, shortage,
undefined metric, media problems). Outputs land under the config's
output_root, overridable with the M2SE_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, load_run_config
from .dataset import (
    build_corpus,
    check_corpus_shape,
    dataset_stats,
    ingest_corpus,
    REFERENCE_CORPUS_COUNTS,
    REFERENCE_CORPUS_DISTINCT_TOTAL,
    validate_record,
)
from .errors import ConfigError, PipelineError, UndefinedMetricError, ValidationError
from .metrics import score_prediction_rows
from .model import load_checkpoint
from .records import TaskKind, read_records, write_records
from .reporting import (
    read_predictions,
    render_loss_figure,
    render_metrics_figure,
    render_table,
    write_predictions,
    write_report_json,
    write_report_tsv,
)
from .train import predict_records, run_training


def _parse_task_flag(raw: Optional[str]) -> Optional[list[TaskKind]]:
    if raw is None:
        return None
    tasks = []
    for name in raw.split(","):
        name = name.strip()
        if not name:
            continue
        try:
            tasks.append(TaskKind(name))
        except ValueError:
            raise ConfigError(f"unknown task {name!r} in --tasks") from None
    if not tasks:
        raise ConfigError("--tasks named no tasks")
    return tasks


def _load_config(args) -> RunConfig:
    return load_run_config(args.config, seed=getattr(args, "seed", None))


def _build(config: RunConfig, tasks: Optional[Sequence[TaskKind]] = None):
    result = ingest_corpus(config.corpus_manifest)
    ctx = config.build_context()
    records = build_corpus(result.samples, tasks or config.tasks, ctx)
    bad = [(r.record_id, v) for r in records for v in validate_record(r)]
    if bad:
        raise ValidationError(f"built records violate their invariants: {bad[:5]}")
    stats = dataset_stats(records)
    check_corpus_shape(stats)
    return records, result.rejections, stats


def _dataset_paths(config: RunConfig) -> dict[str, Path]:
    root = config.output_root / "dataset"
    return {
        "root": root,
        "records": root / "records.jsonl",
        "stats": root / "stats.json",
        "rejections": root / "rejections.jsonl",
    }


def _write_dataset(config: RunConfig, records, rejections, stats) -> dict[str, Path]:
    paths = _dataset_paths(config)
    paths["root"].mkdir(parents=True, exist_ok=True)
    write_records(records, paths["records"])
    with open(paths["stats"], "w", encoding="utf-8") as handle:
        json.dump(stats.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(paths["rejections"], "w", encoding="utf-8") as handle:
        for rejection in rejections:
            handle.write(json.dumps(rejection.to_dict(), ensure_ascii=False) + "\n")
    return paths


def cmd_build_dataset(args) -> int:
    config = _load_config(args)
    tasks = _parse_task_flag(args.tasks)
    records, rejections, stats = _build(config, tasks)
    paths = _write_dataset(config, records, rejections, stats)
    for task, count in sorted(stats.task_counts.items()):
        print(f"{task}: {count} records")
    print(f"distinct samples: {stats.distinct_samples}")
    print(f"total records: {stats.total_records} -> {paths['records']}")
    if rejections:
        print(f"rejected rows: {len(rejections)} -> {paths['rejections']}",
              file=sys.stderr)
        if not args.allow_rejects:
            print("failing because rejections exist (pass --allow-rejects to keep going)",
                  file=sys.stderr)
            return 1
    return 0


def cmd_plan(args) -> int:
    config = _load_config(args)
    plans = config.plans()
    notes = config.provenance_notes()
    for plan in plans:
        rates = ", ".join(
            f"{task.value}={rate:.4f}"
            for task, rate in sorted(plan.task_rates.items(), key=lambda kv: kv[0].value)
        )
        print(f"stage {plan.stage_id}: budget={plan.sample_budget} seed={plan.seed}")
        print(f"  rates: {rates}")
        if args.print_provenance:
            print(f"  budget source: {notes[f'stage{plan.stage_id}.budget']}")
            print(f"  rates source:  {notes[f'stage{plan.stage_id}.rates']}")
    if args.print_provenance:
        for key in ("train.learning_rate", "train.epochs", "train.lora"):
            print(f"{key}: {notes[key]}")
    return 0


def _records_for(config: RunConfig, allow_rejects: bool):
    """Reuse the built dataset when present; build (and persist) it otherwise."""
    paths = _dataset_paths(config)
    if paths["records"].exists():
        return read_records(paths["records"])
    records, rejections, stats = _build(config)
    _write_dataset(config, records, rejections, stats)
    if rejections and not allow_rejects:
        raise ValidationError(
            f"{len(rejections)} source rows were rejected; rerun with --allow-rejects "
            f"or fix the corpus (report: {paths['rejections']})"
        )
    return records


def cmd_train(args) -> int:
    config = _load_config(args)
    records = _records_for(config, args.allow_rejects)
    plans = config.plans()
    stages = [args.stage] if args.stage is not None else None
    initial_model = None
    if args.resume:
        initial_model = load_checkpoint(args.resume)
        if stages is None:
            stages = [2]
    out = config.output_root / "train"
    out.mkdir(parents=True, exist_ok=True)
    outcome = run_training(
        records,
        plans,
        config.model_config,
        config.train_config,
        output_dir=out,
        media_base=config.media_base,
        sampling_mode=config.sampling_mode,
        stages=stages,
        initial_model=initial_model,
        extra_manifest={"provenance": config.provenance_notes()},
    )
    traces = {r.stage_id: r.loss_trace for r in outcome.results}
    if traces:
        figure = render_loss_figure(traces, out / "loss_curve.png")
        print(f"loss curve: {figure}")
    for result in outcome.results:
        ckpt = outcome.checkpoint_paths.get(result.stage_id)
        print(
            f"stage {result.stage_id}: {result.steps} steps, "
            f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}"
            + (f", checkpoint {ckpt}" if ckpt else "")
        )
    print(f"run manifest: {out / 'run_manifest.jsonl'}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    out = config.output_root / "eval"
    scheme = args.scheme or config.scheme

    if args.predictions:
        rows = read_predictions(args.predictions)
        predictions_path = Path(args.predictions)
    else:
        checkpoint = args.checkpoint or (config.output_root / "train" / "stage2.pt")
        if not Path(checkpoint).exists():
            raise ConfigError(
                f"no checkpoint at {checkpoint}; train first or pass --checkpoint"
            )
        model = load_checkpoint(checkpoint)
        records = _records_for(config, args.allow_rejects)
        tasks = _parse_task_flag(args.tasks)
        if tasks:
            wanted = set(tasks)
            records = [r for r in records if r.task in wanted]
        scores = {
            sample.sample_id: sample.sentiment_score
            for sample in ingest_corpus(config.corpus_manifest).samples
        }
        rows = predict_records(model, records, media_base=config.media_base,
                               decode=config.decode_config, score_lookup=scores)
        out.mkdir(parents=True, exist_ok=True)
        predictions_path = out / "predictions.jsonl"
        write_predictions(predictions_path, rows)

    if not rows:
        raise UndefinedMetricError("no prediction rows to score")
    reports = score_prediction_rows(rows, scheme=scheme)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(out / "report.json", reports)
    write_report_tsv(out / "report.tsv", reports)
    render_metrics_figure(reports, out / "metrics.png")
    print(render_table(reports))
    print(f"\npredictions: {predictions_path}")
    print(f"report: {out / 'report.json'} (tsv + figure alongside)")
    return 0


def cmd_stats(args) -> int:
    config = _load_config(args)
    paths = _dataset_paths(config)
    if paths["records"].exists():
        records = read_records(paths["records"])
    else:
        records, _, _ = _build(config)
    stats = dataset_stats(records)
    print("task      built  reference")
    for task in TaskKind:
        reference = REFERENCE_CORPUS_COUNTS[task]
        print(f"{task.value:<8}  {stats.task_counts[task.value]:>5}  {reference:>9}")
    print(f"distinct  {stats.distinct_samples:>5}  {REFERENCE_CORPUS_DISTINCT_TOTAL:>9}")
    print("(reference column: size of the published corpus this format mirrors)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="m2se",
        description="Multistage multitask instruction pipeline: dataset, plans, "
                    "training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run config YAML")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("build-dataset", help="ingest the corpus and emit task records")
    common(p)
    p.add_argument("--tasks", help="comma-separated task subset, e.g. MSA,ER")
    p.add_argument("--allow-rejects", action="store_true",
                   help="exit 0 even when some source rows were rejected")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("plan", help="resolve and print the stage plans")
    common(p)
    p.add_argument("--print", dest="print_provenance", action="store_true",
                   help="include the provenance of every default")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="run the staged training loop")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), default=None,
                   help="train only this stage")
    p.add_argument("--resume", help="checkpoint to continue from (implies --stage 2)")
    p.add_argument("--allow-rejects", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score predictions or a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to decode with "
                                        "(default: <output_root>/train/stage2.pt)")
    p.add_argument("--predictions", help="score this prediction file instead of decoding")
    p.add_argument("--tasks", help="comma-separated task subset to decode")
    p.add_argument("--scheme", choices=("NN", "NP"), default=None,
                   help="sentiment accuracy scheme (default: both)")
    p.add_argument("--allow-rejects", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="dataset statistics vs the reference shape")
    common(p)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
