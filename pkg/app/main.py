"""aesfusor command-line entry point.

Run with: uv run aesfusor <subcommand> [options]

Subcommands:
    train-toy            train the fusor on the synthetic routing task
    gradcheck            finite-difference check of the fusor gradients
    inspect-gates        per-class gate reports and forced single-encoder accuracy
    discrim              feature discriminability per view on an image series
    critique build       comment threads -> critiques, QA pairs, VQA items
    critique stats       length/category statistics of a critique or QA file
    bench build          critiques (or raw threads) -> filtered MCQ benchmark
    eval run             score a model client on a benchmark
    report               render saved EvalReports as md, csv or docx

Every run writes ``run_manifest.json`` next to its outputs. Exit codes: 0 ok,
1 runtime failure, 2 usage error, 3 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import torch
import yaml
from pydantic import ValidationError

from app.config import Config, deep_merge, load_settings
from app.core.adapters import MockTextEncoder, load_image, mock_encoders
from app.core.fusor import VisionFusor
from app.core.fusor_model import FusorConfigError
from app.core.storage import (
    CheckpointFormatError,
    RunManifest,
    atomic_write_text,
    ensure_out_dir,
    load_checkpoint,
    read_jsonl,
    save_checkpoint,
    utc_now,
    write_json,
    write_manifest,
)
from app.logger import logger, setup_logger

CONFIG_ERRORS = (ValidationError, yaml.YAMLError, FusorConfigError, CheckpointFormatError)
EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


def _emit(data: Any) -> None:
    """Print a command result as JSON on stdout."""
    print(json.dumps(data, indent=2, ensure_ascii=False))


# ============ Routing toy ============

def cmd_train_toy(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.core.introspection import gate_reports_by_class
    from app.core.plots import plot_gate_reports
    from app.core.routing_task import probe_views
    from app.core.training import (
        ToySettings,
        evaluate_accuracy,
        head_tensors,
        prepare_toy,
        resolve_fusor_config,
        train,
        train_baseline,
    )

    settings = load_settings(
        ToySettings,
        args.config or Config.CONFIG_DIR / "toy.yaml",
        {
            "train": {"steps": args.steps, "lr": args.lr, "seed": args.seed, "batch_size": args.batch_size},
            "task": {"samples_per_class": args.samples_per_class, "seed": args.seed},
            "fusor": {"seed": args.seed},
        },
    )
    manifest.config = settings.model_dump(mode="json")
    manifest.seed = settings.train.seed

    setup = prepare_toy(settings)
    model = VisionFusor(resolve_fusor_config(settings, setup.encoders))
    result = train(model, setup.train_data, settings.train, metrics_path=out / "metrics.jsonl", progress=args.progress)
    baseline_result = train_baseline(setup, metrics_path=out / "baseline_metrics.jsonl", progress=args.progress)

    with torch.no_grad():
        full = evaluate_accuracy(model, result.head, setup.holdout_data)
        baseline = evaluate_accuracy(baseline_result.model, baseline_result.head, setup.holdout_data)
        reports = gate_reports_by_class(model, setup.holdout_data)
    probe = probe_views(setup.dataset, setup.encoders, steps=settings.probe_steps) if settings.probe_steps else {}

    checkpoint = save_checkpoint(
        model,
        out / "fusor.safetensors",
        extra_tensors=head_tensors(result.head),
        extra_metadata={"toy_settings": settings.model_dump_json()},
    )
    summary = {
        "final_loss": result.losses[-1] if result.losses else None,
        "holdout_accuracy": full,
        "baseline_no_fusor_accuracy": baseline,
        "gates": [r.model_dump() for r in reports],
        "probe_accuracy": probe,
    }
    manifest.outputs += [
        str(out / "metrics.jsonl"),
        str(out / "baseline_metrics.jsonl"),
        str(checkpoint),
        str(write_json(out / "summary.json", summary)),
        *(str(p) for p in plot_gate_reports(reports, settings.encoders, out / "gates")),
    ]
    _emit({"holdout_accuracy": full["overall"], "baseline_no_fusor_accuracy": baseline["overall"]})


def _load_toy_checkpoint(path: str):
    from app.core.training import ToySettings, head_from_tensors

    model, extras, metadata = load_checkpoint(path)
    if "toy_settings" not in metadata:
        raise CheckpointFormatError(f"{path} was not written by train-toy (no toy_settings metadata)")
    settings = ToySettings.model_validate_json(metadata["toy_settings"])
    return model, head_from_tensors(extras), settings


def cmd_inspect_gates(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.core.introspection import forced_gate_matrix, full_mode_report, gate_reports_by_class
    from app.core.plots import plot_gate_reports
    from app.core.training import prepare_toy

    model, head, settings = _load_toy_checkpoint(args.checkpoint)
    manifest.config = {"checkpoint": args.checkpoint, "toy": settings.model_dump(mode="json")}
    manifest.seed = settings.task.seed
    holdout = prepare_toy(settings).holdout_data

    reports = gate_reports_by_class(model, holdout)
    forced = forced_gate_matrix(model, head, holdout)
    full = full_mode_report(model, head, holdout)
    result = {
        "gates": [r.model_dump() for r in reports],
        "forced_single_encoder_accuracy": forced,
        "full_mode_accuracy": full.per_topic_accuracy | {"overall": full.overall_accuracy},
        "encoders": settings.encoders,
    }
    manifest.outputs += [
        str(write_json(out / "gates.json", result)),
        *(str(p) for p in plot_gate_reports(reports, settings.encoders, out / "gates")),
    ]
    _emit(result)


def cmd_discrim(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.core.introspection import (
        ZeroEmbeddingError,
        brightness_ladder,
        discriminability,
        embed_series_fused,
        embed_series_view,
    )

    size = args.size
    if args.images:
        images = [load_image(p, size) for p in args.images]
        attribute = "custom"
    else:
        images = brightness_ladder(args.steps, size)
        attribute = "brightness"
    encoders = mock_encoders(image_size=size)
    result: dict[str, float | None] = {}
    for encoder in encoders:
        try:
            result[encoder.name] = discriminability(embed_series_view(images, encoder, attribute))
        except ZeroEmbeddingError as e:
            logger.warning(f"No discriminability for {encoder.name}: {e}")
            result[encoder.name] = None
    if args.checkpoint:
        model, _, settings = _load_toy_checkpoint(args.checkpoint)
        encoders = mock_encoders(settings.encoders, size)
        text_encoder = MockTextEncoder(dim=model.config.text_dim, seed=settings.task.seed)
        result["fused"] = discriminability(
            embed_series_fused(model, encoders, text_encoder, images, args.instruction, attribute)
        )
    manifest.config = {
        "images": args.images or None,
        "steps": args.steps,
        "size": size,
        "checkpoint": args.checkpoint,
        "instruction": args.instruction,
    }
    manifest.outputs.append(str(write_json(out / "discrim.json", {"attribute": attribute, "discriminability": result})))
    _emit(result)


def cmd_gradcheck(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.core.gradcheck import GradCheckFailedError, GradCheckSettings, run_grad_check

    settings = load_settings(
        GradCheckSettings,
        args.config or Config.CONFIG_DIR / "tiny.yaml",
        {"seed": args.seed, "tolerance": args.tolerance, "frozen": args.freeze or None},
    )
    manifest.config = settings.model_dump(mode="json")
    manifest.seed = settings.seed
    try:
        report = run_grad_check(settings)
    except GradCheckFailedError as e:
        manifest.outputs.append(str(write_json(out / "gradcheck.json", e.report)))
        raise
    manifest.outputs.append(str(write_json(out / "gradcheck.json", report)))
    print(f"max relative error: {report.max_rel_error:.3e}")


# ============ LLM pipelines ============

def _pipeline_settings(args: argparse.Namespace, extra: dict[str, Any] | None = None):
    from app.pipeline.settings import PipelineSettings

    overrides = {
        "llm": {
            "provider": args.provider,
            "fixtures": args.fixtures,
            "cache_dir": args.cache_dir,
            "parallelism": args.parallelism,
        }
    }
    settings = load_settings(
        PipelineSettings, args.config or Config.CONFIG_DIR / "pipeline.yaml", deep_merge(overrides, extra or {})
    )
    if settings.llm.provider == "http" and settings.llm.cache_dir is None:
        settings = settings.model_copy(
            update={"llm": settings.llm.model_copy(update={"cache_dir": str(Config.CACHE_DIR)})}
        )
    return settings


def _gateway_summary(gateway) -> dict[str, int]:
    stats = gateway.stats
    return {
        "requests": stats.requests,
        "cache_hits": stats.cache_hits,
        "client_calls": stats.client_calls,
        "max_in_flight": stats.max_in_flight,
    }


def cmd_critique_build(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.pipeline.critique import build_critique_corpus
    from app.pipeline.llm import build_gateway
    from app.pipeline.records import CommentThread

    settings = _pipeline_settings(args)
    manifest.config = settings.model_dump(mode="json")
    gateway = build_gateway(settings.llm)
    threads = read_jsonl(args.comments, CommentThread)
    corpus = build_critique_corpus(threads, gateway, settings.critique, out)
    manifest.outputs += [str(p) for p in corpus.paths.values()]
    _emit(
        {
            "threads": len(threads),
            "critiques_accepted": len(corpus.accepted),
            "qa_pairs_accepted": sum(p.accepted for p in corpus.pairs),
            "vqa_items": len(corpus.vqa_items),
            "llm": _gateway_summary(gateway),
        }
    )


def cmd_critique_stats(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.core.plots import plot_category_histogram, plot_length_histogram
    from app.pipeline.critique import corpus_stats
    from app.pipeline.records import CritiqueRecord, QaPair
    from app.pipeline.settings import CritiqueSettings

    settings = load_settings(CritiqueSettings, None, {"bucket_width": args.bucket_width})
    if args.qa:
        entries = [p for p in read_jsonl(args.qa, QaPair) if p.accepted]
        source = args.qa
    else:
        entries = [r for r in read_jsonl(args.critiques, CritiqueRecord) if r.accepted]
        source = args.critiques
    manifest.config = {"source": source, "bucket_width": settings.bucket_width}
    stats = corpus_stats(entries, settings.bucket_width)
    manifest.outputs.append(str(write_json(out / "stats.json", stats)))
    buckets = [(b.lower, b.upper, b.count) for b in stats.length_histogram]
    histogram = plot_length_histogram(buckets, out / "length_histogram", "Length distribution")
    manifest.outputs += [str(p) for p in histogram]
    if stats.category_histogram:
        top = stats.top_categories(settings.top_categories)
        manifest.outputs += [
            str(p) for p in plot_category_histogram(top, out / "category_histogram", f"Top {len(top)} categories")
        ]
    _emit({"count": stats.count, "mean_length": round(stats.mean_length, 2)})


def cmd_bench_build(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.pipeline.bench import build_bench, critiques_from_threads
    from app.pipeline.llm import build_gateway
    from app.pipeline.records import CommentThread, CritiqueRecord

    settings = _pipeline_settings(
        args,
        {"bench": {"top_critiques": args.top_critiques, "per_critique": args.per_critique, "final": args.final}},
    )
    manifest.config = settings.model_dump(mode="json")
    gateway = build_gateway(settings.llm)
    if args.comments:
        critiques = critiques_from_threads(read_jsonl(args.comments, CommentThread), gateway, settings.critique)
    else:
        critiques = read_jsonl(args.critiques, CritiqueRecord)
    build = build_bench(critiques, gateway, settings.bench, out)
    manifest.outputs += [str(p) for p in build.paths.values()]
    _emit(
        {
            "generated": len(build.candidates),
            "blind_removed": sum(1 for c in build.candidates if not c.filter_log[0].passed),
            "selected": len(build.bench),
            "llm": _gateway_summary(gateway),
        }
    )


def _model_client(args: argparse.Namespace, items):
    from app.pipeline.evaluation import AntiOracleModelClient, LlmModelClient, OracleModelClient, RandomModelClient

    if args.model == "mock-oracle":
        return OracleModelClient(items)
    if args.model == "mock-anti":
        return AntiOracleModelClient(items)
    if args.model == "mock-random":
        return RandomModelClient(seed=args.seed or 0)
    from app.pipeline.llm import build_gateway

    settings = _pipeline_settings(args, {"llm": {"provider": "http"}})
    return LlmModelClient(build_gateway(settings.llm), model_tag=args.model_tag)


def cmd_eval_run(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.pipeline.evaluation import evaluate, load_bench, load_topic_merge_map
    from app.pipeline.export import render_report

    items = load_bench(args.bench)
    merge_map = load_topic_merge_map(args.merge)
    client = _model_client(args, items)
    benchmark_id = args.benchmark_id or Path(args.bench).stem
    manifest.config = {
        "bench": args.bench,
        "model": args.model,
        "merge": args.merge,
        "image_root": args.image_root,
        "parallelism": args.parallelism,
        "benchmark_id": benchmark_id,
    }
    manifest.seed = args.seed
    report = evaluate(
        client,
        items,
        topic_merge_map=merge_map,
        image_root=args.image_root,
        parallelism=args.parallelism or 1,
        benchmark_id=benchmark_id,
    )
    manifest.outputs += [
        str(write_json(out / "report.json", report)),
        str(atomic_write_text(out / "report.md", render_report(report, "md"))),
        str(atomic_write_text(out / "report.csv", render_report(report, "csv"))),
    ]
    _emit(
        {
            "model": report.model_name,
            "overall": f"{report.overall_accuracy * 100:.2f}",
            "unparsed": report.unparsed_count,
        }
    )


def cmd_report(args: argparse.Namespace, manifest: RunManifest, out: Path) -> None:
    from app.pipeline.export import export_reports_docx, render_reports
    from app.pipeline.records import EvalReport

    reports = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as f:
            reports.append(EvalReport.from_dict(json.load(f)))
    manifest.config = {"reports": args.reports, "format": args.format}
    target = out / f"report.{args.format}"
    if args.format == "docx":
        export_reports_docx(target, reports)
    else:
        atomic_write_text(target, render_reports(reports, args.format))
        print(target.read_text(encoding="utf-8"), end="")
    manifest.outputs.append(str(target))


# ============ Parser and dispatch ============

def _add_common(parser: argparse.ArgumentParser, config: bool = True) -> None:
    parser.add_argument("--out", help="Output directory (default: $AESFUSOR_OUTPUT_DIR/<subcommand>)")
    parser.add_argument("--verbose", action="store_true", help="DEBUG logs as JSON lines on stderr")
    if config:
        parser.add_argument("--config", help="YAML config file")


def _add_llm(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--provider", choices=["mock", "http"], help="LLM provider")
    parser.add_argument("--fixtures", help="Scripted response file for the mock provider")
    parser.add_argument("--cache-dir", dest="cache_dir", help="LLM response cache directory")
    parser.add_argument("--parallelism", type=int, help="Maximum LLM requests in flight")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per command."""
    parser = argparse.ArgumentParser(prog="aesfusor", description="Instruction-guided vision fusor toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train-toy", help="Train the fusor on the synthetic routing task")
    _add_common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--progress", action="store_true", help="Show a progress bar")
    p.set_defaults(handler=cmd_train_toy, name="train-toy")

    p = sub.add_parser("gradcheck", help="Finite-difference gradient check")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--freeze", action="append", help="Parameter group to skip (repeatable)")
    p.set_defaults(handler=cmd_gradcheck, name="gradcheck")

    p = sub.add_parser("inspect-gates", help="Gate reports and forced single-encoder accuracy")
    _add_common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=cmd_inspect_gates, name="inspect-gates")

    p = sub.add_parser("discrim", help="Discriminability of each view on an image series")
    _add_common(p, config=False)
    p.add_argument("--images", nargs="+", help="Image files forming the series (default: brightness ladder)")
    p.add_argument("--steps", type=int, default=5, help="Brightness ladder length")
    p.add_argument("--size", type=int, default=32, help="Square image size")
    p.add_argument("--checkpoint", help="Also measure mean-pooled fused tokens of this train-toy checkpoint")
    p.add_argument("--instruction", default="assess the tone", help="Instruction for the fused embedding")
    p.set_defaults(handler=cmd_discrim, name="discrim")

    critique = sub.add_parser("critique", help="Critique corpus pipeline").add_subparsers(
        dest="action", required=True, metavar="ACTION"
    )
    p = critique.add_parser("build", help="Comment threads -> critiques, QA pairs and VQA items")
    _add_common(p)
    _add_llm(p)
    p.add_argument("--comments", required=True, help="comments.jsonl")
    p.set_defaults(handler=cmd_critique_build, name="critique build")
    p = critique.add_parser("stats", help="Length and category statistics")
    _add_common(p, config=False)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--critiques", help="critiques.jsonl")
    source.add_argument("--qa", help="qa.jsonl")
    p.add_argument("--bucket-width", dest="bucket_width", type=int)
    p.set_defaults(handler=cmd_critique_stats, name="critique stats")

    bench = sub.add_parser("bench", help="Benchmark construction").add_subparsers(
        dest="action", required=True, metavar="ACTION"
    )
    p = bench.add_parser("build", help="Generate, filter, score and select MCQs")
    _add_common(p)
    _add_llm(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--critiques", help="critiques.jsonl")
    source.add_argument("--comments", help="comments.jsonl (runs the critique stages first)")
    p.add_argument("--top-critiques", dest="top_critiques", type=int)
    p.add_argument("--per-critique", dest="per_critique", type=int)
    p.add_argument("--final", type=int)
    p.set_defaults(handler=cmd_bench_build, name="bench build")

    evaluation = sub.add_parser("eval", help="Evaluation").add_subparsers(
        dest="action", required=True, metavar="ACTION"
    )
    p = evaluation.add_parser("run", help="Score a model on a benchmark")
    _add_common(p)
    _add_llm(p)
    p.add_argument("--bench", required=True, help="bench.jsonl or an external MCQ JSONL")
    p.add_argument("--model", required=True, choices=["mock-oracle", "mock-anti", "mock-random", "http"])
    p.add_argument("--model-tag", dest="model_tag", default="large")
    p.add_argument("--merge", help="Topic merge map JSON (default: shipped map)")
    p.add_argument("--image-root", dest="image_root", help="Directory of <image_id>.* photos")
    p.add_argument("--benchmark-id", dest="benchmark_id")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_eval_run, name="eval run")

    p = sub.add_parser("report", help="Render EvalReport JSON files as one table")
    _add_common(p, config=False)
    p.add_argument("--reports", nargs="+", required=True, help="report.json files")
    p.add_argument("--format", choices=["md", "csv", "docx"], default="md")
    p.set_defaults(handler=cmd_report, name="report")
    return parser


def _error_payload(exc: BaseException, subcommand: str) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "subcommand": subcommand})


def dispatch(argv: list[str] | None = None) -> int:
    """Parse ``argv``, run the subcommand and write its RunManifest.

    Args:
        argv: Arguments without the program name (defaults to sys.argv[1:])

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    if args.verbose:
        setup_logger(level=logging.DEBUG, json_lines=True)

    out = ensure_out_dir(args.out or Config.OUTPUT_DIR / args.name.replace(" ", "-"))
    manifest = RunManifest(subcommand=args.name, tool_version=Config.TOOL_VERSION, started_at=utc_now())
    code = EXIT_OK
    try:
        args.handler(args, manifest, out)
    except CONFIG_ERRORS as e:
        logger.error(f"Invalid configuration for {args.name}: {e}")
        print(_error_payload(e, args.name), file=sys.stderr)
        code = EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.name} failed: {e}", exc_info=True)
        print(_error_payload(e, args.name), file=sys.stderr)
        code = EXIT_FAILURE
    manifest.finished_at = utc_now()
    manifest.status = "ok" if code == EXIT_OK else "failed"
    write_manifest(out, manifest)
    return code


def main() -> None:
    """Console script entry point."""
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
