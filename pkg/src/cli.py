#!/usr/bin/env python3
"""Command-line interface for the QE lab."""

import argparse
import json
import logging
import sys
import traceback
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import ExperimentConfig, load_config, make_run_dir
from src.data import (
    DOMAIN_MANIFEST,
    DatasetManifest,
    DatasetSplit,
    Domain,
    FileFormat,
    PlantedSignal,
    load_dataset,
    make_catalog_dataset,
    make_synthetic_dataset,
    validate_manifest,
    write_dataset,
)
from src.errors import (
    CheckpointError,
    ConfigError,
    CredentialsError,
    DataError,
    LayerIndexError,
    PromptError,
    QeLabError,
    ReportError,
)
from src.metrics import (
    METRICS,
    ConfigKey,
    MetricReport,
    comparison_table,
    compute_report,
    emit_sweep_table,
    read_metrics_csv,
    verify_sweep_table,
    write_metrics_csv,
)
from src.prompting import (
    EchoGoldClient,
    ExemplarPolicy,
    FixedResponseClient,
    HashScoreClient,
    HttpScorerClient,
    RetryPolicy,
    ScorerClient,
    load_template,
    prompt_filename,
    render_split,
    score_dataset,
    write_failures_jsonl,
)
from src.qe_head import (
    TrainConfig,
    TrainedQeModel,
    evaluate,
    train,
    write_loss_csv,
    write_predictions_jsonl,
)
from src.transformer import init_model

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"

# Exit code per error family; anything else is an internal error (1)
EXIT_CODES: tuple[tuple[type[Exception], int], ...] = (
    (CredentialsError, 3),
    (ConfigError, 2),
    (DataError, 2),
    (CheckpointError, 2),
    (ReportError, 2),
    (PromptError, 2),
    (LayerIndexError, 2),
)


def generated(path: Path) -> None:
    print(f"Generated: {path}")


def load_split(cfg: ExperimentConfig) -> DatasetSplit:
    """The configured dataset directory, or a synthetic split when none is set."""
    if cfg.data.path is not None:
        return load_dataset(cfg.data.path, cfg.data.format, strict=cfg.data.strict)
    return make_synthetic_dataset(
        cfg.data.synthetic_n,
        seed=cfg.seed,
        signal=PlantedSignal(noise_std=cfg.data.noise_std),
        domain=cfg.data.domain,
        lang_pairs=cfg.data.lang_pairs,
    )


def adapter_key(train_cfg: TrainConfig) -> ConfigKey:
    adapter = train_cfg.adapter
    return ConfigKey(adapter.kind.value, adapter.rank, float(adapter.alpha), train_cfg.layer_index)


def evaluate_into(
    trained: TrainedQeModel,
    split: DatasetSplit,
    run_dir: Path,
    report: MetricReport,
    workers: int = 1,
) -> Path:
    """Predict the test split, add per-(domain, pair) correlations to `report`."""
    predictions = evaluate(trained, split.test, workers=workers)
    compute_report(
        split.test,
        [p.prediction for p in predictions],
        adapter_key(trained.config),
        report=report,
        source=str(run_dir),
    )
    return write_predictions_jsonl(run_dir / "predictions.jsonl", predictions)


# ============================================================================
# Commands
# ============================================================================


def cmd_train(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    split = load_split(cfg)
    run_dir = make_run_dir(cfg.output_dir, "train", cfg)
    model = init_model(cfg.model, quantize=cfg.quantize)
    trained = train(model, split.train, cfg.train)
    report = MetricReport()
    for path in (
        save_checkpoint(trained, run_dir / "checkpoint.json"),
        write_loss_csv(run_dir / "loss.csv", trained.loss_trace),
        evaluate_into(trained, split, run_dir, report, cfg.grid.workers),
        write_metrics_csv(report, run_dir / METRICS_FILE),
    ):
        generated(path)


def cmd_sweep(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    split = load_split(cfg)
    run_dir = make_run_dir(cfg.output_dir, "sweep", cfg)
    report = MetricReport()
    cells = [
        (kind, rank, alpha, layer)
        for kind in cfg.grid.kinds
        for rank, alpha in cfg.grid.rank_alpha
        for layer in cfg.grid.layers
    ]
    failed: list[tuple[str, QeLabError]] = []
    for n, (kind, rank, alpha, layer) in enumerate(cells, start=1):
        adapter = replace(cfg.train.adapter, kind=kind, rank=rank, alpha=alpha)
        train_cfg = replace(cfg.train, adapter=adapter, layer_index=layer)
        label = adapter_key(train_cfg).label
        logger.info("sweep cell %d/%d: %s", n, len(cells), label)
        try:
            trained = train(init_model(cfg.model, quantize=cfg.quantize), split.train, train_cfg)
            predictions = evaluate(trained, split.test, workers=cfg.grid.workers)
            compute_report(
                split.test,
                [p.prediction for p in predictions],
                adapter_key(train_cfg),
                report=report,
                source=str(run_dir),
            )
        except QeLabError as e:
            logger.error("sweep cell %s failed, recorded as NA: %s", label, e)
            failed.append((label, e))
    generated(write_metrics_csv(report, run_dir / METRICS_FILE))

    domains = [d for d in Domain if any(r.domain is d for r in split.test)]
    for kind in dict.fromkeys(cfg.grid.kinds):
        for metric in METRICS:
            table = emit_sweep_table(
                report,
                metric=metric,
                method=kind.value,
                domains=domains,
                layers=cfg.grid.layers,
                rank_alpha=cfg.grid.rank_alpha,
            )
            verify_sweep_table(table, report)
            stem = run_dir / f"sweep_{kind.value}_{metric}"
            csv_path = stem.with_suffix(".csv")
            csv_path.write_text(table.to_csv(), encoding="utf-8")
            text_path = stem.with_suffix(".txt")
            text_path.write_text(table.to_text(), encoding="utf-8")
            generated(csv_path)
            generated(text_path)

    if failed:
        labels = ", ".join(label for label, _ in failed)
        print(f"{len(failed)}/{len(cells)} sweep cells failed (NA): {labels}", file=sys.stderr)
        raise failed[0][1]


def cmd_evaluate(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    trained = load_checkpoint(args.checkpoint)
    split = load_split(cfg)
    run_dir = make_run_dir(cfg.output_dir, "evaluate", cfg)
    report = MetricReport()
    generated(evaluate_into(trained, split, run_dir, report, cfg.grid.workers))
    generated(write_metrics_csv(report, run_dir / METRICS_FILE))


def make_client(cfg: ExperimentConfig, split: DatasetSplit) -> ScorerClient:
    prompt = cfg.prompt
    if prompt.client == "http":
        client = HttpScorerClient.from_env(prompt.endpoint, prompt.model)
        if not prompt.endpoint:
            raise ConfigError("prompt.endpoint must be set for the http client")
        return client
    if prompt.client == "fixed":
        return FixedResponseClient(prompt.fixed_response)
    if prompt.client == "echo":
        return EchoGoldClient({r.id: r.da_score for r in split.test})
    return HashScoreClient()


def cmd_prompt_render(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    template = load_template(cfg.prompt.kind, cfg.prompt.template_dir)
    split = load_split(cfg)
    rendered = render_split(template, split, ExemplarPolicy(cfg.prompt.k, cfg.seed))
    run_dir = make_run_dir(cfg.output_dir, "prompt-render", cfg)
    prompt_dir = run_dir / "prompts"
    prompt_dir.mkdir()
    for index, item in enumerate(rendered):
        (prompt_dir / prompt_filename(index, item.record.id)).write_text(
            item.prompt, encoding="utf-8"
        )
    generated(prompt_dir)
    print(f"Rendered {len(rendered)} {cfg.prompt.kind.value} prompts")


def cmd_prompt_score(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    template = load_template(cfg.prompt.kind, cfg.prompt.template_dir)
    split = load_split(cfg)
    client = make_client(cfg, split)
    run_dir = make_run_dir(cfg.output_dir, "prompt-score", cfg)
    result = score_dataset(
        client,
        template,
        split,
        ExemplarPolicy(cfg.prompt.k, cfg.seed),
        concurrency=cfg.prompt.concurrency,
        retry=RetryPolicy(attempts=cfg.prompt.retry_attempts, seed=cfg.seed),
        temperature=cfg.prompt.temperature,
        max_tokens=cfg.prompt.max_tokens,
    )
    report = compute_report(
        result.records, result.values, ConfigKey(cfg.prompt.kind.value), source=str(run_dir)
    )
    for path in (
        write_predictions_jsonl(run_dir / "predictions.jsonl", result.predictions),
        write_failures_jsonl(run_dir / "failures.jsonl", result.failures),
        write_metrics_csv(report, run_dir / METRICS_FILE),
    ):
        generated(path)
    print(
        f"Scored {len(result.predictions)} records, {len(result.failures)} failed, "
        f"{result.n_clamped} clamped"
    )


def cmd_report(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    reports = []
    for run in args.runs:
        path = Path(run)
        reports.append(read_metrics_csv(path / METRICS_FILE if path.is_dir() else path))
    if not reports:
        raise ReportError("no run directories given")
    tables = [comparison_table(reports, metric) for metric in METRICS]
    run_dir = make_run_dir(cfg.output_dir, "report", cfg)
    for table in tables:
        stem = run_dir / f"comparison_{table.metric}"
        for suffix, text in ((".csv", table.to_csv()), (".txt", table.to_text())):
            path = stem.with_suffix(suffix)
            path.write_text(text, encoding="utf-8")
            generated(path)


def cmd_synth(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    signal = PlantedSignal(noise_std=cfg.data.noise_std)
    if args.catalog or args.manifest:
        manifest = DOMAIN_MANIFEST
        if args.manifest:
            try:
                manifest = DatasetManifest.from_json(
                    json.loads(Path(args.manifest).read_text(encoding="utf-8"))
                )
            except (OSError, json.JSONDecodeError) as e:
                raise DataError(f"cannot read manifest {args.manifest}: {e}") from e
        split = make_catalog_dataset(manifest, seed=cfg.seed, signal=signal)
        problems = validate_manifest(split, manifest)
        if problems:
            raise DataError("generated dataset does not match its manifest: " + "; ".join(problems))
    else:
        split = make_synthetic_dataset(
            args.n or cfg.data.synthetic_n,
            seed=cfg.seed,
            signal=signal,
            domain=cfg.data.domain,
            lang_pairs=cfg.data.lang_pairs,
        )
    for path in write_dataset(split, args.output, args.format):
        generated(path)


# ============================================================================
# Argument parsing
# ============================================================================


def add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", help="JSON experiment config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config value, e.g. --set train.epochs=50 (repeatable)",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG logging"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qe-lab",
        description="Train and evaluate reference-free translation quality estimators",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s synth data/synthetic --n 500
  %(prog)s train --set data.path=data/synthetic --set train.layer_index=-7
  %(prog)s sweep -c sweep.json -v
  %(prog)s evaluate runs/train-20260101T000000Z-0a1b2c3d/checkpoint.json
  %(prog)s prompt score --set prompt.kind=few_shot --set prompt.client=echo
  %(prog)s report runs/sweep-* runs/prompt-score-*
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", help="Train one adapter configuration")
    add_common(train_parser)
    train_parser.set_defaults(func=cmd_train)

    sweep_parser = commands.add_parser("sweep", help="Train every rank/alpha/layer grid cell")
    add_common(sweep_parser)
    sweep_parser.set_defaults(func=cmd_sweep)

    evaluate_parser = commands.add_parser("evaluate", help="Score a dataset with a checkpoint")
    evaluate_parser.add_argument("checkpoint", help="checkpoint.json written by train")
    add_common(evaluate_parser)
    evaluate_parser.set_defaults(func=cmd_evaluate)

    prompt_parser = commands.add_parser("prompt", help="Prompt-only evaluation")
    prompt_commands = prompt_parser.add_subparsers(dest="prompt_command", required=True)
    render_parser = prompt_commands.add_parser("render", help="Write one prompt per test record")
    add_common(render_parser)
    render_parser.set_defaults(func=cmd_prompt_render)
    score_parser = prompt_commands.add_parser("score", help="Score test records with a scorer")
    add_common(score_parser)
    score_parser.set_defaults(func=cmd_prompt_score)

    report_parser = commands.add_parser("report", help="Merge run metrics into one table")
    report_parser.add_argument("runs", nargs="+", help="Run directories or metrics.csv files")
    add_common(report_parser)
    report_parser.set_defaults(func=cmd_report)

    synth_parser = commands.add_parser("synth", help="Write a synthetic dataset")
    synth_parser.add_argument("output", help="Directory for train/test files")
    synth_parser.add_argument("--n", type=int, help="Number of records (default data.synthetic_n)")
    synth_parser.add_argument(
        "--format", choices=[f.value for f in FileFormat], default=FileFormat.JSONL.value
    )
    synth_parser.add_argument(
        "--catalog", action="store_true", help="Generate the built-in per-domain manifest sizes"
    )
    synth_parser.add_argument("--manifest", help="JSON manifest of per-domain split sizes")
    add_common(synth_parser)
    synth_parser.set_defaults(func=cmd_synth)
    return parser


def exit_code(error: Exception) -> int:
    for error_type, code in EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return 1


def main(argv: Sequence[str] | None = None) -> None:
    """Main entry point for CLI."""
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    command: Callable[[argparse.Namespace, ExperimentConfig], None] = args.func
    try:
        cfg = load_config(args.config, args.overrides)
        command(args, cfg)
    except Exception as e:
        code = exit_code(e)
        print(f"Error: {e}", file=sys.stderr)
        if args.verbose >= 2:
            traceback.print_exc(file=sys.stderr)
        elif code == 1:
            print(f"  {type(e).__name__}; rerun with -vv for a traceback", file=sys.stderr)
        sys.exit(code)


if __name__ == "__main__":
    main()
