"""
CLI entry point for the instance-adaptive self-training lab.

Generates synthetic domain-adaptation benchmarks, runs warm-up plus
self-training experiments and sweeps, re-scores checkpoints and runs the
pseudo-label selector on saved probability maps.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

import functools
import json
import logging
import math
import sys
import traceback
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import click
import numpy as np
import structlog
from pydantic import ValidationError

from . import __version__
from .config import (
    ConfigError,
    config_hash,
    dump_config,
    load_config,
    parse_lines,
    parse_override,
    worker_threads,
)
from .losses import LossError
from .metrics import MetricsError, evaluate_model, pseudo_label_stats
from .report import ReportError, RunWriter, plot_sweep, write_csv, write_sweep_csv
from .seg_model import ModelError, load_checkpoint
from .selector import (
    PseudoLabelGenerator,
    SelectionMode,
    SelectorConfig,
    SelectorError,
    save_pseudo_labels,
    validate_probs,
)
from .sweep import parse_values, resolve_axis, run_sweep, selection_sweep, sweep_configs
from .synth_data import SyntheticDataError, load_benchmark, load_dataset, save_benchmark
from .tensor_store import TensorStoreError, load_array
from .trainer import (
    ExperimentConfig,
    TrainerError,
    TrainingAbortedError,
    build_benchmark,
    run_ablation,
    run_experiment,
    run_ssl,
)

EXIT_USAGE = 2
EXIT_RUNTIME = 3

RUNTIME_ERRORS = (
    TensorStoreError, SyntheticDataError, ModelError, SelectorError, LossError,
    TrainerError, MetricsError, ReportError, OSError,
)

logger = structlog.get_logger(__name__)

F = TypeVar("F", bound=Callable[..., Any])


def setup_logging(debug: bool = False) -> None:
    """Configure structlog for one CLI invocation; logs go to stderr."""
    level = logging.DEBUG if debug else logging.INFO
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso", utc=True),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def format_output(data: dict[str, Any], compact: bool = False) -> str:
    if compact:
        return json.dumps(data, separators=(",", ":"))
    return json.dumps(data, indent=2)


def _floats(values: Any) -> list[float | None]:
    return [None if math.isnan(v) else float(v) for v in values]


def exit_codes(func: F) -> F:
    """Map package exceptions to the CLI exit-code contract."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        ctx = click.get_current_context()
        debug = bool(ctx.find_root().params.get("debug"))
        try:
            return func(*args, **kwargs)
        except (ConfigError, ValidationError) as e:
            click.echo(f"Configuration error: {e}", err=True)
            ctx.exit(EXIT_USAGE)
        except TrainingAbortedError as e:
            click.echo(f"Training aborted after {len(e.records)} round(s): {e}", err=True)
            ctx.exit(EXIT_RUNTIME)
        except RUNTIME_ERRORS as e:
            click.echo(f"Error: {e}", err=True)
            if debug:
                traceback.print_exc()
            ctx.exit(EXIT_RUNTIME)

    return wrapper  # type: ignore[return-value]


def _load(config_path: str, sets: tuple[str, ...], **flags: Any) -> ExperimentConfig:
    overrides = dict(parse_override(s) for s in sets)
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return load_config(config_path, overrides)


config_option = click.option(
    "--config", "-c", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
    help="Flat key = value config file",
)
set_option = click.option(
    "--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a config key (repeatable)",
)


@click.group(invoke_without_command=True)
@click.option("--debug", is_flag=True, help="Enable debug logging")
@click.option("--version", is_flag=True, help="Show version and exit")
@click.pass_context
def cli(ctx: click.Context, debug: bool, version: bool) -> None:
    """Instance-adaptive self-training lab for domain-adaptive segmentation."""
    setup_logging(debug)

    if version:
        click.echo(f"iast-lab {__version__}")
        ctx.exit()

    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@cli.command("gen-data")
@config_option
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
@set_option
@exit_codes
def gen_data(config_path: str, out: str, sets: tuple[str, ...]) -> None:
    """Generate the source/target benchmark described by a config."""
    cfg = _load(config_path, sets)
    root = save_benchmark(build_benchmark(cfg), out)
    click.echo(f"Benchmark written to {root}", err=True)


def _summary(result_miou: float, records: list[Any], out: str, **extra: Any) -> dict[str, Any]:
    data: dict[str, Any] = dict(extra)
    data["rounds"] = [
        {
            "round": r.round_index,
            "proportion": r.proportion,
            "p_miou": r.p_miou,
            "target_miou": r.target_miou,
        }
        for r in records
    ]
    data["final_miou"] = result_miou
    data["out"] = out
    return data


@cli.command()
@config_option
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Run directory")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              help="Benchmark directory from gen-data (default: generate from config)")
@click.option("--rounds", type=click.IntRange(min=1), help="Override the number of rounds")
@click.option("--seed", type=click.IntRange(min=0), help="Override the seed")
@click.option("--ablation", is_flag=True, help="Run the four ablation cells")
@click.option("--compact", is_flag=True, help="Compact JSON output")
@set_option
@exit_codes
def run(config_path: str, out: str, data_dir: str | None, rounds: int | None, seed: int | None,
        ablation: bool, compact: bool, sets: tuple[str, ...]) -> None:
    """Run warm-up and self-training rounds; write records, checkpoints and a report."""
    cfg = _load(config_path, sets, rounds=rounds, seed=seed)
    logger.info("run_started", seed=cfg.seed, rounds=cfg.rounds, config_hash=config_hash(cfg)[:12])
    bench = load_benchmark(data_dir) if data_dir else None
    if bench is not None and bench.spec.num_classes != cfg.num_classes:
        raise ConfigError(
            "data.scene.num_classes",
            f"config has {cfg.num_classes} classes, benchmark {data_dir} has {bench.spec.num_classes}",
        )

    if ablation:
        writers: dict[str, RunWriter] = {}

        def observer(cell: str, cell_cfg: ExperimentConfig) -> RunWriter:
            writers[cell] = RunWriter(Path(out) / cell.replace("+", "_"), cell_cfg)
            return writers[cell]

        results = run_ablation(cfg, bench, observers=observer)
        for w in writers.values():
            w.finish()
        rows = [[cell, f"{r.warmup.miou:.6f}", f"{r.final_miou:.6f}"] for cell, r in results.items()]
        write_csv(Path(out) / "ablation.csv", ["cell", "warmup_miou", "final_miou"], rows)
        click.echo(format_output(
            {cell: {"warmup_miou": r.warmup.miou, "final_miou": r.final_miou} for cell, r in results.items()},
            compact,
        ))
        return

    writer = RunWriter(out, cfg)
    if cfg.ssl is not None:
        ssl = run_ssl(cfg, observer=writer)
        writer.finish()
        click.echo(format_output(_summary(
            ssl.final_miou, ssl.records, out,
            baseline_miou=ssl.baseline.miou, labeled=ssl.labeled_count, unlabeled=ssl.unlabeled_count,
        ), compact))
        return

    result = run_experiment(cfg, bench, observer=writer)
    writer.finish()
    click.echo(format_output(
        _summary(result.final_miou, result.records, out, warmup_miou=result.warmup.miou), compact
    ))


@cli.command()
@config_option
@click.option("--axis", required=True,
              help="alpha, beta, gamma, lambda_i, lambda_c or any dotted config key")
@click.option("--values", "values_text", required=True, help='Comma-separated values, e.g. "0,1,4,8,16"')
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Sweep directory")
@click.option("--selection-only", is_flag=True,
              help="Only regenerate pseudo-labels from one warm-up model (selector axes)")
@click.option("--jobs", type=click.IntRange(min=1), help="Worker processes (default: IAST_THREADS or 1)")
@click.option("--seed", type=click.IntRange(min=0), help="Override the seed")
@set_option
@exit_codes
def sweep(config_path: str, axis: str, values_text: str, out: str, selection_only: bool,
          jobs: int | None, seed: int | None, sets: tuple[str, ...]) -> None:
    """Run one experiment per value of a hyperparameter; write sweep.csv and SVG plots."""
    key = resolve_axis(axis)
    values = parse_values(values_text)
    base = parse_lines(Path(config_path).read_text(encoding="utf-8"), config_path)
    base.update(dict(parse_override(s) for s in sets))
    if seed is not None:
        base["seed"] = seed
    configs = sweep_configs(base, key, values)

    if selection_only:
        if not key.startswith("selector."):
            raise ConfigError(key, "--selection-only sweeps selector keys only")
        rows = selection_sweep(configs, values)
    else:
        workers = jobs or worker_threads()
        rows = run_sweep(configs, values, jobs=workers, out_dir=out)

    out_dir = Path(out)
    csv_path = write_sweep_csv(axis, rows, out_dir / "sweep.csv")
    plot_sweep(axis, rows, out_dir)
    click.echo(csv_path.read_text(encoding="utf-8"), nl=False)


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False),
              help="Checkpoint directory")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Dataset split directory (visible masks or hidden ground truth)")
@click.option("--compact", is_flag=True, help="Compact JSON output")
@exit_codes
def eval_cmd(checkpoint: str, data_dir: str, compact: bool) -> None:
    """Re-score a checkpoint on a saved dataset split."""
    model = load_checkpoint(checkpoint)
    dataset, hidden = load_dataset(data_dir)
    evaluation = evaluate_model(model, dataset, hidden)
    click.echo(format_output({
        "miou": evaluation.miou,
        "iou": _floats(evaluation.iou),
        "pixel_accuracy": evaluation.pixel_accuracy,
        "images": len(dataset),
    }, compact))


@cli.command("pseudo-label")
@click.option("--probs", "probs_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of ProbMap .iast files (processed in name order)")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--mode", type=click.Choice([m.value for m in SelectionMode]),
              default=SelectionMode.INSTANCE_ADAPTIVE.value, show_default=True)
@click.option("--alpha", type=float, default=0.2, show_default=True)
@click.option("--beta", type=float, default=0.9, show_default=True)
@click.option("--gamma", type=float, default=8.0, show_default=True)
@click.option("--threshold", type=float, default=0.9, show_default=True,
              help="Threshold for constant mode")
@click.option("--gt", "gt_dir", type=click.Path(exists=True, file_okay=False),
              help="Dataset split with ground truth, to report P-mIoU")
@exit_codes
def pseudo_label(probs_dir: str, out: str, mode: str, alpha: float, beta: float, gamma: float,
                 threshold: float, gt_dir: str | None) -> None:
    """Run the selector standalone on saved probability maps."""
    cfg = SelectorConfig(
        mode=SelectionMode(mode), alpha=alpha, beta=beta, gamma=gamma, constant_threshold=threshold
    )
    paths = sorted(Path(probs_dir).glob("*.iast"))
    if not paths:
        raise ConfigError("--probs", f"no .iast files in {probs_dir}")
    probs = [np.asarray(load_array(p), dtype=np.float64) for p in paths]
    generator = PseudoLabelGenerator(cfg, probs[0].shape[0])
    batch, _ = generator.generate(validate_probs(probs))

    report: dict[str, object] = {"sources": [p.name for p in paths]}
    if gt_dir:
        dataset, hidden = load_dataset(gt_dir)
        gt = hidden if hidden is not None else dataset.masks
        if gt is None:
            raise ConfigError("--gt", f"{gt_dir} has no masks")
        stats = pseudo_label_stats(batch, gt)
        report["p_miou"] = "N/A" if stats.p_miou is None else stats.p_miou
        report["precision"] = stats.precision
    save_pseudo_labels(batch, out, report)
    click.echo(format_output({"images": len(batch.masks), "proportion": batch.proportion, **{
        k: v for k, v in report.items() if k != "sources"
    }}))


@cli.command("check-config")
@config_option
@set_option
@exit_codes
def check_config(config_path: str, sets: tuple[str, ...]) -> None:
    """Validate a config and print it in canonical form."""
    cfg = _load(config_path, sets)
    click.echo(dump_config(cfg), nl=False)
    click.echo(f"# sha256 {config_hash(cfg)}")


if __name__ == "__main__":
    sys.exit(cli())
