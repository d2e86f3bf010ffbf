"""
One-parameter sweeps over selector and loss hyperparameters.

Every point shares the base seed, so points differ only in the swept value.
All point configs are validated before the first run starts.
"""

from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import structlog

from .config import ConfigError, build_config, check_key
from .metrics import pseudo_label_stats
from .report import RunWriter, SweepRow
from .selector import generate_pseudo_labels
from .synth_data import UdaBenchmark
from .trainer import ExperimentConfig, build_benchmark, run_experiment, warmup

logger = structlog.get_logger(__name__)

SWEEP_AXES: dict[str, str] = {
    "alpha": "selector.alpha",
    "beta": "selector.beta",
    "gamma": "selector.gamma",
    "lambda_i": "losses.lambda_i",
    "lambda_c": "losses.lambda_c",
}


def resolve_axis(axis: str) -> str:
    """Short axis name or any dotted config key."""
    key = SWEEP_AXES.get(axis, axis)
    check_key(key)
    return key


def parse_values(text: str) -> list[float]:
    """
    Parse ``"0, 1, 4"`` into numbers.

    Raises:
        ConfigError: empty list or a non-numeric entry
    """
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("--values", "no sweep values given")
    values = []
    for token in tokens:
        try:
            values.append(float(token))
        except ValueError as e:
            raise ConfigError("--values", f"not a number: {token!r}") from e
    return values


def sweep_configs(
    base: dict[str, Any], key: str, values: Sequence[float]
) -> list[ExperimentConfig]:
    """Validated config per value; the first illegal value raises before any run."""
    return [build_config({**base, key: v}) for v in values]


def selection_sweep(
    configs: Sequence[ExperimentConfig],
    values: Sequence[float],
    bench: UdaBenchmark | None = None,
) -> list[SweepRow]:
    """
    Regenerate pseudo-labels per value from one shared warm-up model.

    Only selector settings may differ between ``configs``; no self-training
    runs, so ``final_miou`` is None.
    """
    base = configs[0]
    bench = bench or build_benchmark(base)
    model = warmup(base, bench)
    rows = []
    for cfg, value in zip(configs, values, strict=True):
        batch, _ = generate_pseudo_labels(model, bench.target, cfg.selector)
        stats = pseudo_label_stats(batch, bench.target_gt)
        rows.append(SweepRow(value, stats.proportion, stats.p_miou, None))
        logger.info("sweep_point", value=value, proportion=round(stats.proportion, 4),
                    p_miou=stats.p_miou_text())
    return rows


def _run_point(cfg: ExperimentConfig, value: float, out_dir: str | None) -> SweepRow:
    writer = RunWriter(out_dir, cfg) if out_dir else None
    result = run_experiment(cfg, observer=writer)
    if writer is not None:
        writer.finish()
    first = result.records[0]
    logger.info("sweep_point", value=value, proportion=round(first.proportion, 4),
                final_miou=round(result.final_miou, 4))
    return SweepRow(value, first.proportion, first.p_miou, result.final_miou)


def run_sweep(
    configs: Sequence[ExperimentConfig],
    values: Sequence[float],
    jobs: int = 1,
    out_dir: str | Path | None = None,
) -> list[SweepRow]:
    """
    Full experiment per value; round-1 proportion and P-mIoU, final target mIoU.

    Args:
        jobs: worker processes (points run sequentially when 1)
        out_dir: parent directory for per-point run directories
    """
    dirs = [
        str(Path(out_dir) / f"point_{i:02d}") if out_dir is not None else None
        for i in range(len(configs))
    ]
    if jobs <= 1 or len(configs) == 1:
        return [_run_point(c, v, d) for c, v, d in zip(configs, values, dirs, strict=True)]

    with ProcessPoolExecutor(max_workers=min(jobs, len(configs))) as pool:
        futures = [
            pool.submit(_run_point, c, v, d) for c, v, d in zip(configs, values, dirs, strict=True)
        ]
        return [f.result() for f in futures]
