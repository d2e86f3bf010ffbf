"""
Run artifacts: CSV tables, Markdown report, SVG plots and the run manifest.

Timestamps appear only in ``run_manifest.json``; every other file is a
pure function of the config and seed.
"""

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from datetime import UTC, datetime
from pathlib import Path
from typing import Any, Literal

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update({"svg.hashsalt": "iast", "font.family": "DejaVu Sans"})

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import structlog  # noqa: E402
from numpy.typing import NDArray  # noqa: E402
from pydantic import BaseModel, Field  # noqa: E402

from . import __version__  # noqa: E402
from .config import config_hash, dump_config  # noqa: E402
from .metrics import Evaluation  # noqa: E402
from .seg_model import SegModel, save_checkpoint  # noqa: E402
from .selector import PseudoLabelBatch, save_pseudo_labels  # noqa: E402
from .trainer import ExperimentConfig, RoundRecord  # noqa: E402

logger = structlog.get_logger(__name__)

CONFIG_SNAPSHOT = "config.conf"
MANIFEST_FILE = "run_manifest.json"

RunStatus = Literal["running", "complete", "aborted"]


class ReportError(Exception):
    """Artifact could not be written."""
    pass


class RunManifest(BaseModel):
    """Provenance of one run directory."""
    tool_version: str = __version__
    config_hash: str
    seed: int
    started_at: str
    finished_at: str | None = None
    status: RunStatus = "running"
    error: str | None = None
    artifacts: dict[str, str] = Field(default_factory=dict, description="name -> relative path")


def utc_now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def _cell(value: float | None, digits: int = 6) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.{digits}f}"


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    return path


def write_records_csv(records: Sequence[RoundRecord], path: Path) -> Path:
    header = [
        "round", "proportion", "p_miou", "precision", "diversity",
        "generator_miou", "target_miou", "source_images_in_phase_c",
    ]
    rows = [
        [
            r.round_index, _cell(r.proportion), _cell(r.p_miou), _cell(r.precision),
            _cell(r.diversity), _cell(r.generator_miou), _cell(r.target_miou),
            r.source_images_in_phase_c,
        ]
        for r in records
    ]
    return write_csv(path, header, rows)


def write_loss_csv(records: Sequence[RoundRecord], path: Path) -> Path:
    rows = [
        [r.round_index, step, _cell(loss, 8)]
        for r in records
        for step, loss in enumerate(r.loss_curve)
    ]
    return write_csv(path, ["round", "step", "loss"], rows)


@dataclass
class Stage:
    """One row of the per-class IoU table."""
    name: str
    iou: Sequence[float]
    miou: float


def stages_from(warmup: Evaluation, records: Sequence[RoundRecord]) -> list[Stage]:
    stages = [Stage("warm-up", warmup.iou.tolist(), warmup.miou)]
    stages += [Stage(f"round {r.round_index}", r.target_iou, r.target_miou) for r in records]
    return stages


def write_class_iou_csv(stages: Sequence[Stage], path: Path) -> Path:
    num_classes = len(stages[0].iou) if stages else 0
    header = ["stage"] + [f"iou_{c}" for c in range(num_classes)] + ["miou"]
    rows = [[s.name, *(_cell(v) for v in s.iou), _cell(s.miou)] for s in stages]
    return write_csv(path, header, rows)


def _pct(value: float | None) -> str:
    if value is None or math.isnan(value):
        return "-"
    return f"{100.0 * value:.1f}"


def render_markdown(
    cfg: ExperimentConfig,
    stages: Sequence[Stage],
    records: Sequence[RoundRecord],
    status: RunStatus = "complete",
) -> str:
    """Markdown report: per-class IoU table (one row per stage) and round summary."""
    c = cfg.num_classes
    lines = [
        "# Self-training run",
        "",
        f"- seed: {cfg.seed}",
        f"- config hash: `{config_hash(cfg)}`",
        f"- selector: {cfg.selector.mode.value} "
        f"(alpha={cfg.selector.alpha}, beta={cfg.selector.beta}, gamma={cfg.selector.gamma})",
        f"- losses: lambda_i={cfg.losses.lambda_i}, lambda_c={cfg.losses.lambda_c}",
        f"- status: {status}",
        "",
        "## Per-class IoU (%)",
        "",
        "| stage | " + " | ".join(f"class {i}" for i in range(c)) + " | mIoU |",
        "|---|" + "---:|" * (c + 1),
    ]
    for s in stages:
        lines.append(f"| {s.name} | " + " | ".join(_pct(v) for v in s.iou) + f" | {_pct(s.miou)} |")

    if records:
        lines += [
            "",
            "## Pseudo-labels",
            "",
            "| round | proportion | P-mIoU | precision | diversity | target mIoU |",
            "|---:|---:|---:|---:|---:|---:|",
        ]
        for r in records:
            p_miou = "N/A" if r.p_miou is None else _pct(r.p_miou)
            diversity = "-" if r.diversity is None else f"{r.diversity:.3f}"
            lines.append(
                f"| {r.round_index} | {_pct(r.proportion)} | {p_miou} | "
                f"{_pct(r.precision)} | {diversity} | {_pct(r.target_miou)} |"
            )
    return "\n".join(lines) + "\n"


def plot_lines(
    path: Path,
    series: dict[str, tuple[Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
) -> Path:
    """Line plot written as SVG text (no timestamp metadata)."""
    fig, ax = plt.subplots(figsize=(6, 3.6), constrained_layout=True)
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend(loc="best", fontsize=8)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def plot_theta_trajectory(thresholds: NDArray[np.float64], path: Path) -> Path:
    """Per-class theta against instance index; absent classes leave gaps."""
    theta = np.where(np.isfinite(thresholds), thresholds, np.nan)
    xs = list(range(theta.shape[0]))
    series = {f"class {c}": (xs, theta[:, c].tolist()) for c in range(theta.shape[1])}
    return plot_lines(path, series, "Threshold trajectory", "instance", "theta")


@dataclass
class SweepRow:
    value: float
    proportion: float
    p_miou: float | None
    final_miou: float | None


def write_sweep_csv(axis: str, rows: Sequence[SweepRow], path: Path) -> Path:
    return write_csv(
        path,
        [axis, "proportion", "p_miou", "final_miou"],
        [
            [r.value, _cell(r.proportion), "N/A" if r.p_miou is None else _cell(r.p_miou),
             _cell(r.final_miou)]
            for r in rows
        ],
    )


def plot_sweep(axis: str, rows: Sequence[SweepRow], out_dir: Path) -> list[Path]:
    xs = [r.value for r in rows]
    paths = [
        plot_lines(out_dir / "sweep_proportion.svg",
                   {"proportion": (xs, [r.proportion for r in rows])},
                   f"Labeled proportion vs {axis}", axis, "proportion"),
        plot_lines(out_dir / "sweep_p_miou.svg",
                   {"P-mIoU": (xs, [math.nan if r.p_miou is None else r.p_miou for r in rows])},
                   f"P-mIoU vs {axis}", axis, "P-mIoU"),
    ]
    if any(r.final_miou is not None for r in rows):
        paths.append(plot_lines(
            out_dir / "sweep_final_miou.svg",
            {"final mIoU": (xs, [math.nan if r.final_miou is None else r.final_miou for r in rows])},
            f"Final target mIoU vs {axis}", axis, "mIoU",
        ))
    return paths


class RunWriter:
    """
    Persists a run directory while an experiment progresses.

    Layout::

        config.conf                 dumped config (hash in the manifest)
        checkpoints/warmup/         checkpoints/round_<k>/
        pseudo_labels/round_<k>/    masks, theta_trajectory.{csv,svg}, report.json
        records.csv  loss_curve.csv  class_iou.csv  report.md
        run_manifest.json

    Tables are rewritten after every round so an aborted run keeps its
    completed rounds.
    """

    def __init__(self, out_dir: str | Path, cfg: ExperimentConfig):
        self.root = Path(out_dir)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)
        snapshot = dump_config(cfg)
        (self.root / CONFIG_SNAPSHOT).write_text(snapshot, encoding="utf-8")
        self.manifest = RunManifest(config_hash=config_hash(cfg), seed=cfg.seed, started_at=utc_now())
        self.manifest.artifacts["config"] = CONFIG_SNAPSHOT
        self.warmup_eval: Evaluation | None = None
        self.records: list[RoundRecord] = []
        self._write_manifest()

    def _rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    def _write_manifest(self) -> None:
        (self.root / MANIFEST_FILE).write_text(
            self.manifest.model_dump_json(indent=2) + "\n", encoding="utf-8"
        )

    def on_warmup(self, model: SegModel, evaluation: Evaluation) -> None:
        path = save_checkpoint(model, self.root / "checkpoints" / "warmup")
        self.manifest.artifacts["checkpoint_warmup"] = self._rel(path)
        self.warmup_eval = evaluation
        self._write_tables()

    def on_round(self, record: RoundRecord, model: SegModel, batch: PseudoLabelBatch) -> None:
        k = record.round_index
        ckpt = save_checkpoint(model, self.root / "checkpoints" / f"round_{k}")
        labels = save_pseudo_labels(batch, self.root / "pseudo_labels" / f"round_{k}", report={
            "round": k,
            "p_miou": "N/A" if record.p_miou is None else record.p_miou,
            "precision": record.precision,
            "diversity": record.diversity,
            "generator_hash": record.generator_hash,
        })
        plot_theta_trajectory(record.theta_trajectory, labels / "theta_trajectory.svg")
        self.manifest.artifacts[f"checkpoint_round_{k}"] = self._rel(ckpt)
        self.manifest.artifacts[f"pseudo_labels_round_{k}"] = self._rel(labels)
        self.records.append(record)
        self._write_tables()

    def on_abort(self, records: list[RoundRecord], error: Exception) -> None:
        self.records = list(records)
        self.finish(status="aborted", error=str(error))

    def _write_tables(self, status: RunStatus = "running") -> None:
        if self.warmup_eval is None:
            return
        stages = stages_from(self.warmup_eval, self.records)
        tables = {
            "records": write_records_csv(self.records, self.root / "records.csv"),
            "loss_curve": write_loss_csv(self.records, self.root / "loss_curve.csv"),
            "class_iou": write_class_iou_csv(stages, self.root / "class_iou.csv"),
        }
        report = self.root / "report.md"
        report.write_text(render_markdown(self.cfg, stages, self.records, status), encoding="utf-8")
        tables["report"] = report
        if self.records:
            tables["loss_plot"] = plot_lines(
                self.root / "loss_curve.svg",
                {f"round {r.round_index}": (list(range(len(r.loss_curve))), r.loss_curve)
                 for r in self.records},
                "Self-training loss", "step", "loss",
            )
        for name, path in tables.items():
            self.manifest.artifacts[name] = self._rel(path)
        self._write_manifest()

    def finish(self, status: RunStatus = "complete", error: str | None = None) -> RunManifest:
        self._write_tables(status)
        self.manifest.status = status
        self.manifest.error = error
        self.manifest.finished_at = utc_now()
        self._write_manifest()
        logger.info("run_artifacts_written", path=str(self.root), status=status, rounds=len(self.records))
        return self.manifest
