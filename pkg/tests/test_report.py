"""Tests for run artifacts."""

import numpy as np

from src.report import (
    RunManifest,
    RunWriter,
    Stage,
    SweepRow,
    plot_lines,
    plot_theta_trajectory,
    render_markdown,
    write_class_iou_csv,
    write_records_csv,
    write_sweep_csv,
)
from src.tensor_store import load_array
from src.trainer import RoundRecord, run_experiment


def make_record(round_index=1, p_miou=0.5, diversity=0.7):
    return RoundRecord(
        round_index=round_index,
        proportion=0.25,
        class_proportion=[0.2, 0.3, float("nan")],
        p_miou=p_miou,
        precision=None if p_miou is None else 0.8,
        diversity=diversity,
        generator_miou=0.4,
        target_miou=0.45,
        target_iou=[0.5, 0.4, float("nan")],
        loss_curve=[1.0, 0.5],
        theta_trajectory=np.array([[0.9, np.inf, 0.8]]),
    )


class TestTables:
    """CSV and Markdown output."""

    def test_records_csv(self, tmp_path):
        """Undefined values are empty cells."""
        path = write_records_csv([make_record(p_miou=None, diversity=None)], tmp_path / "r.csv")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("round,proportion,p_miou")
        assert lines[1].startswith("1,0.250000,,,,")

    def test_class_iou_csv(self, tmp_path):
        """One column per class plus mIoU; NaN is blank."""
        stages = [Stage("warm-up", [0.1, 0.2, float("nan")], 0.15)]
        lines = write_class_iou_csv(stages, tmp_path / "c.csv").read_text().splitlines()
        assert lines == ["stage,iou_0,iou_1,iou_2,miou", "warm-up,0.100000,0.200000,,0.150000"]

    def test_markdown_tables(self, tiny_config):
        """Per-class IoU rows per stage and a pseudo-label row per round."""
        stages = [Stage("warm-up", [0.5, 0.25, float("nan")], 0.375)]
        text = render_markdown(tiny_config, stages, [make_record(p_miou=None)])
        assert "| stage | class 0 | class 1 | class 2 | mIoU |" in text
        assert "| warm-up | 50.0 | 25.0 | - | 37.5 |" in text
        assert "| 1 | 25.0 | N/A | - | 0.700 | 45.0 |" in text

    def test_sweep_csv(self, tmp_path):
        """Sweep rows mark undefined P-mIoU as N/A."""
        rows = [SweepRow(0.0, 0.5, None, None), SweepRow(8.0, 0.25, 0.75, 0.6)]
        lines = write_sweep_csv("gamma", rows, tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "gamma,proportion,p_miou,final_miou"
        assert lines[1] == "0.0,0.500000,N/A,"
        assert lines[2] == "8.0,0.250000,0.750000,0.600000"


class TestPlots:
    """SVG output."""

    def test_svg_is_deterministic(self, tmp_path):
        """The same data renders byte-identical SVG."""
        series = {"a": ([0, 1, 2], [0.5, 0.25, 0.125]), "b": ([0, 1, 2], [1.0, 0.0, 1.0])}
        first = plot_lines(tmp_path / "a.svg", series, "t", "x", "y").read_bytes()
        second = plot_lines(tmp_path / "b.svg", series, "t", "x", "y").read_bytes()
        assert first == second
        assert first.lstrip().startswith(b"<?xml")

    def test_theta_trajectory_with_absent_class(self, tmp_path):
        """Absent (infinite) thresholds do not break the plot."""
        path = plot_theta_trajectory(np.array([[0.9, np.inf], [0.88, 0.7]]), tmp_path / "t.svg")
        assert path.stat().st_size > 0


class TestRunWriter:
    """Run directory layout."""

    def test_complete_run(self, tmp_path, tiny_config):
        """A finished run has every artifact and a complete manifest."""
        writer = RunWriter(tmp_path, tiny_config)
        result = run_experiment(tiny_config, observer=writer)
        manifest = writer.finish()

        for name in ("config.conf", "records.csv", "loss_curve.csv", "class_iou.csv",
                     "report.md", "loss_curve.svg", "run_manifest.json"):
            assert (tmp_path / name).is_file(), name
        assert (tmp_path / "checkpoints" / "warmup" / "architecture.json").is_file()
        assert (tmp_path / "checkpoints" / "round_1").is_dir()
        labels = tmp_path / "pseudo_labels" / "round_1"
        assert (labels / "theta_trajectory.svg").is_file()
        mask = load_array(labels / "label_00000.iast")
        assert mask.shape == (12, 12) and mask.dtype == np.int32
        assert (labels / "label_00005.iast").is_file()

        saved = RunManifest.model_validate_json((tmp_path / "run_manifest.json").read_text())
        assert saved.status == "complete" == manifest.status
        assert saved.finished_at is not None
        assert saved.artifacts["checkpoint_round_1"] == "checkpoints/round_1"
        assert len(result.records) == 1
        assert "| round 1 |" in (tmp_path / "report.md").read_text()

    def test_abort_marks_manifest(self, tmp_path, tiny_config):
        """on_abort records the error and keeps completed rounds."""
        writer = RunWriter(tmp_path, tiny_config)
        writer.on_abort([], RuntimeError("boom"))
        saved = RunManifest.model_validate_json((tmp_path / "run_manifest.json").read_text())
        assert saved.status == "aborted"
        assert saved.error == "boom"

    def test_artifacts_independent_of_clock(self, tmp_path, tiny_config):
        """Two runs of one config write identical files apart from the manifest."""
        for name in ("a", "b"):
            writer = RunWriter(tmp_path / name, tiny_config)
            run_experiment(tiny_config, observer=writer)
            writer.finish()
        files = sorted(
            p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
            if p.is_file() and p.name != "run_manifest.json"
        )
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
