"""Shared fixtures."""

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from src.seg_model import ModelArchitecture, ModelConfig, SegModel
from src.synth_data import SceneSpec
from src.trainer import DataConfig, ExperimentConfig, WarmupConfig

ProbFactory = Callable[..., np.ndarray]

TINY_CONFIG = """\
# tiny benchmark for fast end-to-end tests
seed = 11
data.scene.num_classes = 3
data.scene.height = 12
data.scene.width = 12
data.scene.shapes_per_image = 3
data.n_source = 6
data.n_target = 6
data.n_val = 3
model.hidden_dims = [8]
warmup.epochs = 2
warmup.min_steps = 0
rounds = 1
epochs_per_round = 1
batch_size = 3
"""

# README desk.conf; every other setting at its default
DESK_CONFIG = """\
seed = 7
data.scene.num_classes = 4
data.n_source = 64
data.n_target = 128
data.n_val = 32
model.hidden_dims = [32]
warmup.epochs = 20
rounds = 3
"""


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_probs(rng: np.random.Generator) -> ProbFactory:
    """Random ProbMaps [C, H, W] as softmax of scaled Gaussian logits."""

    def factory(num_classes: int = 3, height: int = 8, width: int = 8, scale: float = 3.0) -> np.ndarray:
        logits = rng.normal(0.0, scale, size=(num_classes, height, width))
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)

    return factory


@pytest.fixture
def small_spec() -> SceneSpec:
    return SceneSpec(height=12, width=12, num_classes=3, shapes_per_image=3)


@pytest.fixture
def tiny_config(small_spec: SceneSpec) -> ExperimentConfig:
    return ExperimentConfig(
        seed=11,
        data=DataConfig(scene=small_spec, n_source=6, n_target=6, n_val=3),
        model=ModelConfig(hidden_dims=(8,)),
        warmup=WarmupConfig(epochs=2, min_steps=0),
        rounds=1,
        epochs_per_round=1,
        batch_size=3,
    )


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def float64_model() -> SegModel:
    """Two-layer model in float64 for finite-difference checks."""
    arch = ModelArchitecture(num_features=5, num_classes=3, hidden_dims=(6,), local_pool=True)
    model = SegModel(arch, dtype=np.float64)
    model.mlp.init_params(seed=7)
    return model


def central_differences(
    loss: Callable[[], float], params: np.ndarray, indices: np.ndarray, h: float = 1e-3
) -> np.ndarray:
    """
    Numerical gradient of ``loss`` w.r.t. ``params[indices]`` (params edited in place).

    Five-point central stencil, truncation error O(h^4).
    """
    out = np.zeros(len(indices))
    for n, i in enumerate(indices):
        original = params[i]
        values = []
        for step in (2.0, 1.0, -1.0, -2.0):
            params[i] = original + step * h
            values.append(loss())
        params[i] = original
        out[n] = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * h)
    return out


def assert_gradients_match(analytic: np.ndarray, numeric: np.ndarray) -> None:
    """|analytic - numeric| / (|numeric| + 1e-8) < 1e-4 for every entry."""
    err = np.abs(analytic - numeric)
    bound = 1e-4 * (np.abs(numeric) + 1e-8)
    worst = int(np.argmax(err - bound))
    assert np.all(err <= bound), (
        f"param {worst}: analytic {analytic[worst]:.3e} vs numeric {numeric[worst]:.3e}"
    )
