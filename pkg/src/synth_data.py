"""
Synthetic two-domain segmentation benchmarks.

Scenes are stacks of rectangles and discs over a background. Every pixel
carries five features: three colour channels drawn around a class-specific
mean plus the normalised (y, x) coordinates. Rare foreground classes get
colour means closer to the background, which makes them the "hard" classes;
each foreground shape also carries its own colour offset, so some instances
of a class are easy and others sit near a class boundary.

The target domain is the same scene distribution pushed through a
``DomainShift`` (contrast, bias and noise on the colour channels).
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Literal

import numpy as np
import structlog
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .tensor_store import LabelMask, load_array, save_array

logger = structlog.get_logger(__name__)

NUM_FEATURES: Final = 5
NUM_COLOR_CHANNELS: Final = 3
BACKGROUND: Final = 0
MIN_SIDE: Final = 4
CLAMP_RANGE: Final = 10.0

Domain = Literal["source", "target"]
Image = NDArray[np.float32]

_DOMAIN_CODES: Final = {"source": 0, "target": 1, "source_val": 2, "target_val": 3}


class SyntheticDataError(Exception):
    """Base exception for synthetic data generation."""
    pass


class SceneTooSmallError(SyntheticDataError):
    """Image is too small to place the requested shapes."""
    pass


class DatasetFormatError(SyntheticDataError):
    """Dataset directory is missing files or has an inconsistent manifest."""
    pass


class SceneSpec(BaseModel):
    """Scene distribution shared by both domains."""
    model_config = ConfigDict(frozen=True)

    height: int = Field(default=32, ge=1, description="Image height in pixels")
    width: int = Field(default=32, ge=1, description="Image width in pixels")
    num_classes: int = Field(ge=2, description="Number of classes including background")
    class_frequency_skew: float = Field(
        default=4.0, ge=1.0,
        description="Area ratio of the most to the least frequent foreground class",
    )
    shapes_per_image: int = Field(default=4, ge=1, description="Shapes drawn per image")
    shape_size: tuple[float, float] = Field(
        default=(0.2, 0.45),
        description="Shape side/diameter range as a fraction of min(height, width)",
    )
    shape_classes: tuple[int, ...] | None = Field(
        default=None, description="Restrict shapes to these classes (default: all foreground)"
    )
    color_separation: float = Field(default=1.0, gt=0, description="Distance of easy class colours from background")
    hard_class_overlap: float = Field(
        default=0.5, ge=0.0, lt=1.0,
        description="Fraction by which the rarest class colour moves toward background",
    )
    color_noise: float = Field(default=0.3, ge=0.0, description="Per-pixel colour noise std")
    instance_color_jitter: float = Field(
        default=0.15, ge=0.0,
        description="Std of one colour offset drawn per foreground shape",
    )

    @model_validator(mode="after")
    def _check_ranges(self) -> "SceneSpec":
        lo, hi = self.shape_size
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"shape_size must satisfy 0 < lo <= hi <= 1, got {self.shape_size}")
        if self.shape_classes is not None:
            if not self.shape_classes:
                raise ValueError("shape_classes must not be empty")
            bad = [c for c in self.shape_classes if not 0 <= c < self.num_classes]
            if bad:
                raise ValueError(f"shape_classes out of range: {bad}")
        return self


class DomainShift(BaseModel):
    """Appearance change applied to the colour channels of target images."""
    model_config = ConfigDict(frozen=True)

    channel_bias: tuple[float, float, float] = Field(
        default=(0.0, 0.0, 0.0), description="Additive offset per colour channel"
    )
    noise_sigma: float = Field(default=0.0, ge=0.0, description="Gaussian noise std")
    contrast_scale: float = Field(default=1.0, gt=0.0, description="Multiplicative contrast")

    @property
    def is_identity(self) -> bool:
        return (
            self.noise_sigma == 0.0
            and self.contrast_scale == 1.0
            and all(b == 0.0 for b in self.channel_bias)
        )


@dataclass
class Dataset:
    """Images with optional visible masks for one domain."""
    images: list[Image]
    masks: list[LabelMask] | None
    domain: Domain

    def __post_init__(self) -> None:
        if self.masks is not None:
            if len(self.masks) != len(self.images):
                raise SyntheticDataError(
                    f"{len(self.images)} images but {len(self.masks)} masks"
                )
            for img, mask in zip(self.images, self.masks):
                if img.shape[1:] != mask.shape:
                    raise SyntheticDataError(
                        f"Image {img.shape} and mask {mask.shape} disagree"
                    )

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices: list[int]) -> "Dataset":
        """Dataset restricted to ``indices`` (in the given order)."""
        masks = [self.masks[i] for i in indices] if self.masks is not None else None
        return Dataset([self.images[i] for i in indices], masks, self.domain)

    def without_masks(self) -> "Dataset":
        return Dataset(list(self.images), None, self.domain)


class HiddenGroundTruth:
    """
    Target masks that training code must not read.

    Unwrapped only by ``src.metrics`` (scoring) and by ``save_dataset`` /
    ``load_dataset`` in this module (persistence under ``hidden/``).
    """
    __slots__ = ("_masks",)

    def __init__(self, masks: list[LabelMask]):
        self._masks = list(masks)

    def __len__(self) -> int:
        return len(self._masks)

    def __repr__(self) -> str:
        return f"HiddenGroundTruth(<{len(self._masks)} masks>)"

    def _unwrap(self) -> list[LabelMask]:
        return self._masks


@dataclass
class UdaBenchmark:
    """Source/target pair plus validation splits."""
    spec: SceneSpec
    shift: DomainShift
    seed: int
    source: Dataset
    target: Dataset
    target_gt: HiddenGroundTruth
    source_val: Dataset
    target_val: Dataset
    target_val_gt: HiddenGroundTruth


def derive_seed(run_seed: int, *keys: int) -> int:
    """Per-item seed from the run seed; independent of generation order."""
    state = np.random.SeedSequence([run_seed, *keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def class_weights(spec: SceneSpec) -> tuple[list[int], NDArray[np.float64]]:
    """
    Shape classes and their sampling probabilities.

    Foreground class 1 is the most frequent and class C-1 the least frequent;
    probabilities fall geometrically so their ratio is ``class_frequency_skew``.
    """
    if spec.shape_classes is not None:
        classes = sorted(set(spec.shape_classes))
    else:
        classes = list(range(1, spec.num_classes))

    n_fg = spec.num_classes - 1
    weights = []
    for c in classes:
        if c == BACKGROUND or n_fg == 1:
            weights.append(1.0)
        else:
            rank = (c - 1) / (n_fg - 1)
            weights.append(spec.class_frequency_skew ** (-rank))
    w = np.asarray(weights, dtype=np.float64)
    return classes, w / w.sum()


def class_color_means(spec: SceneSpec) -> NDArray[np.float64]:
    """[C, 3] colour means; background sits at the origin."""
    means = np.zeros((spec.num_classes, NUM_COLOR_CHANNELS), dtype=np.float64)
    n_fg = spec.num_classes - 1
    for c in range(1, spec.num_classes):
        angle = 2.0 * math.pi * (c - 1) / n_fg
        direction = np.array([math.cos(angle), math.sin(angle), 0.6])
        direction /= np.linalg.norm(direction)
        rank = (c - 1) / (n_fg - 1) if n_fg > 1 else 0.0
        radius = spec.color_separation * (1.0 - spec.hard_class_overlap * rank)
        means[c] = radius * direction
    return means


def _coordinate_channels(height: int, width: int) -> NDArray[np.float32]:
    ys = np.linspace(-1.0, 1.0, height, dtype=np.float32)
    xs = np.linspace(-1.0, 1.0, width, dtype=np.float32)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy, xx])


def generate_scene(spec: SceneSpec, seed: int) -> tuple[Image, LabelMask]:
    """
    Render one scene.

    Args:
        spec: Scene distribution
        seed: Scene seed; the output is a pure function of (spec, seed)

    Returns:
        (image [5, H, W] float32, mask [H, W] int32)

    Raises:
        SceneTooSmallError: the frame cannot hold a shape
    """
    h, w = spec.height, spec.width
    side = min(h, w)
    if side < MIN_SIDE or round(spec.shape_size[0] * side) < 1:
        raise SceneTooSmallError(
            f"{h}x{w} frame too small for shapes of size {spec.shape_size}"
        )

    rng = np.random.default_rng(seed)
    classes, probs = class_weights(spec)
    mask = np.full((h, w), BACKGROUND, dtype=np.int32)
    owner = np.full((h, w), -1, dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]

    for n in range(spec.shapes_per_image):
        cls = classes[int(rng.choice(len(classes), p=probs))]
        size = rng.uniform(*spec.shape_size) * side
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            half_h = size / 2.0
            half_w = size * rng.uniform(0.7, 1.3) / 2.0
            region = (np.abs(yy + 0.5 - cy) <= half_h) & (np.abs(xx + 0.5 - cx) <= half_w)
        else:
            radius = size / 2.0
            region = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= radius**2
        mask[region] = cls
        owner[region] = n

    coords = _coordinate_channels(h, w)
    means = class_color_means(spec)
    colors = means[mask].transpose(2, 0, 1)
    # background brightens toward the bottom of the frame
    colors[2] += 0.25 * coords[0] * (mask == BACKGROUND)
    if spec.instance_color_jitter > 0:
        offsets = rng.normal(
            0.0, spec.instance_color_jitter, size=(spec.shapes_per_image, NUM_COLOR_CHANNELS)
        )
        fg = (owner >= 0) & (mask != BACKGROUND)
        colors[:, fg] += offsets[owner[fg]].T
    if spec.color_noise > 0:
        colors += rng.normal(0.0, spec.color_noise, size=colors.shape)

    image = np.concatenate([colors.astype(np.float32), coords]).astype(np.float32)
    return image, mask


def apply_domain_shift(image: Image, shift: DomainShift, seed: int) -> Image:
    """
    Shift the colour channels: ``scale * x + bias + N(0, sigma)``.

    Coordinate channels pass through. Output is clamped to [-10, 10].
    An identity shift returns a bitwise copy.
    """
    out = np.array(image, dtype=np.float32, copy=True)
    if shift.is_identity:
        return out

    colors = out[:NUM_COLOR_CHANNELS]
    if shift.contrast_scale != 1.0:
        colors *= np.float32(shift.contrast_scale)
    bias = np.asarray(shift.channel_bias, dtype=np.float32)
    if np.any(bias != 0):
        colors += bias[:, None, None]
    if shift.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        colors += rng.normal(0.0, shift.noise_sigma, size=colors.shape).astype(np.float32)
    np.clip(colors, -CLAMP_RANGE, CLAMP_RANGE, out=colors)
    return out


def _generate_split(
    spec: SceneSpec, shift: DomainShift | None, count: int, seed: int, split: str
) -> tuple[list[Image], list[LabelMask]]:
    code = _DOMAIN_CODES[split]
    images, masks = [], []
    for i in range(count):
        img, mask = generate_scene(spec, derive_seed(seed, code, i))
        if shift is not None:
            img = apply_domain_shift(img, shift, derive_seed(seed, code, i, 1))
        images.append(img)
        masks.append(mask)
    return images, masks


def make_uda_benchmark(
    spec: SceneSpec,
    shift: DomainShift,
    n_source: int,
    n_target: int,
    seed: int,
    n_val: int = 0,
) -> UdaBenchmark:
    """
    Build a labeled source set and an unlabeled shifted target set.

    Target masks are wrapped in ``HiddenGroundTruth``.

    Raises:
        SyntheticDataError: n_source or n_target below 1
    """
    if n_source < 1 or n_target < 1:
        raise SyntheticDataError(
            f"n_source and n_target must be >= 1, got {n_source} and {n_target}"
        )
    if n_val < 0:
        raise SyntheticDataError(f"n_val must be >= 0, got {n_val}")

    src_imgs, src_masks = _generate_split(spec, None, n_source, seed, "source")
    tgt_imgs, tgt_masks = _generate_split(spec, shift, n_target, seed, "target")
    sval_imgs, sval_masks = _generate_split(spec, None, n_val, seed, "source_val")
    tval_imgs, tval_masks = _generate_split(spec, shift, n_val, seed, "target_val")

    logger.info(
        "benchmark_generated",
        n_source=n_source, n_target=n_target, n_val=n_val, seed=seed,
        shift_identity=shift.is_identity,
    )
    return UdaBenchmark(
        spec=spec,
        shift=shift,
        seed=seed,
        source=Dataset(src_imgs, src_masks, "source"),
        target=Dataset(tgt_imgs, None, "target"),
        target_gt=HiddenGroundTruth(tgt_masks),
        source_val=Dataset(sval_imgs, sval_masks, "source"),
        target_val=Dataset(tval_imgs, None, "target"),
        target_val_gt=HiddenGroundTruth(tval_masks),
    )


class DatasetManifest(BaseModel):
    """manifest.json of one split directory."""
    domain: Domain
    split: str
    images: list[str]
    masks: list[str] | None = None
    hidden: list[str] | None = None


class BenchmarkManifest(BaseModel):
    """benchmark.json at the root of a benchmark directory."""
    spec: SceneSpec
    shift: DomainShift
    seed: int
    n_source: int
    n_target: int
    n_val: int


def _write_json(path: Path, text: str) -> None:
    path.write_text(text + "\n", encoding="utf-8")


def save_dataset(
    dataset: Dataset, out_dir: str | Path, split: str, gt: HiddenGroundTruth | None = None
) -> DatasetManifest:
    """Write one split as IAST-TENSOR files plus manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(domain=dataset.domain, split=split, images=[])

    for i, img in enumerate(dataset.images):
        name = f"image_{i:05d}.iast"
        save_array(out / name, img)
        manifest.images.append(name)
    if dataset.masks is not None:
        manifest.masks = []
        for i, mask in enumerate(dataset.masks):
            name = f"mask_{i:05d}.iast"
            save_array(out / name, mask)
            manifest.masks.append(name)
    if gt is not None:
        hidden_dir = out / "hidden"
        hidden_dir.mkdir(exist_ok=True)
        manifest.hidden = []
        for i, mask in enumerate(gt._unwrap()):
            name = f"hidden/gt_{i:05d}.iast"
            save_array(out / name, mask)
            manifest.hidden.append(name)

    _write_json(out / "manifest.json", manifest.model_dump_json(indent=2))
    return manifest


def load_dataset(in_dir: str | Path) -> tuple[Dataset, HiddenGroundTruth | None]:
    """
    Read a split written by ``save_dataset``.

    Raises:
        DatasetFormatError: manifest missing or unreadable
    """
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"No manifest.json in {root}")
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise DatasetFormatError(f"Invalid manifest {manifest_path}: {e}") from e

    images = [np.asarray(load_array(root / n), dtype=np.float32) for n in manifest.images]
    masks = (
        [np.asarray(load_array(root / n), dtype=np.int32) for n in manifest.masks]
        if manifest.masks is not None else None
    )
    gt = (
        HiddenGroundTruth([np.asarray(load_array(root / n), dtype=np.int32) for n in manifest.hidden])
        if manifest.hidden is not None else None
    )
    return Dataset(images, masks, manifest.domain), gt


def save_benchmark(bench: UdaBenchmark, out_dir: str | Path) -> Path:
    """Write all four splits and benchmark.json under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    save_dataset(bench.source, root / "source", "source")
    save_dataset(bench.target, root / "target", "target", gt=bench.target_gt)
    save_dataset(bench.source_val, root / "source_val", "source_val")
    save_dataset(bench.target_val, root / "target_val", "target_val", gt=bench.target_val_gt)

    manifest = BenchmarkManifest(
        spec=bench.spec, shift=bench.shift, seed=bench.seed,
        n_source=len(bench.source), n_target=len(bench.target), n_val=len(bench.source_val),
    )
    _write_json(root / "benchmark.json", manifest.model_dump_json(indent=2))
    logger.info("benchmark_saved", path=str(root))
    return root


def load_benchmark(in_dir: str | Path) -> UdaBenchmark:
    """Read a directory written by ``save_benchmark``."""
    root = Path(in_dir)
    meta_path = root / "benchmark.json"
    if not meta_path.exists():
        raise DatasetFormatError(f"No benchmark.json in {root}")
    try:
        meta = BenchmarkManifest.model_validate(json.loads(meta_path.read_text(encoding="utf-8")))
    except ValueError as e:
        raise DatasetFormatError(f"Invalid benchmark manifest {meta_path}: {e}") from e

    source, _ = load_dataset(root / "source")
    target, target_gt = load_dataset(root / "target")
    source_val, _ = load_dataset(root / "source_val")
    target_val, target_val_gt = load_dataset(root / "target_val")
    if target_gt is None or target_val_gt is None:
        raise DatasetFormatError(f"Target ground truth missing under {root}")

    return UdaBenchmark(
        spec=meta.spec, shift=meta.shift, seed=meta.seed,
        source=source, target=target, target_gt=target_gt,
        source_val=source_val, target_val=target_val, target_val_gt=target_val_gt,
    )
