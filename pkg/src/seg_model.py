"""
Per-pixel segmentation model, toy discriminator and Adam optimizer.

Both networks are small multilayer perceptrons applied independently to
every pixel, with tanh hidden units and analytic backward passes. All
parameters of a network live in one flat vector; layer weights are views
into it, so copying, hashing and optimizer updates act on a single array.
"""

import hashlib
import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import structlog
from numpy.typing import DTypeLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from .tensor_store import ProbMap, TensorStoreError, load_array, save_array

logger = structlog.get_logger(__name__)

FloatArray = NDArray[np.floating]


class ModelError(Exception):
    """Base exception for model operations."""
    pass


class ShapeMismatchError(ModelError):
    """Input does not match the model's expected shape."""
    pass


class ArchitectureMismatchError(ModelError):
    """Two models or a checkpoint disagree on layer dimensions."""
    pass


class ForwardNotCalledError(ModelError):
    """backward() was called without a matching forward()."""
    pass


class NonFiniteGradientError(ModelError):
    """Gradient contains NaN or Inf."""
    pass


class ModelConfig(BaseModel):
    """Segmentation network hyperparameters."""
    model_config = ConfigDict(frozen=True)

    hidden_dims: tuple[int, ...] = Field(default=(32,), description="Hidden layer widths")
    local_pool: bool = Field(default=True, description="Append 3x3 mean-pooled features")
    init_scale: float = Field(default=1.0, gt=0, description="Multiplier on the fan-in init scale")


class ModelArchitecture(BaseModel):
    """Architecture descriptor stored next to checkpoint tensors."""
    model_config = ConfigDict(frozen=True)

    num_features: int = Field(ge=1)
    num_classes: int = Field(ge=2)
    hidden_dims: tuple[int, ...] = (32,)
    local_pool: bool = True

    @property
    def input_dim(self) -> int:
        return self.num_features * (2 if self.local_pool else 1)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)


class PixelMLP:
    """
    Fully connected network over rows of a [N, in] matrix.

    Layer ``i`` maps ``dims[i] -> dims[i+1]``; hidden layers use tanh, the
    last layer is affine.
    """

    def __init__(self, dims: Sequence[int], dtype: DTypeLike = np.float32):
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ModelError(f"Invalid layer dims: {list(dims)}")
        self.dims = tuple(int(d) for d in dims)
        self.dtype = np.dtype(dtype)
        self.params: FloatArray = np.zeros(self.num_params, dtype=self.dtype)

    @property
    def num_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.dims[:-1], self.dims[1:]))

    def layers(self, flat: FloatArray | None = None) -> list[tuple[FloatArray, FloatArray]]:
        """(W [in, out], b [out]) views into ``flat`` (default: the parameters)."""
        flat = self.params if flat is None else flat
        views = []
        offset = 0
        for n_in, n_out in zip(self.dims[:-1], self.dims[1:]):
            w = flat[offset:offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = flat[offset:offset + n_out]
            offset += n_out
            views.append((w, b))
        return views

    def init_params(self, seed: int, scale: float = 1.0) -> None:
        """Uniform fan-in initialisation; biases start at zero."""
        rng = np.random.default_rng(seed)
        for w, b in self.layers():
            bound = scale / np.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape).astype(self.dtype)
            b[...] = 0

    def forward_rows(self, x: FloatArray) -> tuple[FloatArray, list[FloatArray]]:
        """
        Args:
            x: [N, dims[0]] input rows

        Returns:
            (output [N, dims[-1]], activations cache)
        """
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise ShapeMismatchError(f"Expected rows of width {self.dims[0]}, got {x.shape}")
        acts = [x]
        layers = self.layers()
        a = x
        for i, (w, b) in enumerate(layers):
            z = a @ w + b
            a = np.tanh(z) if i < len(layers) - 1 else z
            acts.append(a)
        return a, acts

    def backward_rows(
        self, acts: list[FloatArray], dout: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        """
        Args:
            acts: cache from ``forward_rows``
            dout: dLoss/dOutput, [N, dims[-1]]

        Returns:
            (flat parameter gradient, dLoss/dInput [N, dims[0]])
        """
        grad = np.zeros_like(self.params)
        grad_layers = self.layers(grad)
        layers = self.layers()
        dz = dout.astype(self.dtype, copy=False)
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            gw, gb = grad_layers[i]
            a_in = acts[i]
            gw[...] = a_in.T @ dz
            gb[...] = dz.sum(axis=0)
            da = dz @ w.T
            if i > 0:
                dz = da * (1.0 - acts[i] ** 2)
            else:
                dz = da
        return grad, dz


def local_mean_pool(image: FloatArray) -> FloatArray:
    """3x3 mean over each channel with edge replication."""
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = image.shape[1:]
    total = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            total += padded[:, dy:dy + h, dx:dx + w]
    return total / np.asarray(9.0, dtype=image.dtype)


def softmax(logits: FloatArray, axis: int = 0) -> FloatArray:
    """Log-sum-exp stabilised softmax."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class _ForwardCache:
    image: FloatArray
    acts: list[FloatArray]


class SegModel:
    """Segmentation network M (and generator G): image [F, H, W] -> ProbMap [C, H, W]."""

    def __init__(self, arch: ModelArchitecture, dtype: DTypeLike = np.float32):
        self.arch = arch
        self.mlp = PixelMLP(arch.layer_dims, dtype=dtype)
        self._cache: _ForwardCache | None = None

    @classmethod
    def from_config(
        cls,
        cfg: ModelConfig,
        num_features: int,
        num_classes: int,
        seed: int,
        dtype: DTypeLike = np.float32,
    ) -> "SegModel":
        arch = ModelArchitecture(
            num_features=num_features, num_classes=num_classes,
            hidden_dims=cfg.hidden_dims, local_pool=cfg.local_pool,
        )
        model = cls(arch, dtype=dtype)
        model.mlp.init_params(seed, cfg.init_scale)
        return model

    @property
    def params(self) -> FloatArray:
        return self.mlp.params

    @property
    def dtype(self) -> np.dtype[np.floating]:
        return self.mlp.dtype

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def _features(self, image: FloatArray) -> FloatArray:
        if image.ndim != 3 or image.shape[0] != self.arch.num_features:
            raise ShapeMismatchError(
                f"Expected image [{self.arch.num_features}, H, W], got {image.shape}"
            )
        x = image.astype(self.dtype, copy=False)
        if self.arch.local_pool:
            x = np.concatenate([x, local_mean_pool(x)])
        return x.reshape(x.shape[0], -1).T

    def logits(self, image: FloatArray) -> FloatArray:
        """Raw class scores [C, H, W]; caches activations for ``backward``."""
        out, acts = self.mlp.forward_rows(self._features(image))
        self._cache = _ForwardCache(image=image, acts=acts)
        return out.T.reshape(self.num_classes, *image.shape[1:])

    def forward(self, image: FloatArray) -> ProbMap:
        """Per-pixel softmax probabilities."""
        return softmax(self.logits(image), axis=0)

    def predict(self, image: FloatArray) -> NDArray[np.int32]:
        """Argmax class per pixel."""
        return self.forward(image).argmax(axis=0).astype(np.int32)

    def backward(self, image: FloatArray, dlogits: FloatArray) -> FloatArray:
        """
        Parameter gradient for an upstream gradient on the logits of ``image``.

        Raises:
            ForwardNotCalledError: the last forward pass was not on ``image``
        """
        if self._cache is None or self._cache.image is not image:
            raise ForwardNotCalledError("backward() requires forward() on the same image first")
        if dlogits.shape != (self.num_classes, *image.shape[1:]):
            raise ShapeMismatchError(f"dlogits shape {dlogits.shape} does not match logits")
        dout = dlogits.reshape(self.num_classes, -1).T
        grad, _ = self.mlp.backward_rows(self._cache.acts, dout)
        return grad


class Discriminator:
    """
    Per-pixel domain scorer D on the output space.

    Maps each pixel's probability vector to one score; the image score is
    the pixel mean. Trained with least-squares targets (source 1, target 0).
    """

    def __init__(self, num_classes: int, hidden_dims: Sequence[int] = (16,),
                 dtype: DTypeLike = np.float32):
        self.mlp = PixelMLP((num_classes, *hidden_dims, 1), dtype=dtype)
        self.num_classes = num_classes

    @classmethod
    def create(cls, num_classes: int, hidden_dims: Sequence[int], seed: int,
               dtype: DTypeLike = np.float32) -> "Discriminator":
        disc = cls(num_classes, hidden_dims, dtype=dtype)
        disc.mlp.init_params(seed)
        return disc

    @property
    def params(self) -> FloatArray:
        return self.mlp.params

    def copy(self) -> "Discriminator":
        """Independent discriminator with the same layers and weights."""
        twin = Discriminator(self.num_classes, self.mlp.dims[1:-1], dtype=self.mlp.dtype)
        twin.params[...] = self.params
        return twin

    def score(self, prob: ProbMap) -> tuple[FloatArray, list[FloatArray]]:
        """Pixel scores [H, W] and the cache for ``backward``."""
        if prob.ndim != 3 or prob.shape[0] != self.num_classes:
            raise ShapeMismatchError(f"Expected ProbMap with C={self.num_classes}, got {prob.shape}")
        rows = prob.reshape(self.num_classes, -1).T.astype(self.mlp.dtype, copy=False)
        out, acts = self.mlp.forward_rows(rows)
        return out[:, 0].reshape(prob.shape[1:]), acts

    def backward(self, acts: list[FloatArray], dscores: FloatArray) -> tuple[FloatArray, FloatArray]:
        """(parameter gradient, dLoss/dProb [C, H, W]) for a gradient on pixel scores."""
        grad, dx = self.mlp.backward_rows(acts, dscores.reshape(-1, 1))
        return grad, dx.T.reshape(self.num_classes, *dscores.shape)


class HasParams(Protocol):
    @property
    def params(self) -> FloatArray: ...


@dataclass
class OptimState:
    """Adam moments and hyperparameters for one parameter vector."""
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: FloatArray = field(default_factory=lambda: np.zeros(0))
    v: FloatArray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def fresh(cls, params: FloatArray, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m=np.zeros_like(params), v=np.zeros_like(params))


def opt_step(model: HasParams, state: OptimState, grad: FloatArray) -> HasParams:
    """
    One Adam update of ``model.params`` in place.

    Raises:
        ShapeMismatchError: gradient length differs from the parameters
        NonFiniteGradientError: gradient contains NaN or Inf
    """
    params = model.params
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ShapeMismatchError(
            f"grad {grad.shape} / moments {state.m.shape} vs params {params.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"Non-finite gradient at step {state.step + 1}")

    state.step += 1
    g = grad.astype(params.dtype, copy=False)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)
    return model


def copy_weights(src: SegModel, dst: SegModel) -> None:
    """
    Overwrite ``dst`` parameters with a copy of ``src`` parameters.

    Raises:
        ArchitectureMismatchError: architectures or dtypes differ
    """
    if src.arch != dst.arch or src.dtype != dst.dtype:
        raise ArchitectureMismatchError(
            f"Cannot copy {src.arch.layer_dims}/{src.dtype} into {dst.arch.layer_dims}/{dst.dtype}"
        )
    dst.params[...] = src.params


def clone(model: SegModel) -> SegModel:
    """Independent model with the same architecture and weights."""
    twin = SegModel(model.arch, dtype=model.dtype)
    copy_weights(model, twin)
    return twin


def weights_hash(model: HasParams) -> str:
    """SHA-256 of the raw parameter bytes."""
    return hashlib.sha256(np.ascontiguousarray(model.params).tobytes()).hexdigest()


ARCH_FILE = "architecture.json"


def save_checkpoint(model: SegModel, out_dir: str | Path) -> Path:
    """Write the architecture descriptor and one float32 tensor per weight/bias."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / ARCH_FILE).write_text(model.arch.model_dump_json(indent=2) + "\n", encoding="utf-8")
    for i, (w, b) in enumerate(model.mlp.layers()):
        save_array(out / f"layer_{i}_weight.iast", w.astype(np.float32))
        save_array(out / f"layer_{i}_bias.iast", b.astype(np.float32))
    logger.debug("checkpoint_saved", path=str(out), params=model.mlp.num_params)
    return out


def load_checkpoint(in_dir: str | Path, dtype: DTypeLike = np.float32) -> SegModel:
    """
    Rebuild a model from ``save_checkpoint`` output.

    Raises:
        ArchitectureMismatchError: tensor shapes disagree with the descriptor
        ModelError: descriptor or tensors missing
    """
    root = Path(in_dir)
    try:
        arch = ModelArchitecture.model_validate(
            json.loads((root / ARCH_FILE).read_text(encoding="utf-8"))
        )
    except (OSError, ValueError) as e:
        raise ModelError(f"Cannot read architecture from {root}: {e}") from e

    model = SegModel(arch, dtype=dtype)
    for i, (w, b) in enumerate(model.mlp.layers()):
        try:
            w_saved = load_array(root / f"layer_{i}_weight.iast")
            b_saved = load_array(root / f"layer_{i}_bias.iast")
        except TensorStoreError as e:
            raise ModelError(f"Checkpoint {root} is incomplete: {e}") from e
        if w_saved.shape != w.shape or b_saved.shape != b.shape:
            raise ArchitectureMismatchError(
                f"Layer {i}: checkpoint {w_saved.shape}/{b_saved.shape}, "
                f"descriptor {w.shape}/{b.shape}"
            )
        w[...] = w_saved
        b[...] = b_saved
    return model
