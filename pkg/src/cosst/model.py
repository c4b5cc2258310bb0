"""Small convolutional segmenter with exact gradients, Nesterov SGD and poly decay.

F_feat: conv(k x k) -> tanh -> conv(k x k) -> tanh, giving m feature planes.
F_cls:  1 x 1 conv m -> 1 + C_PL, then a per-pixel softmax.
"""
import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ClassCatalog, GridImage, ProbMap, make_rng
from .exceptions import (
    CatalogMismatchError,
    InvalidInputError,
    ManifestError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

ARCHITECTURE = "conv-tanh-x2+1x1-softmax"
CHECKPOINT_MAGIC = "CKPTv1"
POLY_EXPONENT = 0.9
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
FEAT_PARAMS = ("w1", "b1", "w2", "b2")
CLS_PARAMS = ("w3", "b3")

Params = Dict[str, np.ndarray]


class Stage(str, Enum):
    """Training stage of a TrainState"""
    INITIAL = "initial"
    FINETUNE = "finetune"


def _param_shapes(in_channels: int, num_classes: int, m: int, hidden: int,
                  k: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "w1": (hidden, in_channels, k, k),
        "b1": (hidden,),
        "w2": (m, hidden, k, k),
        "b2": (m,),
        "w3": (num_classes, m),
        "b3": (num_classes,),
    }


@dataclass
class SegModel:
    params: Params
    in_channels: int
    num_classes: int
    m: int = 8
    hidden: int = 8
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.kernel_size % 2 != 1:
            raise InvalidInputError(f"kernel_size must be odd, got {self.kernel_size}")
        expected = self.param_shapes()
        if set(self.params) != set(expected):
            raise InvalidInputError(f"Expected parameters {sorted(expected)}, got {sorted(self.params)}")
        for name, shape in expected.items():
            value = np.asarray(self.params[name], dtype=np.float64)
            if value.shape != shape:
                raise InvalidInputError(f"Parameter {name}: expected shape {shape}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise InvalidInputError(f"Parameter {name} is not finite")
            self.params[name] = value

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return _param_shapes(self.in_channels, self.num_classes, self.m, self.hidden, self.kernel_size)

    @property
    def feat_params(self) -> Params:
        return {name: self.params[name] for name in FEAT_PARAMS}

    @property
    def cls_params(self) -> Params:
        return {name: self.params[name] for name in CLS_PARAMS}

    def architecture(self) -> Dict[str, Any]:
        """Hyperparameters that must match between checkpoint and model."""
        return {
            "name": ARCHITECTURE,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "m": self.m,
            "hidden": self.hidden,
            "kernel_size": self.kernel_size,
        }

    def copy(self) -> "SegModel":
        return replace(self, params={name: value.copy() for name, value in self.params.items()})

    def with_params(self, params: Params) -> "SegModel":
        return replace(self, params=params)

    @classmethod
    def zeros(cls, in_channels: int, num_classes: int, m: int = 8, hidden: int = 8,
              kernel_size: int = 3) -> "SegModel":
        """All-zero parameters, so every class gets the same probability."""
        shapes = _param_shapes(in_channels, num_classes, m, hidden, kernel_size)
        params = {name: np.zeros(shape) for name, shape in shapes.items()}
        return cls(params, in_channels, num_classes, m, hidden, kernel_size)

    @classmethod
    def initialize(cls, in_channels: int, num_classes: int, m: int = 8, hidden: int = 8,
                   kernel_size: int = 3, seed: int = 0) -> "SegModel":
        """Scaled-normal weights (fan-in), zero biases."""
        model = cls.zeros(in_channels, num_classes, m, hidden, kernel_size)
        rng = make_rng(seed, 0xC0DE)
        for name in ("w1", "w2", "w3"):
            shape = model.params[name].shape
            fan_in = int(np.prod(shape[1:]))
            model.params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        return model


@dataclass
class _Cache:
    shape: Tuple[int, int]
    cols1: np.ndarray
    h1: np.ndarray
    cols2: np.ndarray
    feats: np.ndarray
    probs: np.ndarray


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (H*W, C*k*k) zero-padded 'same' patches."""
    pad = k // 2
    channels, height, width = x.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    return windows.transpose(1, 2, 0, 3, 4).reshape(height * width, channels * k * k)


def _col2im(dcols: np.ndarray, shape: Tuple[int, int, int], k: int) -> np.ndarray:
    """Adjoint of _im2col."""
    pad = k // 2
    channels, height, width = shape
    patches = dcols.reshape(height, width, channels, k, k)
    padded = np.zeros((channels, height + 2 * pad, width + 2 * pad))
    for i in range(k):
        for j in range(k):
            padded[:, i:i + height, j:j + width] += patches[:, :, :, i, j].transpose(2, 0, 1)
    return padded[:, pad:pad + height, pad:pad + width]


def _check_input(model: SegModel, image: GridImage) -> None:
    if image.channels != model.in_channels:
        raise InvalidInputError(
            f"Image has {image.channels} channels, model expects {model.in_channels}"
        )


def _forward(model: SegModel, image: GridImage) -> _Cache:
    _check_input(model, image)
    p = model.params
    k = model.kernel_size
    height, width = image.shape

    cols1 = _im2col(image.values, k)
    h1 = np.tanh(cols1 @ p["w1"].reshape(model.hidden, -1).T + p["b1"])
    cols2 = _im2col(h1.T.reshape(model.hidden, height, width), k)
    feats = np.tanh(cols2 @ p["w2"].reshape(model.m, -1).T + p["b2"])

    logits = feats @ p["w3"].T + p["b3"]
    logits = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(logits)
    probs = expo / expo.sum(axis=1, keepdims=True)
    return _Cache((height, width), cols1, h1, cols2, feats, probs)


def _backward(model: SegModel, cache: _Cache, loss_grad: np.ndarray) -> Params:
    p = model.params
    k = model.kernel_size
    height, width = cache.shape
    num_pixels = height * width
    if loss_grad.shape != (model.num_classes, height, width):
        raise InvalidInputError(
            f"Loss gradient shape {loss_grad.shape} does not match ProbMap "
            f"{(model.num_classes, height, width)}"
        )

    grad_probs = loss_grad.reshape(model.num_classes, num_pixels).T
    probs = cache.probs
    # softmax Jacobian-vector product: p_k (g_k - sum_j g_j p_j)
    d_logits = probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))

    grads: Params = {
        "w3": d_logits.T @ cache.feats,
        "b3": d_logits.sum(axis=0),
    }
    d_a2 = (d_logits @ p["w3"]) * (1.0 - cache.feats ** 2)
    grads["w2"] = (d_a2.T @ cache.cols2).reshape(p["w2"].shape)
    grads["b2"] = d_a2.sum(axis=0)

    d_cols2 = d_a2 @ p["w2"].reshape(model.m, -1)
    d_h1 = _col2im(d_cols2, (model.hidden, height, width), k).reshape(model.hidden, num_pixels).T
    d_a1 = d_h1 * (1.0 - cache.h1 ** 2)
    grads["w1"] = (d_a1.T @ cache.cols1).reshape(p["w1"].shape)
    grads["b1"] = d_a1.sum(axis=0)
    return grads


def _unpack(model: SegModel, cache: _Cache) -> Tuple[np.ndarray, np.ndarray]:
    height, width = cache.shape
    feats = cache.feats.T.reshape(model.m, height, width)
    probs = cache.probs.T.reshape(model.num_classes, height, width)
    return feats, probs


def forward(model: SegModel, image: GridImage) -> Tuple[np.ndarray, ProbMap]:
    """Return the (m, H, W) feature raster F_feat(x) and softmax(F_cls(F_feat(x)))."""
    feats, probs = _unpack(model, _forward(model, image))
    return feats, ProbMap(probs)


def predict_probs(model: SegModel, image: GridImage) -> np.ndarray:
    """Probability planes as a plain (classes, H, W) array, skipping ProbMap validation."""
    return _unpack(model, _forward(model, image))[1]


def backward(model: SegModel, image: GridImage, loss_grad_wrt_probs: np.ndarray) -> Params:
    """Exact parameter gradients of a scalar loss given dLoss/dProbs."""
    cache = _forward(model, image)
    return _backward(model, cache, np.asarray(loss_grad_wrt_probs, dtype=np.float64))


def forward_backward(
    model: SegModel,
    image: GridImage,
    loss_fn: Callable[[np.ndarray], Tuple[Any, np.ndarray]],
) -> Tuple[Any, Params]:
    """One forward pass, a loss `loss_fn(probs) -> (report, dLoss/dProbs)`, one backward pass."""
    cache = _forward(model, image)
    _, probs = _unpack(model, cache)
    report, loss_grad = loss_fn(probs)
    return report, _backward(model, cache, loss_grad)


def poly_lr(base_lr: float, epoch: int, max_epochs: int) -> float:
    """base_lr * (1 - epoch / max_epochs) ** 0.9"""
    if epoch < 0 or epoch > max_epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {max_epochs}]")
    if epoch >= max_epochs:
        return 0.0
    return base_lr * (1.0 - epoch / max_epochs) ** POLY_EXPONENT


@dataclass
class TrainState:
    model: SegModel
    velocity: Params
    epoch: int = 0
    base_lr: float = 0.01
    max_epochs: int = 1000
    stage: Stage = Stage.INITIAL
    rng_seed: int = 0
    momentum: float = 0.99
    step: int = 0
    origin: str = "init"

    def __post_init__(self) -> None:
        for name, value in self.model.params.items():
            if self.velocity[name].shape != value.shape:
                raise InvalidInputError(f"Velocity for {name} has shape {self.velocity[name].shape}")
        if not 0 <= self.epoch <= self.max_epochs:
            raise InvalidInputError(f"epoch {self.epoch} outside [0, {self.max_epochs}]")
        self.stage = Stage(self.stage)

    @classmethod
    def fresh(cls, model: SegModel, base_lr: float, max_epochs: int, stage: Stage = Stage.INITIAL,
              rng_seed: int = 0, momentum: float = 0.99, origin: str = "init") -> "TrainState":
        """Start of training with zero velocity."""
        velocity = {name: np.zeros_like(value) for name, value in model.params.items()}
        return cls(model.copy(), velocity, 0, base_lr, max_epochs, stage, rng_seed, momentum, 0, origin)

    @property
    def lr(self) -> float:
        return poly_lr(self.base_lr, self.epoch, self.max_epochs)

    def next_epoch(self) -> "TrainState":
        """Advance one epoch, saturating at max_epochs."""
        return replace(self, epoch=min(self.epoch + 1, self.max_epochs))


def sgd_step(state: TrainState, grads: Params) -> TrainState:
    """Nesterov momentum step at the scheduled rate: v <- mu v + g; p <- p - lr (g + mu v)."""
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDivergedError(f"Non-finite gradient for {name} at step {state.step}", state)

    lr = state.lr
    mu = state.momentum
    params: Params = {}
    velocity: Params = {}
    for name in PARAM_NAMES:
        g = grads[name]
        v = mu * state.velocity[name] + g
        params[name] = state.model.params[name] - lr * (g + mu * v)
        velocity[name] = v
    return replace(state, model=state.model.with_params(params), velocity=velocity, step=state.step + 1)


def save_checkpoint(
    path: Union[str, Path],
    state: TrainState,
    catalog: ClassCatalog,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """CKPTv1: magic line, one JSON descriptor line, then params and velocity as f64 LE."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = state.model
    descriptor = {
        "catalog": list(catalog.names),
        "architecture": model.architecture(),
        "params": [[name, list(model.params[name].shape)] for name in PARAM_NAMES],
        "state": {
            "epoch": state.epoch,
            "base_lr": state.base_lr,
            "max_epochs": state.max_epochs,
            "stage": state.stage.value,
            "rng_seed": state.rng_seed,
            "momentum": state.momentum,
            "step": state.step,
            "origin": state.origin,
        },
        "metadata": metadata or {},
    }
    payload = b"".join(
        np.ascontiguousarray(source[name], dtype="<f8").tobytes()
        for source in (model.params, state.velocity)
        for name in PARAM_NAMES
    )
    header = f"{CHECKPOINT_MAGIC}\n{json.dumps(descriptor, sort_keys=True)}\n".encode("utf-8")
    path.write_bytes(header + payload)
    logger.debug(f"Checkpoint written: {path}")
    return path


def load_checkpoint(
    path: Union[str, Path],
    catalog: Optional[ClassCatalog] = None,
) -> Tuple[TrainState, ClassCatalog, Dict[str, Any]]:
    """Load a checkpoint; if `catalog` is given it must match the stored one exactly."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    data = path.read_bytes()
    first = data.find(b"\n")
    second = data.find(b"\n", first + 1)
    if first < 0 or second < 0 or data[:first].decode("ascii", "replace") != CHECKPOINT_MAGIC:
        raise ManifestError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    try:
        descriptor = json.loads(data[first + 1:second].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: malformed checkpoint descriptor") from e

    stored = ClassCatalog(tuple(descriptor["catalog"]))
    if catalog is not None and stored.names != catalog.names:
        raise CatalogMismatchError(
            f"{path}: checkpoint catalog {list(stored.names)} does not match {list(catalog.names)}"
        )

    arch = descriptor["architecture"]
    if arch.get("name") != ARCHITECTURE:
        raise ManifestError(f"{path}: unknown architecture {arch.get('name')}")

    payload = data[second + 1:]
    if len(payload) % 8:
        raise ManifestError(f"{path}: checkpoint payload of {len(payload)} bytes is not whole f64 values")
    arrays = np.frombuffer(payload, dtype="<f8")
    offset = 0
    sources: Tuple[Params, Params] = ({}, {})
    for target in sources:
        for name, shape in descriptor["params"]:
            size = int(np.prod(shape))
            if offset + size > arrays.size:
                raise ManifestError(f"{path}: truncated checkpoint payload")
            target[name] = arrays[offset:offset + size].reshape(shape).astype(np.float64)
            offset += size
    if offset != arrays.size:
        raise ManifestError(f"{path}: unexpected trailing checkpoint bytes")

    params, velocity = sources
    model = SegModel(params, arch["in_channels"], arch["num_classes"], arch["m"],
                     arch["hidden"], arch["kernel_size"])
    meta = descriptor["state"]
    state = TrainState(model, velocity, meta["epoch"], meta["base_lr"], meta["max_epochs"],
                       Stage(meta["stage"]), meta["rng_seed"], meta["momentum"], meta["step"],
                       meta["origin"])
    return state, stored, descriptor.get("metadata", {})
