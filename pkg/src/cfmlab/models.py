"""Small CNN zoo: definition, hookable forward, SGD training and CFMW persistence."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from . import cfmw, rng
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    conv2d,
    flatten,
    fully_connected,
    maxpool2d,
    relu,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)

ARCHS = ("tinyA", "tinyB", "tinyC", "tinyD")
KINDS = ("conv", "fc", "relu", "maxpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    channels: int = 0  # conv output channels / fc width
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def hookable(self) -> bool:
        return self.kind in ("conv", "fc")


class Hooks(Protocol):
    """Receives every conv/fc pre-activation output and returns what the next layer sees."""

    def begin_pass(self) -> None: ...

    def __call__(self, name: str, index: int, out: Tensor) -> Tensor: ...


@dataclass
class Model:
    arch: str
    specs: List[LayerSpec]
    weights: Dict[str, Tensor]
    input_shape: Tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        self.shapes = layer_shapes(self.specs, self.input_shape)
        if self.shapes[-1] != (self.num_classes,):
            raise ShapeError(f"model ends in {self.shapes[-1]}, expected ({self.num_classes},)")
        for spec, s_in in zip(self.specs, [self.input_shape] + self.shapes[:-1]):
            if not spec.hookable:
                continue
            w, b = self.weights.get(spec.name + ".weight"), self.weights.get(spec.name + ".bias")
            want = (
                (spec.channels, s_in[0], spec.kernel, spec.kernel)
                if spec.kind == "conv"
                else (spec.channels, int(np.prod(s_in)))
            )
            if w is None or b is None or w.shape != want or b.shape != (spec.channels,):
                raise ShapeError(f"weights for {spec.name} missing or not shaped {want}")

    @property
    def hookable_layers(self) -> List[Tuple[int, LayerSpec]]:
        return [(i, s) for i, s in enumerate(self.specs) if s.hookable]

    def parameters(self) -> List[Tensor]:
        return [self.weights[k] for k in self.param_names()]

    def param_names(self) -> List[str]:
        return [f"{s.name}.{p}" for s in self.specs if s.hookable for p in ("weight", "bias")]

    def __call__(self, x, hooks: Optional[Hooks] = None) -> Tensor:
        return forward(self, x, hooks)


def layer_shapes(specs: Sequence[LayerSpec], input_shape: Tuple[int, int, int]) -> List[tuple]:
    """Output shape (without batch axis) of every layer; raises if they do not compose."""
    shape: tuple = tuple(input_shape)
    out = []
    for s in specs:
        if s.kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"{s.name}: conv needs a (C,H,W) input, got {shape}")
            _, H, W = shape
            Ho = (H + 2 * s.padding - s.kernel) // s.stride + 1
            Wo = (W + 2 * s.padding - s.kernel) // s.stride + 1
            if Ho < 1 or Wo < 1:
                raise ShapeError(f"{s.name}: input {shape} too small for kernel {s.kernel}")
            shape = (s.channels, Ho, Wo)
        elif s.kind == "maxpool":
            if len(shape) != 3 or shape[1] < s.kernel or shape[2] < s.kernel:
                raise ShapeError(f"{s.name}: cannot pool {shape} with window {s.kernel}")
            shape = (shape[0], (shape[1] - s.kernel) // s.stride + 1, (shape[2] - s.kernel) // s.stride + 1)
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind == "fc":
            if len(shape) != 1:
                raise ShapeError(f"{s.name}: fc needs a flat input, got {shape}")
            shape = (s.channels,)
        out.append(shape)
    return out


def _conv(name, c, k=3):
    return [LayerSpec("conv", name, c, kernel=k, padding=k // 2), LayerSpec("relu", name + "_relu")]


def _pool(name):
    return [LayerSpec("maxpool", name, kernel=2, stride=2)]


def _head(num_classes, hidden=None):
    layers = [LayerSpec("flatten", "flatten")]
    if hidden:
        layers += [LayerSpec("fc", "fc1", hidden), LayerSpec("relu", "fc1_relu")]
    layers.append(LayerSpec("fc", "logits", num_classes))
    return layers


def arch_specs(arch_id: str, num_classes: int) -> List[LayerSpec]:
    """Layer lists for the four zoo members. Every one has >= 2 pooling stages and a conv after the second."""
    if arch_id == "tinyA":  # 3 conv
        return (
            _conv("conv1", 16) + _pool("pool1")
            + _conv("conv2", 32) + _pool("pool2")
            + _conv("conv3", 32)
            + _head(num_classes, hidden=64)
        )
    if arch_id == "tinyB":  # 4 conv
        return (
            _conv("conv1", 12) + _pool("pool1")
            + _conv("conv2", 24) + _conv("conv3", 24) + _pool("pool2")
            + _conv("conv4", 48)
            + _head(num_classes, hidden=32)
        )
    if arch_id == "tinyC":  # 5 conv, wide head
        return (
            _conv("conv1", 8) + _conv("conv2", 8) + _pool("pool1")
            + _conv("conv3", 16) + _conv("conv4", 16) + _pool("pool2")
            + _conv("conv5", 32)
            + _head(num_classes, hidden=48)
        )
    if arch_id == "tinyD":  # 6 conv, 5x5 stem
        return (
            _conv("conv1", 16, k=5) + _pool("pool1")
            + _conv("conv2", 16) + _conv("conv3", 16) + _pool("pool2")
            + _conv("conv4", 24) + _conv("conv5", 24) + _conv("conv6", 24)
            + _head(num_classes)
        )
    raise ValueError(f"unknown architecture {arch_id!r}; choose from {ARCHS}")


def build_model(arch_id: str, input_shape=(3, 16, 16), num_classes: int = 10, seed: int = 0) -> Model:
    """He-uniform weights, zero biases."""
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3 or min(input_shape[1:]) < 16:
        raise ShapeError(f"unsupported input shape {input_shape}: need (C,H,W) with H,W >= 16")
    specs = arch_specs(arch_id, num_classes)
    shapes = layer_shapes(specs, input_shape)
    weights: Dict[str, Tensor] = {}
    s_in = input_shape
    for i, spec in enumerate(specs):
        if spec.hookable:
            if spec.kind == "conv":
                wshape = (spec.channels, s_in[0], spec.kernel, spec.kernel)
            else:
                wshape = (spec.channels, int(np.prod(s_in)))
            fan_in = int(np.prod(wshape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            g = rng.stream(seed, rng.INIT, i)
            weights[spec.name + ".weight"] = Tensor(g.uniform(-bound, bound, size=wshape))
            weights[spec.name + ".bias"] = Tensor(np.zeros(spec.channels))
        s_in = shapes[i]
    return Model(arch_id, specs, weights, input_shape, num_classes)


def forward(model: Model, batch, hooks: Optional[Hooks] = None) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match model input {model.input_shape}")
    if hooks is not None:
        hooks.begin_pass()
    w = model.weights
    for i, s in enumerate(model.specs):
        if s.kind == "conv":
            x = conv2d(x, w[s.name + ".weight"], w[s.name + ".bias"], s.stride, s.padding)
        elif s.kind == "fc":
            x = fully_connected(x, w[s.name + ".weight"], w[s.name + ".bias"])
        elif s.kind == "relu":
            x = relu(x)
        elif s.kind == "maxpool":
            x = maxpool2d(x, s.kernel, s.stride)
        elif s.kind == "flatten":
            x = flatten(x)
        if hooks is not None and s.hookable:
            x = hooks(s.name, i, x)
    return x


def predict(model: Model, images: np.ndarray, batch_size: int = 200) -> np.ndarray:
    """Top-1 class per image; ties go to the lowest class index."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(np.argmax(forward(model, images[i : i + batch_size]).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == np.asarray(labels)))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    warmup_epochs: float = 1.0  # linear learning-rate ramp
    clip_norm: float = 2.0  # global gradient-norm clip, 0 disables

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate, momentum and weight_decay must be non-negative")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Model
    accuracy: float
    losses: List[float] = field(default_factory=list)


def train(model: Model, train_set, cfg: TrainConfig, test_set=None) -> TrainResult:
    """Minibatch SGD with momentum on softmax cross-entropy. Mutates model in place.

    Accuracy is measured on test_set, or on the training set when none is given.
    """
    labels = np.asarray(train_set.true_labels)
    if labels.max() >= model.num_classes:
        raise ValueError(f"dataset has labels >= {model.num_classes}")
    images = np.asarray(train_set.images, dtype=np.float32)
    params = model.parameters()
    velocity = [np.zeros(p.shape) for p in params]
    n = len(images)
    losses = []
    steps_per_epoch = -(-n // cfg.batch_size)
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    step = 0
    for p in params:
        p.requires_grad = True
    try:
        for epoch in range(cfg.epochs):
            order = rng.stream(cfg.seed, rng.SHUFFLE, epoch).permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                for p in params:
                    p.grad = None
                try:
                    loss = softmax_cross_entropy(forward(model, images[idx]), labels[idx])
                    backward(loss)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"loss diverged in epoch {epoch}: {exc}") from exc
                total += loss.item() * len(idx)
                if cfg.clip_norm:
                    gnorm = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
                    if gnorm > cfg.clip_norm:
                        for p in params:
                            p.grad = (p.grad * (cfg.clip_norm / gnorm)).astype(np.float32)
                lr = cfg.learning_rate * min(1.0, (step + 1) / warmup) if warmup else cfg.learning_rate
                step += 1
                for p, v in zip(params, velocity):
                    g = p.grad.astype(np.float64) + cfg.weight_decay * p.data
                    v *= cfg.momentum
                    v += g
                    p.data = (p.data - lr * v).astype(np.float32)
                    if not np.all(np.isfinite(p.data)):
                        raise TrainingDivergedError(f"weights diverged in epoch {epoch}")
            losses.append(total / n)
            log.info("%s epoch %d loss %.4f", model.arch, epoch, losses[-1])
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
    ev = test_set if test_set is not None else train_set
    return TrainResult(model, accuracy(model, ev.images, ev.true_labels), losses)


# ---------------------------------------------------------------- persistence

META = "__meta__"


def model_tensors(model: Model) -> List[Tuple[str, np.ndarray]]:
    meta = np.array(
        [ARCHS.index(model.arch), *model.input_shape, model.num_classes], dtype=np.float32
    )
    return [(META, meta)] + [(k, model.weights[k].data) for k in model.param_names()]


def save_weights(model: Model, path: Union[str, Path]) -> None:
    cfmw.save(path, model_tensors(model))


def load_weights(path: Union[str, Path]) -> Model:
    tensors = cfmw.load(path)
    if META not in tensors:
        raise cfmw.WeightFileError(f"{path}: no {META} tensor, not a model file")
    arch_idx, c, h, w, ncls = (int(v) for v in tensors.pop(META))
    model = build_model(ARCHS[arch_idx], (c, h, w), ncls, seed=0)
    for k in model.param_names():
        if k not in tensors:
            raise cfmw.WeightFileError(f"{path}: missing tensor {k}")
        if tensors[k].shape != model.weights[k].shape:
            raise cfmw.WeightFileError(f"{path}: {k} has shape {tensors[k].shape}, expected {model.weights[k].shape}")
        model.weights[k] = Tensor(tensors[k])
    return model
