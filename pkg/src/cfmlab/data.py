"""Image sets: CIFAR-10 binary batches, a synthetic class-structured set, target assignment."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from . import cfmw, rng

RECORD_BYTES = 3073  # 1 label byte + 3x32x32 pixel bytes
CIFAR_SPLITS = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class MalformedBatchError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    true_labels: np.ndarray  # [N] int64
    target_labels: Optional[np.ndarray] = None  # [N] int64, never equal to true_labels
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.true_labels):
            raise ValueError(f"images {self.images.shape} and labels {self.true_labels.shape} disagree")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.true_labels.size and (self.true_labels.min() < 0 or self.true_labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.target_labels is not None:
            self.target_labels = np.asarray(self.target_labels, dtype=np.int64)
            if self.target_labels.shape != self.true_labels.shape:
                raise ValueError("target_labels must match true_labels in length")
            if np.any(self.target_labels == self.true_labels):
                raise ValueError("a target label equals its true label")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx)
        tgt = None if self.target_labels is None else self.target_labels[idx]
        return LabeledImageSet(self.images[idx], self.true_labels[idx], tgt, self.num_classes)


# ---------------------------------------------------------------- CIFAR-10


def read_cifar10_batch(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise MalformedBatchError(
            f"malformed batch {path}: {raw.size} bytes is not a positive multiple of {RECORD_BYTES}"
        )
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10_binary(dir_path: Union[str, Path], split: str = "test") -> LabeledImageSet:
    if split not in CIFAR_SPLITS:
        raise ValueError(f"split must be one of {sorted(CIFAR_SPLITS)}")
    parts = [read_cifar10_batch(Path(dir_path) / name) for name in CIFAR_SPLITS[split]]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledImageSet(images, labels, num_classes=10)


# ---------------------------------------------------------------- synthetic


def _class_templates(num_classes: int, shape, template_seed: int):
    C, H, W = shape
    g = rng.stream(template_seed, rng.SYNTH, 0xC1A55)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    yy, xx = yy / H, xx / W
    templates = []
    for k in range(num_classes):
        tint = g.uniform(-1.0, 1.0, size=C)
        theta = np.pi * k / num_classes + g.uniform(-0.1, 0.1)
        freq = 1.5 + (k % 3) * 0.75
        chan_w = g.uniform(-1.0, 1.0, size=C)
        centre = g.uniform(0.2, 0.8, size=2)
        blob_col = g.uniform(-1.0, 1.0, size=C)
        templates.append((tint, theta, freq, chan_w, centre, blob_col))
    return templates, yy, xx


def make_synthetic(
    num_classes: int = 10,
    per_class: int = 100,
    shape=(3, 16, 16),
    seed: int = 0,
    template_seed: int = 0,
    noise: float = 0.04,
    contrast: float = 0.5,
) -> LabeledImageSet:
    """Class-conditional images: per-class colour tint, oriented grating and blob, plus noise.

    template_seed fixes what each class looks like; seed draws the individual
    samples (grating phase, blob jitter, noise). Train and test sets should share
    template_seed and differ in seed.

    contrast scales all three class cues. The default keeps the cues comparable to
    a 16/255 perturbation, so trained models are accurate but not robust.
    """
    if num_classes < 4:
        raise ValueError("make_synthetic needs at least 4 classes")
    C, H, W = shape
    templates, yy, xx = _class_templates(num_classes, shape, template_seed)
    g = rng.stream(seed, rng.SYNTH, num_classes, per_class, C, H, W)
    n = num_classes * per_class
    images = np.empty((n, C, H, W), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, k in enumerate(labels):
        tint, theta, freq, chan_w, centre, blob_col = templates[k]
        phase = g.uniform(0, 2 * np.pi)
        u = np.cos(theta) * xx + np.sin(theta) * yy
        grating = np.sin(2 * np.pi * freq * u + phase)
        cy, cx = centre + g.normal(0, 0.06, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12**2))
        img = (
            0.5
            + contrast * 0.10 * tint[:, None, None]
            + contrast * 0.14 * chan_w[:, None, None] * grating[None]
            + contrast * 0.22 * blob_col[:, None, None] * blob[None]
            + g.normal(0, noise, size=(C, H, W))
        )
        images[i] = np.clip(img, 0.0, 1.0)
    perm = rng.stream(seed, rng.SHUFFLE, 0x5E7).permutation(n)
    return LabeledImageSet(images[perm], labels[perm], num_classes=num_classes)


def assign_targets(dataset: LabeledImageSet, seed: int) -> LabeledImageSet:
    """Uniformly random target class different from the true class, per image."""
    n_cls = dataset.num_classes
    if n_cls < 2:
        raise ValueError("need at least 2 classes to assign targets")
    offset = rng.stream(seed, rng.TARGETS).integers(1, n_cls, size=len(dataset))
    targets = (dataset.true_labels + offset) % n_cls
    return LabeledImageSet(dataset.images, dataset.true_labels, targets, n_cls)


def stratified_sample(dataset: LabeledImageSet, per_class: int, seed: int) -> LabeledImageSet:
    """per_class images of every class, drawn without replacement, kept in dataset order."""
    g = rng.stream(seed, rng.STRATIFY)
    picks = []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.true_labels == k)
        if len(idx) < per_class:
            raise ValueError(f"class {k} has only {len(idx)} images, need {per_class}")
        picks.append(g.choice(idx, size=per_class, replace=False))
    return dataset.subset(np.sort(np.concatenate(picks)))


def save_image_set(dataset: LabeledImageSet, path: Union[str, Path]) -> None:
    """Store a set in the CFMW container (labels as exact float32 integers)."""
    items = [
        ("images", dataset.images),
        ("true_labels", dataset.true_labels.astype(np.float32)),
        ("num_classes", np.array([dataset.num_classes], dtype=np.float32)),
    ]
    if dataset.target_labels is not None:
        items.append(("target_labels", dataset.target_labels.astype(np.float32)))
    cfmw.save(path, items)


def load_image_set(path: Union[str, Path]) -> LabeledImageSet:
    t = cfmw.load(path)
    tgt = t.get("target_labels")
    return LabeledImageSet(
        t["images"],
        t["true_labels"].astype(np.int64),
        None if tgt is None else tgt.astype(np.int64),
        int(t["num_classes"][0]),
    )
