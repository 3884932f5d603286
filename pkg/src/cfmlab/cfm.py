"""Clean Feature Mixup.

A :class:`CfmSession` is installed as the forward hook set of a model. On the
first (storage) pass it snapshots the pre-activation output of every selected
layer for the clean batch. On every later pass each selected layer, with
probability ``mixing_prob``, replaces its output ``f`` by

    f'_i = (1 - a_i) * f_i + a_i * fc_{s_i}

where ``fc`` are the stored clean features, ``s`` a random permutation of the
batch and ``a_i ~ U(0, alpha_max)`` drawn per image and channel. The stored
features are constants for autodiff, so gradients only flow through
``(1 - a_i) * f_i``.

Selected layers: every fc layer, and every conv layer whose output area is at
most ``area_fraction`` of the input image area.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .models import Model, forward
from .tensor import ShapeError, Tensor, add, affine_const, batch_gather


@dataclass
class CfmConfig:
    mixing_prob: float = 0.1
    alpha_max: float = 0.75
    area_fraction: float = 1 / 16
    shuffle: bool = True
    channelwise_alpha: bool = True
    use_clean_features: bool = True

    def __post_init__(self):
        if not 0 <= self.mixing_prob <= 1:
            raise ValueError(f"mixing_prob must be in [0,1], got {self.mixing_prob}")
        if not 0 <= self.alpha_max <= 1:
            raise ValueError(f"alpha_max must be in [0,1], got {self.alpha_max}")

    @classmethod
    def cifar(cls, **kw) -> "CfmConfig":
        kw.setdefault("mixing_prob", 0.25)
        return cls(**kw)


class CfmStateError(RuntimeError):
    pass


class NoEligibleLayersError(ValueError):
    pass


def select_layers(model: Model, area_fraction: float = 1 / 16) -> List[Tuple[int, str]]:
    """(spec index, name) of conv layers with out_H*out_W <= area_fraction*H*W, plus all fc layers."""
    _, H, W = model.input_shape
    limit = area_fraction * H * W
    chosen = []
    for i, spec in enumerate(model.specs):
        if spec.kind == "fc":
            chosen.append((i, spec.name))
        elif spec.kind == "conv":
            _, h, w = model.shapes[i]
            if h * w <= limit:
                chosen.append((i, spec.name))
    return chosen


@dataclass
class MixDraw:
    """Random quantities for one layer on one pass."""

    active: bool
    perm: Optional[np.ndarray] = None  # [B] source index per image
    alpha: Optional[np.ndarray] = None  # [B, C] or [B, 1]


def mix_features(live: Tensor, source: np.ndarray, perm: Sequence[int], alpha: np.ndarray) -> Tensor:
    """(1 - alpha) * live + alpha * source[perm], alpha broadcast over trailing spatial axes.

    source is a constant. Computed in float64 and rounded once to live's dtype.
    """
    src = np.asarray(source)
    if src.shape != live.shape:
        raise ShapeError(f"stored features {src.shape} do not match live features {live.shape}")
    a = np.asarray(alpha, dtype=np.float64)
    a = a.reshape(a.shape + (1,) * (live.data.ndim - a.ndim))
    if not np.any(a):
        return live
    shift = a * src[np.asarray(perm)].astype(np.float64)
    return affine_const(live, 1.0 - a, shift)


def _mix_with_live(live: Tensor, perm: np.ndarray, alpha: np.ndarray) -> Tensor:
    # ablation: interpolate towards the batch's own current (perturbed) features
    a = np.asarray(alpha, dtype=np.float64)
    a = a.reshape(a.shape + (1,) * (live.data.ndim - a.ndim))
    if not np.any(a):
        return live
    zero = np.zeros(1)
    return add(affine_const(live, 1.0 - a, zero), affine_const(batch_gather(live, perm), a, zero))


class CfmSession:
    """Hook set plus per-attack CFM state (stored clean features, pass key, RNG streams)."""

    def __init__(self, model: Model, cfg: CfmConfig, seed: int = 0, layers: Optional[Sequence[str]] = None):
        selected = select_layers(model, cfg.area_fraction)
        if layers is not None:
            wanted = set(layers)
            selected = [(i, n) for i, n in selected if n in wanted]
        if not selected:
            raise NoEligibleLayersError(f"{model.arch}: no layer satisfies the CFM selection rule")
        self.model = model
        self.cfg = cfg
        self.seed = int(seed)
        self.layer_index: Dict[str, int] = {name: i for i, name in selected}
        self.stored: Dict[str, np.ndarray] = {}
        self.batch_size: Optional[int] = None
        self.storing = False
        self.frozen = False
        self.pass_key: Tuple[int, ...] = (0,)
        self._counter = 0
        self.draw_log: Optional[List[Tuple[str, MixDraw]]] = None

    @property
    def hooked_layers(self) -> List[str]:
        return list(self.layer_index)

    @property
    def ready(self) -> bool:
        return bool(self.stored)

    # hook protocol -------------------------------------------------

    def begin_pass(self) -> None:
        if not self.storing:
            self.resample()

    def __call__(self, name: str, index: int, out: Tensor) -> Tensor:
        if name not in self.layer_index:
            return out
        if self.storing:
            self.stored[name] = out.data.copy()
            return out
        return cfm_mix(self, name, out)

    # state ---------------------------------------------------------

    def resample(self) -> None:
        """Move to fresh draws for the next pass. No-op while frozen."""
        if self.frozen:
            return
        self._counter += 1
        self.pass_key = (self._counter,)

    def set_pass(self, *key: int) -> None:
        """Pin the draws of the following passes to an explicit key (and freeze)."""
        self.frozen = True
        self.pass_key = tuple(int(k) for k in key)

    def draw(self, name: str, batch: int, channels: int) -> MixDraw:
        cfg = self.cfg
        idx = self.layer_index[name]
        key = (idx,) + self.pass_key
        act = rngmod.stream(self.seed, rngmod.CFM_ACTIVATION, *key).random() < cfg.mixing_prob
        if not act:
            return MixDraw(False)
        if cfg.shuffle:
            perm = rngmod.stream(self.seed, rngmod.CFM_PERMUTATION, *key).permutation(batch)
        else:
            perm = np.arange(batch)
        width = channels if cfg.channelwise_alpha else 1
        alpha = rngmod.stream(self.seed, rngmod.CFM_ALPHA, *key).uniform(0.0, cfg.alpha_max, size=(batch, width))
        return MixDraw(True, perm, alpha)


def attach_cfm(model: Model, cfg: CfmConfig, seed: int = 0, layers: Optional[Sequence[str]] = None) -> CfmSession:
    return CfmSession(model, cfg, seed, layers)


def store_clean_features(session: CfmSession, model: Model, clean_batch) -> Tensor:
    """Run the one storage pass on the unperturbed batch. Returns its (unmixed) logits."""
    if session.stored:
        raise CfmStateError("clean features already stored for this session")
    session.storing = True
    try:
        logits = forward(model, clean_batch, session)
    finally:
        session.storing = False
    session.batch_size = logits.shape[0]
    return logits


def cfm_mix(session: CfmSession, layer_name: str, live: Tensor) -> Tensor:
    if not session.stored:
        raise CfmStateError("cfm_mix called before clean features were stored")
    stored = session.stored[layer_name]
    if stored.shape != live.shape:
        raise ShapeError(f"{layer_name}: live features {live.shape} differ from stored {stored.shape}")
    d = session.draw(layer_name, live.shape[0], live.shape[1])
    if session.draw_log is not None:
        session.draw_log.append((layer_name, d))
    if not d.active:
        return live
    if session.cfg.use_clean_features:
        return mix_features(live, stored, d.perm, d.alpha)
    return _mix_with_live(live, d.perm, d.alpha)


def resample(session: CfmSession) -> None:
    session.resample()
