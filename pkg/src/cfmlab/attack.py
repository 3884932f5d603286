"""Iterative targeted attack: gradient aggregation, VT, MI, TI, sign step, projection.

Every random draw is keyed by (seed, purpose, iteration, sub-pass), so switching
one component off leaves the draws of all others untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import rng as rngmod
from .cfm import CfmConfig, CfmSession, attach_cfm, store_clean_features
from .models import Model, forward
from .tensor import Tensor, backward, softmax_cross_entropy, target_logit_loss
from .transforms import (
    TransformConfig,
    admix_round,
    di_transform,
    rdi_transform,
    si_copies,
    ti_kernel,
    ti_smooth,
)

log = logging.getLogger(__name__)

LOSSES = ("logit", "cross_entropy")


@dataclass
class AttackConfig:
    epsilon: float = 16 / 255
    eta: float = 2 / 255
    iterations: int = 300
    mu: float = 1.0
    momentum: bool = True
    mi_normalize: bool = True
    transform: TransformConfig = field(default_factory=TransformConfig)
    cfm: Optional[CfmConfig] = None
    loss: str = "logit"
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.epsilon > 0 and not 0 < self.eta <= self.epsilon:
            raise ValueError(f"need 0 < eta <= epsilon, got eta={self.eta}, epsilon={self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")


@dataclass
class AttackState:
    x_adv: np.ndarray
    g: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AttackTrace:
    losses: List[float] = field(default_factory=list)
    target_ranks: List[np.ndarray] = field(default_factory=list)  # 0 = target is top-1

    def __len__(self) -> int:
        return len(self.losses)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    trace: AttackTrace
    session: Optional[CfmSession] = None


# ---------------------------------------------------------------- primitives


def logit_loss(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -logit[target]."""
    return target_logit_loss(logits, targets)


def loss_fn(name: str) -> Callable[[Tensor, np.ndarray], Tensor]:
    return logit_loss if name == "logit" else softmax_cross_entropy


def fgsm_step(x_adv: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    """x - eta * sign(grad), in float64."""
    return np.asarray(x_adv, dtype=np.float64) - eta * np.sign(grad)


def _inner_bounds(x: np.ndarray, eps: float, dtype) -> Tuple[np.ndarray, np.ndarray]:
    # representable bounds that never leave [x - eps, x + eps]
    x64 = np.asarray(x, dtype=np.float64)
    lo = (x64 - eps).astype(dtype)
    hi = (x64 + eps).astype(dtype)
    lo = np.where(lo.astype(np.float64) < x64 - eps, np.nextafter(lo, dtype(np.inf)), lo)
    hi = np.where(hi.astype(np.float64) > x64 + eps, np.nextafter(hi, dtype(-np.inf)), hi)
    return lo, hi


def project(x_adv: np.ndarray, x_clean: np.ndarray, epsilon: float, dtype=np.float32) -> np.ndarray:
    """Clamp to the epsilon box around x_clean, then to [0,1]. Result is in dtype and the
    box constraint holds exactly for the stored values."""
    lo, hi = _inner_bounds(x_clean, epsilon, dtype)
    x = np.asarray(x_adv, dtype=np.float64)
    x = np.minimum(np.maximum(x, lo.astype(np.float64)), hi.astype(np.float64))
    return np.clip(x, 0.0, 1.0).astype(dtype)


def mi_update(g: np.ndarray, grad: np.ndarray, mu: float, normalize: bool = True) -> np.ndarray:
    """mu * g + grad / ||grad||_1, the L1 norm taken per image. Zero-norm images use grad as-is."""
    d = np.asarray(grad, dtype=np.float64)
    if normalize:
        norms = np.abs(d).reshape(d.shape[0], -1).sum(axis=1)
        norms = np.where(norms > 0, norms, 1.0).reshape((-1,) + (1,) * (d.ndim - 1))
        d = d / norms
    return mu * np.asarray(g, dtype=np.float64) + d


def target_ranks(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Number of classes scoring strictly above the target, ties counted for lower indices."""
    tl = logits[np.arange(len(targets)), targets][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    above = (logits > tl) | ((logits == tl) & (idx < np.asarray(targets)[:, None]))
    return above.sum(axis=1)


# ---------------------------------------------------------------- gradient aggregation


def aggregate_gradient(
    model: Model,
    x_adv: np.ndarray,
    targets,
    cfg: AttackConfig,
    t: int = 0,
    hooks: Optional[CfmSession] = None,
    offset: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, float, np.ndarray]:
    """Mean input-gradient over the transformed passes of iteration t.

    Passes: {admix_r(si_i(di_or_rdi(x)))}; DI/RDI is drawn once per call, each SI
    copy and Admix round is a separate forward/backward. CFM draws are pinned to
    the key (t, i, r) so that a replay (VT neighbours) sees the same mixing.
    offset, when given, is added to x before the transforms (VT neighbours).

    Returns (gradient as float64, mean loss over passes, logits of the first pass).
    """
    tc = cfg.transform
    targets = np.asarray(targets)
    base = np.asarray(x_adv, dtype=np.float32)
    if offset is not None:
        base = (base.astype(np.float64) + offset).astype(np.float32)
    x = Tensor(base, requires_grad=True)
    xt = x
    if tc.di:
        xt = di_transform(xt, tc, rngmod.stream(cfg.seed, rngmod.DI, t))
    if tc.rdi:
        xt = rdi_transform(xt, tc, rngmod.stream(cfg.seed, rngmod.RDI, t))
    copies = si_copies(xt, tc.si_copies) if tc.si else [xt]
    rounds = tc.admix_rounds if tc.admix else 1
    lf = loss_fn(cfg.loss)
    total = np.zeros(x.shape, dtype=np.float64)
    losses = []
    first_logits = None
    for i, copy in enumerate(copies):
        for r in range(rounds):
            inp = admix_round(copy, tc.admix_weight, rngmod.stream(cfg.seed, rngmod.ADMIX, t, i, r)) if tc.admix else copy
            if hooks is not None:
                hooks.set_pass(t, i, r)
            logits = forward(model, inp, hooks)
            loss = lf(logits, targets)
            x.grad = None
            backward(loss)
            total += x.grad.astype(np.float64)
            losses.append(loss.item())
            if first_logits is None:
                first_logits = logits.data
    n = len(losses)
    return total / n, float(np.mean(losses)), first_logits


def vt_adjust(
    state: AttackState,
    raw_grad: np.ndarray,
    grad_at: Callable[[np.ndarray], np.ndarray],
    n_samples: int,
    beta: float,
    epsilon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Variance tuning. Returns raw_grad + v_t and stores v_{t+1} in state.

    v_{t+1} = mean_k grad_at(r_k) - raw_grad with r_k ~ U(-beta*eps, beta*eps).
    grad_at(offset) must evaluate the gradient at x_adv + offset.
    """
    direction = raw_grad + state.v
    acc = np.zeros_like(raw_grad, dtype=np.float64)
    bound = beta * epsilon
    for _ in range(n_samples):
        r = rng.uniform(-bound, bound, size=raw_grad.shape)
        # differences first, so identical neighbour gradients give v = 0 exactly
        acc += grad_at(r) - raw_grad
    state.v = acc / n_samples
    return direction


# ---------------------------------------------------------------- attack loop


def run_attack(
    model: Model,
    clean,
    targets,
    cfg: AttackConfig,
    callback: Optional[Callable[[AttackState], None]] = None,
) -> AttackResult:
    """Targeted L-inf attack on one batch.

    With CFM: one storage pass on the clean batch, then iterations-1 updates.
    Without: iterations updates. Each update is
    gradient -> (VT) -> (MI) -> (TI) -> sign step -> projection.
    """
    x_clean = np.asarray(clean, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.int64)
    tc = cfg.transform
    session = None
    n_iter = cfg.iterations
    if cfg.cfm is not None:
        session = attach_cfm(model, cfg.cfm, seed=cfg.seed)
        store_clean_features(session, model, x_clean)
        n_iter -= 1
    kernel = ti_kernel(tc.ti_kernel_size) if tc.ti else None
    state = AttackState(x_clean.copy(), np.zeros(x_clean.shape), np.zeros(x_clean.shape))
    trace = AttackTrace()
    for t in range(n_iter):
        g_hat, loss, logits = aggregate_gradient(model, state.x_adv, targets, cfg, t, session)
        trace.losses.append(loss)
        trace.target_ranks.append(target_ranks(logits, targets))
        d = g_hat
        if tc.vt:
            x_now = state.x_adv

            def grad_at(offset, _t=t, _x=x_now):
                return aggregate_gradient(model, _x, targets, cfg, _t, session, offset=offset)[0]

            d = vt_adjust(state, g_hat, grad_at, tc.vt_samples, tc.vt_beta, cfg.epsilon, rngmod.stream(cfg.seed, rngmod.VT, t))
        if cfg.momentum:
            g = mi_update(state.g, d, cfg.mu, cfg.mi_normalize)
        else:
            g = np.asarray(d, dtype=np.float64)
        if kernel is not None:
            g = ti_smooth(g, kernel)
        state.g = g
        state.x_adv = project(fgsm_step(state.x_adv, g, cfg.eta), x_clean, cfg.epsilon)
        state.t = t + 1
        if callback is not None:
            callback(state)
    return AttackResult(state.x_adv, trace, session)
