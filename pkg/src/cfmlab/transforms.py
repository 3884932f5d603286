"""Stochastic input transforms (DI, RDI, SI, Admix) and the TI gradient kernel.

DI/RDI geometry (resize -> zero pad -> resize back) is linear and separable, so
it is applied as one pair of row/column matrices through
:func:`cfmlab.tensor.separable_linear`, which keeps it differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .tensor import Tensor, add, batch_gather, scale, separable_linear


@dataclass
class TransformConfig:
    di: bool = False
    rdi: bool = False
    si: bool = False
    vt: bool = False
    admix: bool = False
    ti: bool = False
    di_prob: float = 0.7
    di_scale_max: float = 330 / 299
    rdi_scale_max: float = 340 / 299
    si_copies: int = 5
    vt_samples: int = 5
    vt_beta: float = 1.5
    admix_weight: float = 0.2
    admix_rounds: int = 3
    ti_kernel_size: int = 5

    def __post_init__(self):
        if not 0 <= self.di_prob <= 1:
            raise ValueError(f"di_prob must be in [0,1], got {self.di_prob}")
        if self.di_scale_max < 1 or self.rdi_scale_max < 1:
            raise ValueError("scale maxima must be >= 1")
        if self.ti_kernel_size < 1 or self.ti_kernel_size % 2 == 0:
            raise ValueError(f"ti_kernel_size must be odd, got {self.ti_kernel_size}")
        if self.si_copies < 1 or self.vt_samples < 1 or self.admix_rounds < 1:
            raise ValueError("si_copies, vt_samples and admix_rounds must be >= 1")
        if self.vt_beta < 0:
            raise ValueError("vt_beta must be non-negative")


# ---------------------------------------------------------------- geometry


def resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear interpolation weights, half-pixel centres, edge-clamped. Rows sum to 1."""
    M = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0 if i1 != i0 else 0.0
        M[d, i0] += 1.0 - w1
        M[d, i1] += w1
    return M


def pad_matrix(n_out: int, n_in: int, offset: int) -> np.ndarray:
    """Places n_in samples at [offset, offset+n_in) of a zero vector of length n_out."""
    M = np.zeros((n_out, n_in))
    M[offset + np.arange(n_in), np.arange(n_in)] = 1.0
    return M


def expand_pad_shrink(n: int, r: int, s: int, offset: int) -> np.ndarray:
    """n -> resize to r -> zero-pad to s at offset -> resize back to n, as one n x n matrix."""
    return resize_matrix(n, s) @ pad_matrix(s, r, offset) @ resize_matrix(r, n)


def padded_size(n: int, scale_max: float) -> int:
    return int(math.floor(n * scale_max + 1e-9))


def _as_tensor(batch) -> Tensor:
    return batch if isinstance(batch, Tensor) else Tensor(batch)


def _random_expand(x: Tensor, scale_max: float, rng: np.random.Generator) -> Tensor:
    B, C, H, W = x.shape
    if H != W:
        raise ValueError(f"square inputs required, got {H}x{W}")
    S = padded_size(H, scale_max)
    r = int(rng.integers(H, S + 1))
    top = int(rng.integers(0, S - r + 1))
    left = int(rng.integers(0, S - r + 1))
    if r == H and S == H:
        return x
    return separable_linear(x, expand_pad_shrink(H, r, S, top), expand_pad_shrink(W, r, S, left))


def di_transform(batch, cfg: TransformConfig, rng: np.random.Generator) -> Tensor:
    """With probability di_prob, random expand + pad, resized back to the input size."""
    x = _as_tensor(batch)
    if not rng.random() < cfg.di_prob:
        return x
    return _random_expand(x, cfg.di_scale_max, rng)


def rdi_transform(batch, cfg: TransformConfig, rng: np.random.Generator) -> Tensor:
    """Always-on random expand + pad + shrink back."""
    return _random_expand(_as_tensor(batch), cfg.rdi_scale_max, rng)


def si_copies(batch, m: int) -> List[Tensor]:
    """x / 2**i for i in 0..m-1."""
    if m < 1:
        raise ValueError("m must be >= 1")
    x = _as_tensor(batch)
    return [scale(x, 1.0 / 2**i) for i in range(m)]


def admix_round(batch, w: float, rng: np.random.Generator) -> Tensor:
    """x_i + w * x_perm(i) for a uniform random permutation of the batch."""
    x = _as_tensor(batch)
    if x.shape[0] < 2:
        raise ValueError("admix needs a batch of at least 2 images")
    perm = rng.permutation(x.shape[0])
    return add(x, scale(batch_gather(x, perm), w))


# ---------------------------------------------------------------- TI


def ti_kernel(size: int) -> np.ndarray:
    """Normalised 2-D Gaussian with sigma = size / 3 sampled at integer offsets."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"TI kernel size must be odd, got {size}")
    half = (size - 1) // 2
    sigma = size / 3.0
    j = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(j**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ti_smooth(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Depthwise 2-D correlation of a [B,C,H,W] field with kernel, zero padding, same size."""
    k = np.asarray(kernel, dtype=np.float64)
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("TI kernel must be odd-sized")
    g = np.asarray(grad, dtype=np.float64)
    if kh == 1 and kw == 1:
        return g * k[0, 0]
    ph, pw = kh // 2, kw // 2
    H, W = g.shape[2:]
    gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(g)
    # row-major accumulation order over kernel taps
    for i in range(kh):
        for j in range(kw):
            out += k[i, j] * gp[:, :, i : i + H, j : j + W]
    return out
