"""Dense tensors with tape-style reverse-mode autodiff.

Storage is float32 by default. Every op accumulates in float64 and rounds the
result back to the operands' dtype, so a float64 tensor flowing through the
same ops gives a float64 result (used by the finite-difference checks).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "conv2d",
    "fully_connected",
    "relu",
    "maxpool2d",
    "flatten",
    "softmax_cross_entropy",
    "target_logit_loss",
    "add",
    "scale",
    "tsum",
    "affine_const",
    "separable_linear",
    "batch_gather",
    "backward",
    "topological_order",
    "grad_check",
    "gradient_pairs",
    "relative_errors",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    """n-d array plus an optional gradient accumulator and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.size == 0 or any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data.dtype for t in ts))


def _make(out64: np.ndarray, dtype, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(out64).astype(dtype, copy=False)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


# ---------------------------------------------------------------- conv / fc


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # x: [B, C, Hp, Wp] already padded -> [B, Ho, Wo, C, kh, kw]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [B,C,H,W] with weight [K,C,kh,kw] plus bias [K]."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv2d expects input [B,C,H,W], weight [K,C,kh,kw], bias [K]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    B, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if bias.shape[0] != K:
        raise ShapeError(f"conv2d bias has {bias.shape[0]} entries for {K} filters")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = _f64(x.data)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride).reshape(B * Ho * Wo, C * kh * kw)
    w2 = _f64(weight.data).reshape(K, C * kh * kw)
    out = cols @ w2.T + _f64(bias.data)
    out = out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)

    def _back(g: np.ndarray):
        g64 = _f64(g).transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g64.T @ cols).reshape(K, C, kh, kw)
        if bias.requires_grad:
            gb = g64.sum(axis=0)
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1:
                # full correlation of g with the flipped, transposed kernel
                gq = _f64(g)
                ph, pw = kh - 1 - padding, kw - 1 - padding
                gq = np.pad(gq, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                gcols2 = _im2col(gq, kh, kw, 1).reshape(B * H * W, K * kh * kw)
                wf = _f64(weight.data)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, K * kh * kw)
                gx = (gcols2 @ wf.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
            else:
                gcols = np.tensordot(_f64(g), _f64(weight.data), axes=([1], [0]))
                gcols = np.ascontiguousarray(gcols.transpose(0, 3, 4, 5, 1, 2))  # B,C,kh,kw,Ho,Wo
                gxp = np.zeros((B, C, Hp, Wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + H, padding : padding + W]
        return gx, gw, gb

    return _make(out, _result_dtype(x, weight, bias), (x, weight, bias), _back, "conv2d")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x [B,D] @ weight[O,D]^T + bias[O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"fully_connected expects [B,D], [O,D], [O]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(
            f"fully_connected dimension mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    x64, w64 = _f64(x.data), _f64(weight.data)
    out = x64 @ w64.T + _f64(bias.data)

    def _back(g: np.ndarray):
        g64 = _f64(g)
        gx = g64 @ w64 if x.requires_grad else None
        gw = g64.T @ x64 if weight.requires_grad else None
        gb = g64.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, _result_dtype(x, weight, bias), (x, weight, bias), _back, "fully_connected")


# ---------------------------------------------------------------- pointwise / shape


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0

    def _back(g):
        return (np.where(mask, g, 0.0),)

    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), x.dtype, (x,), _back, "relu")


def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling without padding. Ties route the gradient to the first maximum."""
    stride = k if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ShapeError(f"pool window {k} larger than input {H}x{W}")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _back(g):
        gx = np.zeros((B, C, H, W), dtype=np.float64)
        di, dj = np.divmod(arg, k)
        rows = np.arange(Ho)[:, None] * stride + di
        cols = np.arange(Wo)[None, :] * stride + dj
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        if stride >= k:
            gx[bi, ci, rows, cols] = g
        else:
            np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return _make(out, x.dtype, (x,), _back, "maxpool2d")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def _back(g):
        return (g.reshape(shape),)

    return _make(x.data.reshape(shape[0], -1), x.dtype, (x,), _back, "flatten")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def _back(g):
        return g, g

    return _make(_f64(a.data) + _f64(b.data), _result_dtype(a, b), (a, b), _back, "add")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def _back(g):
        return (_f64(g) * c,)

    return _make(_f64(x.data) * c, x.dtype, (x,), _back, "scale")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def _back(g):
        return (np.broadcast_to(_f64(g).reshape(()), shape),)

    return _make(np.array([_f64(x.data).sum()]), x.dtype, (x,), _back, "sum")


def affine_const(x: Tensor, mult: np.ndarray, shift: np.ndarray) -> Tensor:
    """mult * x + shift with constant (non-differentiable) mult and shift.

    Both are broadcast against x; the gradient w.r.t. x is mult * g.
    """
    m = np.broadcast_to(np.asarray(mult, dtype=np.float64), x.shape)
    s = np.broadcast_to(np.asarray(shift, dtype=np.float64), x.shape)

    def _back(g):
        return (_f64(g) * m,)

    return _make(m * _f64(x.data) + s, x.dtype, (x,), _back, "affine_const")


def separable_linear(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply rows [H',H] along the height axis and cols [W',W] along the width axis.

    out[b,c] = rows @ x[b,c] @ cols.T. Used for resize/pad geometry.
    """
    R = np.asarray(rows, dtype=np.float64)
    Cm = np.asarray(cols, dtype=np.float64)
    if x.data.ndim != 4 or R.shape[1] != x.shape[2] or Cm.shape[1] != x.shape[3]:
        raise ShapeError(f"separable_linear: matrices {R.shape}, {Cm.shape} do not fit input {x.shape}")
    out = np.matmul(np.matmul(R, _f64(x.data)), Cm.T)

    def _back(g):
        return (np.matmul(np.matmul(R.T, _f64(g)), Cm),)

    return _make(out, x.dtype, (x,), _back, "separable_linear")


def batch_gather(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select rows of the batch axis: out[i] = x[index[i]]."""
    idx = np.asarray(index, dtype=np.int64)
    B = x.shape[0]
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= B:
        raise IndexError(f"batch_gather index out of range for batch of {B}")

    def _back(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(gx, idx, _f64(g))
        return (gx,)

    return _make(x.data[idx], x.dtype, (x,), _back, "batch_gather")


# ---------------------------------------------------------------- losses


def _check_labels(labels, B: int, N: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != B:
        raise ShapeError(f"expected {B} labels, got {lab.shape[0]}")
    if lab.size and (lab.min() < 0 or lab.max() >= N):
        raise IndexError(f"label index out of range for {N} classes")
    return lab


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [B,N], got {logits.shape}")
    B, N = logits.shape
    lab = _check_labels(labels, B, N)
    z = _f64(logits.data)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = (logsum - z[np.arange(B), lab]).mean()

    def _back(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(B), lab] -= 1.0
        return (p * (float(np.asarray(g).reshape(-1)[0]) / B),)

    return _make(np.array([loss]), logits.dtype, (logits,), _back, "softmax_cross_entropy")


def target_logit_loss(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -logits[i, target_i]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [B,N], got {logits.shape}")
    B, N = logits.shape
    tgt = _check_labels(targets, B, N)
    loss = -_f64(logits.data)[np.arange(B), tgt].mean()

    def _back(g):
        gl = np.zeros((B, N))
        gl[np.arange(B), tgt] = -float(np.asarray(g).reshape(-1)[0]) / B
        return (gl,)

    return _make(np.array([loss]), logits.dtype, (logits,), _back, "logit_loss")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list:
    """Nodes reachable from root that require grad, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate .grad on every leaf reachable from scalar root that requires grad.

    Leaf gradients accumulate across calls; intermediate grads are not kept.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    grads = {id(root): np.ones(root.shape, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            contrib = np.asarray(g).astype(node.dtype)
            node.grad = contrib if node.grad is None else (node.grad + contrib).astype(node.dtype)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)


# ---------------------------------------------------------------- checking


def gradient_pairs(f: Callable[[Tensor], Tensor], point, h: float = 1e-3, coords: Optional[Iterable[int]] = None):
    """Analytic and central-difference gradients of scalar f at point, in float64.

    Returns (analytic, numeric) flat arrays over the requested coordinates
    (all of them by default).
    """
    x0 = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    backward(f(xt))
    analytic_full = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)
    idx = np.arange(x0.size) if coords is None else np.asarray(list(coords), dtype=np.int64)
    numeric = np.empty(idx.size)
    flat = x0.reshape(-1)
    for n, i in enumerate(idx):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape), dtype=np.float64)).item()
        fm = f(Tensor(xm.reshape(x0.shape), dtype=np.float64)).item()
        numeric[n] = (fp - fm) / (2 * h)
    return analytic_full.reshape(-1)[idx], numeric


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-3) -> float:
    """Max relative error of the analytic gradient of f against central differences."""
    rel = relative_errors(*gradient_pairs(f, point, h))
    return float(rel.max()) if rel.size else 0.0
