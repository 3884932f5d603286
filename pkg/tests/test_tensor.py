"""Autodiff ops: forward values against direct numpy, gradients against central differences."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmlab.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    affine_const,
    backward,
    batch_gather,
    conv2d,
    flatten,
    fully_connected,
    grad_check,
    gradient_pairs,
    maxpool2d,
    relative_errors,
    relu,
    scale,
    separable_linear,
    softmax_cross_entropy,
    target_logit_loss,
    tsum,
)


def weighted_sum(t, w):
    # scalar probe: sum(w * t), so every output coordinate gets a distinct weight
    return tsum(affine_const(t, w, np.zeros(1)))


def conv_ref(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    B, C, H, W = xp.shape
    O, _, kh, kw = w.shape
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    return out


# ---------------------------------------------------------------- forward values


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (2, 2)])
def test_conv2d_matches_direct_loop(rng, stride, pad):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride, pad)
    np.testing.assert_allclose(out.data, conv_ref(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_fully_connected_value(rng):
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    out = fully_connected(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(out.data, x @ w.T + b, rtol=1e-12)


def test_maxpool_picks_first_max_on_ties():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    out = maxpool2d(x, 2, 2)
    backward(tsum(out))
    assert out.data.item() == 1.0
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_relu_gradient_is_zero_at_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    backward(tsum(relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_float32_storage_float64_accumulation():
    # 1e8 + 1 - 1e8 is lost in float32 sums but kept with float64 accumulation
    x = Tensor(np.array([1e8, 1.0, -1e8], dtype=np.float32))
    assert tsum(x).item() == 1.0
    assert tsum(x).dtype == np.float32


def test_logit_loss_examples():
    logits = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
    loss = target_logit_loss(logits, [2])
    assert loss.item() == -3.0
    backward(loss)
    np.testing.assert_array_equal(logits.grad, [[0, 0, -1]])
    shifted = target_logit_loss(Tensor(np.array([[1.0, 2.0, 3.0]]) + 5.0), [2])
    assert shifted.item() == -8.0


def test_cross_entropy_value(rng):
    z = rng.normal(size=(4, 6))
    lab = np.array([0, 5, 2, 2])
    want = np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(4), lab])
    got = softmax_cross_entropy(Tensor(z, dtype=np.float64), lab).item()
    assert abs(got - want) < 1e-12


# ---------------------------------------------------------------- errors


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        scale(Tensor(np.array([3e38], dtype=np.float32)), 10.0)


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones(1)))
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(IndexError):
        target_logit_loss(Tensor(np.ones((1, 3))), [3])
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 2)))


def test_leaf_gradients_accumulate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(tsum(scale(x, 3.0)))
    backward(tsum(scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6, 6])


def test_shared_subexpression_gradient():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = scale(x, 2.0)
    backward(tsum(add(y, y)))
    np.testing.assert_array_equal(x.grad, [4, 4])


# ---------------------------------------------------------------- gradient oracles

OPS = {
    "conv2d_s1": lambda w, b: (lambda t: conv2d(t, w, b, 1, 1), (2, 3, 5, 5)),
    "conv2d_s2": lambda w, b: (lambda t: conv2d(t, w, b, 2, 1), (2, 3, 6, 6)),
    "fully_connected": lambda w, b: (lambda t: fully_connected(t, Tensor(np.ones((4, 6)) * 0.3), b), (2, 6)),
    "relu": lambda w, b: (relu, (3, 7)),
    "maxpool2d": lambda w, b: (lambda t: maxpool2d(t, 2, 2), (2, 2, 4, 4)),
    "flatten": lambda w, b: (flatten, (2, 3, 2, 2)),
    "add": lambda w, b: (lambda t: add(t, scale(t, 0.5)), (3, 4)),
    "scale": lambda w, b: (lambda t: scale(t, -1.7), (3, 4)),
    "separable_linear": lambda w, b: (
        lambda t: separable_linear(t, np.arange(12.0).reshape(3, 4) / 7, np.arange(10.0).reshape(2, 5) / 9),
        (2, 1, 4, 5),
    ),
    "batch_gather": lambda w, b: (lambda t: batch_gather(t, [2, 0, 2]), (3, 4)),
    "affine_const": lambda w, b: (lambda t: affine_const(t, np.linspace(0.2, 1.0, 4), 0.3), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(rng, name):
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.4)
    b = Tensor(rng.normal(size=4))
    op, shape = OPS[name](w, b)
    x = rng.normal(size=shape)
    probe = None

    def f(t):
        nonlocal probe
        out = op(t)
        if probe is None:
            probe = np.random.default_rng(5).normal(size=out.shape)
        return weighted_sum(out, probe)

    rel = relative_errors(*gradient_pairs(f, x, h=1e-5))
    assert np.mean(rel < 1e-3) >= 0.95, f"{name}: max rel err {rel.max():.3g}"


@pytest.mark.parametrize("loss", [softmax_cross_entropy, target_logit_loss])
def test_loss_gradients(rng, loss):
    z = rng.normal(size=(3, 5))
    assert grad_check(lambda t: loss(t, [1, 4, 0]), z, h=1e-6) < 1e-6


@given(st.integers(1, 4), st.integers(1, 5), st.floats(-3, 3))
def test_scale_gradient_property(b, n, c):
    x = Tensor(np.linspace(-1, 1, b * n).reshape(b, n), requires_grad=True, dtype=np.float64)
    backward(tsum(scale(x, c)))
    np.testing.assert_array_equal(x.grad, np.full((b, n), c))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=8))
def test_batch_gather_gradient_counts_picks(idx):
    x = Tensor(np.zeros((5, 2)), requires_grad=True, dtype=np.float64)
    backward(tsum(batch_gather(x, idx)))
    counts = np.bincount(idx, minlength=5).astype(float)
    np.testing.assert_array_equal(x.grad, np.repeat(counts[:, None], 2, axis=1))
