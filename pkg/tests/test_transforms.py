import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cfmlab.tensor import Tensor, backward, tsum
from cfmlab.transforms import (
    TransformConfig,
    admix_round,
    di_transform,
    expand_pad_shrink,
    rdi_transform,
    resize_matrix,
    si_copies,
    ti_kernel,
    ti_smooth,
)


def batch(rng, b=3, c=2, h=16):
    return rng.random((b, c, h, h)).astype(np.float32)


def bilinear_ref(img, n_out):
    # independent 1-D half-pixel bilinear resize, edge clamped
    n_in = len(img)
    out = np.empty(n_out)
    for d in range(n_out):
        s = min(max((d + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        out[d] = img[i0] * (1 - (s - i0)) + img[i1] * (s - i0)
    return out


@pytest.mark.parametrize("n_out,n_in", [(16, 18), (18, 16), (17, 16), (16, 16), (5, 9)])
def test_resize_matrix_matches_reference(rng, n_out, n_in):
    v = rng.normal(size=n_in)
    np.testing.assert_allclose(resize_matrix(n_out, n_in) @ v, bilinear_ref(v, n_out), atol=1e-12)
    np.testing.assert_allclose(resize_matrix(n_out, n_in).sum(1), 1.0)


def test_expand_pad_shrink_composes_steps(rng):
    v = rng.normal(size=16)
    up = bilinear_ref(v, 17)
    padded = np.zeros(18)
    padded[1:18] = up
    np.testing.assert_allclose(expand_pad_shrink(16, 17, 18, 1) @ v, bilinear_ref(padded, 16), atol=1e-12)


def test_di_zero_probability_is_identity(rng):
    x = Tensor(batch(rng))
    assert di_transform(x, TransformConfig(di_prob=0.0), np.random.default_rng(0)) is x


def test_rdi_scale_one_is_identity(rng):
    x = Tensor(batch(rng))
    assert rdi_transform(x, TransformConfig(rdi_scale_max=1.0), np.random.default_rng(0)) is x


@given(st.integers(0, 2**32), st.sampled_from([16, 20]))
def test_rdi_shape_range_and_determinism(seed, h):
    x = np.random.default_rng(seed).random((2, 3, h, h)).astype(np.float32)
    a = rdi_transform(x, TransformConfig(), np.random.default_rng(seed))
    b = rdi_transform(x, TransformConfig(), np.random.default_rng(seed))
    assert a.shape == x.shape
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.min() >= 0 and a.data.max() <= 1 + 1e-6


def test_di_fires_with_roughly_its_probability(rng):
    x = Tensor(batch(rng))
    fired = sum(di_transform(x, TransformConfig(), np.random.default_rng(s)) is not x for s in range(400))
    assert 0.6 < fired / 400 < 0.8


def test_si_copies_values():
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    assert [c.data[0, 0, 0, 0] for c in si_copies(x, 3)] == [1.0, 0.5, 0.25]
    assert len(si_copies(x, 1)) == 1 and si_copies(x, 1)[0].data.tobytes() == x.tobytes()


@given(st.integers(1, 8))
def test_si_sum_is_geometric(m):
    x = np.full((1, 1, 2, 2), 0.75)
    total = sum(c.data.astype(np.float64) for c in si_copies(x, m))
    np.testing.assert_allclose(total, x * (2 - 2.0 ** (1 - m)), rtol=1e-6)


def test_admix_examples(rng):
    x = batch(rng, b=2)
    swap = np.random.default_rng(0)
    while True:  # find a seed whose permutation is the swap
        state = swap.bit_generator.state
        if swap.permutation(2).tolist() == [1, 0]:
            swap.bit_generator.state = state
            break
    out = admix_round(x, 0.2, swap).data
    np.testing.assert_allclose(out[0], x[0] + np.float32(0.2) * x[1], rtol=1e-6)
    zero = admix_round(x, 0.0, np.random.default_rng(0)).data
    assert zero.tobytes() == x.tobytes()
    with pytest.raises(ValueError):
        admix_round(x[:1], 0.2, np.random.default_rng(0))


@given(st.integers(0, 2**32), st.floats(0, 1))
def test_admix_preserves_batch_sum(seed, w):
    x = np.random.default_rng(seed).random((5, 1, 2, 2))
    out = admix_round(Tensor(x, dtype=np.float64), w, np.random.default_rng(seed)).data
    np.testing.assert_allclose(out.mean(0).mean(), (1 + w) * x.mean(), rtol=1e-12)


def test_admix_gradient_counts_both_terms():
    x = Tensor(np.zeros((3, 1, 1, 1)), requires_grad=True, dtype=np.float64)
    backward(tsum(admix_round(x, 0.2, np.random.default_rng(4))))
    np.testing.assert_allclose(x.grad.reshape(-1), 1.2)


def test_ti_kernel_properties():
    assert ti_kernel(1).tolist() == [[1.0]]
    k = ti_kernel(5)
    assert abs(k.sum() - 1) < 1e-6
    np.testing.assert_array_equal(k, k[::-1])
    np.testing.assert_array_equal(k, k[:, ::-1])
    g = np.exp(-(np.arange(-2, 3) ** 2) / (2 * (5 / 3) ** 2))
    np.testing.assert_allclose(k, np.outer(g, g) / np.outer(g, g).sum(), rtol=1e-14)
    with pytest.raises(ValueError):
        ti_kernel(4)


def test_ti_smooth_matches_brute_force(rng):
    field = rng.normal(size=(1, 1, 7, 7))
    k = ti_kernel(5)
    want = np.zeros((7, 7))
    for y in range(7):
        for x in range(7):
            acc = 0.0
            for i in range(5):
                for j in range(5):
                    yy, xx = y + i - 2, x + j - 2
                    if 0 <= yy < 7 and 0 <= xx < 7:
                        acc += k[i, j] * field[0, 0, yy, xx]
            want[y, x] = acc
    np.testing.assert_array_equal(ti_smooth(field, k)[0, 0], want)


def test_ti_constant_field():
    out = ti_smooth(np.ones((1, 1, 9, 9)), ti_kernel(5))[0, 0]
    np.testing.assert_allclose(out[2:-2, 2:-2], 1.0)
    assert out[0, 0] < out[0, 4] < 1.0


@given(hnp.arrays(np.float64, (1, 2, 5, 5), elements=st.floats(-1, 1)))
def test_ti_size_one_is_identity(field):
    assert ti_smooth(field, ti_kernel(1)).tobytes() == field.tobytes()


def test_config_validation():
    for bad in [dict(di_prob=1.5), dict(ti_kernel_size=4), dict(di_scale_max=0.9), dict(si_copies=0)]:
        with pytest.raises(ValueError):
            TransformConfig(**bad)
