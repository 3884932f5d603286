import numpy as np
import pytest

from cfmlab import cfmw
from cfmlab.cfm import select_layers
from cfmlab.data import make_synthetic
from cfmlab.models import (
    ARCHS,
    TrainConfig,
    build_model,
    forward,
    load_weights,
    save_weights,
    train,
)
from cfmlab.tensor import ShapeError, Tensor


class Recorder:
    def __init__(self, replace=None):
        self.seen, self.replace = [], replace

    def begin_pass(self):
        self.seen.append("begin")

    def __call__(self, name, index, out):
        self.seen.append(name)
        return self.replace(name, out) if self.replace else out


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_image_gives_final_bias(arch):
    m = build_model(arch, (3, 32, 32), 10, seed=1)
    bias = np.arange(10, dtype=np.float32) * 0.1
    m.weights["logits.bias"] = Tensor(bias)
    out = forward(m, np.zeros((2, 3, 32, 32), dtype=np.float32))
    np.testing.assert_array_equal(out.data, np.tile(bias, (2, 1)))


def test_build_is_deterministic_and_archs_differ():
    a1, a2 = build_model("tinyA", seed=3), build_model("tinyA", seed=3)
    for k in a1.param_names():
        assert a1.weights[k].data.tobytes() == a2.weights[k].data.tobytes()
    assert len(build_model("tinyA").specs) != len(build_model("tinyB").specs)


@pytest.mark.parametrize("arch", ARCHS)
def test_zoo_shape_rules(arch):
    m = build_model(arch, (3, 16, 16))
    convs = [i for i, s in enumerate(m.specs) if s.kind == "conv"]
    assert 3 <= len(convs) <= 6
    assert sum(s.kind == "maxpool" for s in m.specs) >= 2
    areas = [m.shapes[i][1] * m.shapes[i][2] for i in convs]
    assert min(areas) <= 16 * 16 / 16 < max(areas)
    assert any(m.specs[i].kind == "conv" for i, _ in select_layers(m))


def test_he_uniform_bounds():
    m = build_model("tinyA", seed=0)
    w = m.weights["conv1.weight"].data
    bound = np.sqrt(6 / (3 * 3 * 3))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert not np.any(m.weights["conv1.bias"].data)


def test_small_input_rejected():
    with pytest.raises(ShapeError):
        build_model("tinyA", (3, 8, 8))
    with pytest.raises(ValueError):
        build_model("tinyZ")


def test_hooks_see_every_conv_fc_and_identity_is_bitwise(rng):
    m = build_model("tinyC", seed=2)
    x = rng.random((3, 3, 16, 16)).astype(np.float32)
    rec = Recorder()
    out = forward(m, x, rec)
    assert rec.seen == ["begin"] + [s.name for s in m.specs if s.hookable]
    assert out.data.tobytes() == forward(m, x).data.tobytes()


def test_zeroing_final_preactivation():
    m = build_model("tinyB", seed=2)
    zero = Recorder(lambda name, out: Tensor(np.zeros(out.shape)) if name == "logits" else out)
    out = forward(m, np.ones((2, 3, 16, 16), dtype=np.float32), zero)
    assert not np.any(out.data)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(build_model("tinyA"), np.zeros((1, 3, 17, 16), dtype=np.float32))


def test_four_class_training_reaches_90_percent():
    tr = make_synthetic(4, 100, seed=1)
    te = make_synthetic(4, 50, seed=2)
    m = build_model("tinyA", (3, 16, 16), 4, seed=0)
    res = train(m, tr, TrainConfig(epochs=5, seed=0), te)
    assert res.accuracy >= 0.90


def test_zero_learning_rate_keeps_weights():
    m = build_model("tinyA", (3, 16, 16), 4, seed=0)
    before = [p.data.copy() for p in m.parameters()]
    train(m, make_synthetic(4, 10, seed=1), TrainConfig(epochs=1, learning_rate=0.0))
    for b, p in zip(before, m.parameters()):
        assert b.tobytes() == p.data.tobytes()


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        m = build_model("tinyB", (3, 16, 16), 4, seed=4)
        train(m, make_synthetic(4, 10, seed=1), TrainConfig(epochs=1, seed=9))
        runs.append(b"".join(p.data.tobytes() for p in m.parameters()))
    assert runs[0] == runs[1]


def test_label_range_checked():
    m = build_model("tinyA", (3, 16, 16), 4)
    with pytest.raises(ValueError):
        train(m, make_synthetic(10, 2, seed=1), TrainConfig(epochs=1))


def test_weight_file_round_trip(tmp_path, rng):
    m = build_model("tinyD", (3, 16, 16), 10, seed=5)
    p1, p2 = tmp_path / "a.cfmw", tmp_path / "b.cfmw"
    save_weights(m, p1)
    m2 = load_weights(p1)
    save_weights(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = rng.random((2, 3, 16, 16)).astype(np.float32)
    assert forward(m, x).data.tobytes() == forward(m2, x).data.tobytes()


def test_weight_file_errors(tmp_path):
    p = tmp_path / "m.cfmw"
    save_weights(build_model("tinyA"), p)
    raw = p.read_bytes()
    p.write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(cfmw.BadMagicError):
        load_weights(p)
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(cfmw.TruncatedFileError):
        load_weights(p)
