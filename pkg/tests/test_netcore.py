import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vid2log.errors import CheckpointError, LabelError, ShapeError, TrainingError, ValidationError
from vid2log.ingest import DatasetManifest, EventVocabulary, LabeledFrame
from vid2log.netcore import (
    Checkpoint,
    ConvBlock,
    ModelSpec,
    TrainConfig,
    build_activity_net,
    build_event_net,
    dumps_checkpoint,
    forward,
    gradient_check,
    load_checkpoint,
    loads_checkpoint,
    manifest_inputs,
    parameter_count,
    parameter_shapes,
    predict_labels,
    save_checkpoint,
    train,
)

from .conftest import make_manifest


def test_event_net_paper_head_width_30():
    spec = build_event_net(30, "paper")
    shapes = parameter_shapes(spec)
    assert shapes["head.weight"] == (30, 4096)
    assert len(spec.conv_blocks) == 5 and len(spec.fc_widths) + 1 == 3


def test_event_net_paper_parameter_count():
    # walkthrough at 227x227x3, "same" padding:
    #   conv 11/4 -> 57, pool 3/2 -> 28; conv 5 -> 28, pool -> 13;
    #   conv3 x3 at 13, pool -> 6; flatten 256*6*6 = 9216
    layers = [
        96 * 3 * 11 * 11 + 96,
        256 * 96 * 5 * 5 + 256,
        384 * 256 * 3 * 3 + 384,
        384 * 384 * 3 * 3 + 384,
        256 * 384 * 3 * 3 + 256,
        9216 * 4096 + 4096,
        4096 * 4096 + 4096,
        4096 * 30 + 30,
    ]
    assert parameter_count(build_event_net(30, "paper")) == sum(layers) == 58_404_254


def test_event_net_desk_parameter_count():
    # walkthrough at 64x64x3:
    #   conv 5/2 -> 32, pool 2 -> 16; conv 3 -> 16, pool -> 8; conv, conv at 8;
    #   conv then pool -> 4; flatten 48*4*4 = 768
    layers = [
        16 * 3 * 5 * 5 + 16,
        32 * 16 * 3 * 3 + 32,
        32 * 32 * 3 * 3 + 32,
        48 * 32 * 3 * 3 + 48,
        48 * 48 * 3 * 3 + 48,
        768 * 128 + 128,
        128 * 128 + 128,
        128 * 8 + 8,
    ]
    spec = build_event_net(8)
    assert parameter_count(spec) == sum(layers) == 165_736
    assert Checkpoint.initialise(spec, 0).parameter_count() == sum(layers)


def test_event_net_single_event():
    spec = build_event_net(1, input_shape=(32, 32, 3))
    ckpt = Checkpoint.initialise(spec, 0)
    out = forward(ckpt, np.zeros((2, 1, 3, 32, 32), np.uint8))
    assert out.shape == (2, 1)


def test_event_net_errors():
    with pytest.raises(ValidationError):
        build_event_net(0)
    with pytest.raises(ValidationError):
        build_event_net(3, "huge")


def test_activity_heads():
    assert parameter_shapes(build_activity_net(101))["head.weight"][0] == 101
    two = build_activity_net(10, two_stream=True)
    shapes = parameter_shapes(two)
    assert shapes["head.weight"][0] == 10
    assert any(n.startswith("motion.") for n in shapes) and "fusion.weight" in shapes


def test_single_and_two_stream_differ_only_in_branch_and_fusion():
    one = parameter_shapes(build_activity_net(10, False, 10))
    two = parameter_shapes(build_activity_net(10, True, 10))
    extra = set(two) - set(one)
    assert set(one) <= set(two)
    assert all(n.startswith("motion.") or n.startswith("fusion.") for n in extra)
    assert all(one[n] == two[n] for n in one)


def test_unsupported_depth_lists_options():
    with pytest.raises(ValidationError, match=r"\[6, 10, 18\]"):
        build_activity_net(10, depth=50)


@pytest.mark.parametrize("depth", [6, 10, 18])
def test_depth_counts_weight_layers(depth):
    shapes = parameter_shapes(build_activity_net(5, depth=depth))
    convs = [n for n in shapes if n.endswith(("conv.weight", "conv_a.weight", "conv_b.weight"))]
    assert len(convs) + 1 == depth


def test_forward_ranges():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (6, 2, 3, 16, 16), dtype=np.uint8)
    act = Checkpoint.initialise(build_activity_net(7, True, 6, (16, 16, 3)), 1)
    probs = forward(act, x)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    ev = Checkpoint.initialise(build_event_net(5, input_shape=(16, 16, 3)), 1)
    out = forward(ev, x[:, :1])
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.array_equal(out, forward(ev, x[:, :1]))


def test_forward_shape_mismatch():
    ev = Checkpoint.initialise(build_event_net(5, input_shape=(16, 16, 3)), 1)
    with pytest.raises(ShapeError):
        forward(ev, np.zeros((1, 1, 3, 8, 8), np.uint8))


def test_zero_final_layer_outputs_half():
    ckpt = Checkpoint.initialise(build_event_net(4, input_shape=(16, 16, 3)), 2)
    ckpt.parameters["head.weight"][:] = 0
    ckpt.parameters["head.bias"][:] = 0
    x = np.random.default_rng(0).integers(0, 256, (3, 1, 3, 16, 16), dtype=np.uint8)
    # head(h) = 0 * h + 0 = 0, sigmoid(0) = 1/2
    assert np.array_equal(forward(ckpt, x), np.full((3, 4), 0.5, np.float32))


def tiny_event_spec():
    return ModelSpec("event", (8, 8, 3), (ConvBlock(4, 3),), (), 2)


def tiny_sample(spec, n=3, seed=0):
    rng = np.random.default_rng(seed)
    h, w, c = spec.input_shape
    x = rng.uniform(0, 1, (n, spec.streams, c, h, w))
    if spec.mode == "event":
        y = rng.integers(0, 2, (n, spec.output_size)).astype(np.float64)
    else:
        y = rng.integers(0, spec.output_size, n)
    return x, y


def test_gradient_check_tiny_event_net():
    spec = tiny_event_spec()
    assert gradient_check(spec, tiny_sample(spec)) < 1e-3


def test_gradient_check_cross_entropy_head():
    spec = ModelSpec("activity", (8, 8, 3), (ConvBlock(4, 3, residual=True),), (5,), 3, global_pool=True)
    assert gradient_check(spec, tiny_sample(spec)) < 1e-3


def test_gradient_check_zero_weights_zero_input():
    spec = tiny_event_spec()
    zeros = OrderedDict((n, np.zeros(s)) for n, s in parameter_shapes(spec).items())
    x = np.zeros((2, 1, 3, 8, 8))
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert gradient_check(spec, (x, y), parameters=zeros, per_tensor=100) < 1e-6


def test_checkpoint_round_trip(tmp_path):
    ckpt = Checkpoint.initialise(build_activity_net(4, True, 6, (16, 16, 3)), 9, vocabulary=list("abcd"))
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.spec == ckpt.spec and back.meta == ckpt.meta and back.vocabulary == tuple("abcd")
    for name in ckpt.parameters:
        assert ckpt.parameters[name].tobytes() == back.parameters[name].tobytes()
    assert dumps_checkpoint(back) == path.read_bytes()


def test_checkpoint_payload_is_4n_bytes():
    ckpt = Checkpoint.initialise(tiny_event_spec(), 0)
    data = dumps_checkpoint(ckpt)
    (head_len,) = struct.unpack("<Q", data[8:16])
    n = sum(int(np.prod(s)) for s in parameter_shapes(ckpt.spec).values())
    assert len(data) - 16 - head_len == 4 * n


def test_checkpoint_corruption_errors():
    data = dumps_checkpoint(Checkpoint.initialise(tiny_event_spec(), 0))
    for bad in (data[:-3], data[:20], b"XXXX" + data[4:], data[:4] + struct.pack("<I", 7) + data[8:], b""):
        with pytest.raises(CheckpointError):
            loads_checkpoint(bad)


def separable_set():
    """Four dark and four bright frames, class 0 and class 1."""
    rng = np.random.default_rng(4)
    images, labels = [], []
    for i in range(8):
        lo, hi = (0, 100) if i % 2 == 0 else (155, 256)
        images.append(rng.integers(lo, hi, (16, 16, 3), dtype=np.uint8))
        labels.append(i % 2)
    entries = tuple(LabeledFrame(i, i / 12, f"f/{i}.png", lab, None, img)
                    for i, (img, lab) in enumerate(zip(images, labels)))
    return DatasetManifest(12.0, EventVocabulary(("dark", "bright")), "activity", entries), np.stack(images), np.array(labels)


def test_separable_set_reaches_full_train_accuracy():
    manifest, images, labels = separable_set()
    # a linear model fits it: weights = 1/npix on every pixel, bias -127.5
    score = images.reshape(8, -1).astype(float).mean(axis=1) - 127.5
    assert np.array_equal(score > 0, labels == 1)
    spec = build_activity_net(2, depth=6, input_shape=(16, 16, 3))
    ckpt, curve = train(spec, manifest, TrainConfig(epochs=200, batch_size=8, lr=1e-3, seed=0))
    assert max(curve.train_accuracy) == 1.0
    assert np.array_equal(predict_labels(ckpt, manifest_inputs(manifest, spec)), labels)


def test_training_reduces_loss_and_is_deterministic():
    m = make_manifest([(0,), (), (1,), (0, 1)] * 4, size=(16, 16), names=("a", "b"))
    spec = build_event_net(2, input_shape=(16, 16, 3))
    cfg = TrainConfig(epochs=15, batch_size=4, seed=3)
    a, curve = train(spec, m, cfg)
    b, _ = train(spec, m, cfg)
    assert curve.train_loss[-1] < curve.train_loss[0]
    assert len(curve) == 15
    assert dumps_checkpoint(a) == dumps_checkpoint(b)
    assert a.meta["epochs"] == 15 and a.vocabulary == ("a", "b")


def test_training_errors():
    spec = build_event_net(2, input_shape=(16, 16, 3))
    m = make_manifest([(0,)], size=(16, 16), names=("a", "b"))
    with pytest.raises(TrainingError):
        train(spec, m.subset([]), TrainConfig(epochs=1))
    with pytest.raises(LabelError):
        train(build_event_net(3, input_shape=(16, 16, 3)), m, TrainConfig(epochs=1))
    poisoned = Checkpoint.initialise(spec, 0)
    poisoned.parameters["head.bias"][0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(poisoned, m, TrainConfig(epochs=1))


def test_frozen_mask_leaves_parameters_identical():
    m = make_manifest([(0,), (1,)] * 3, size=(16, 16), names=("a", "b"))
    start = Checkpoint.initialise(build_event_net(2, input_shape=(16, 16, 3)), 0)
    mask = {n: n.startswith("fc") for n in start.parameters}
    out, _ = train(start, m, TrainConfig(epochs=3, batch_size=2), mask=mask)
    for n, keep in mask.items():
        same = out.parameters[n].tobytes() == start.parameters[n].tobytes()
        assert same != keep


LAYER_KINDS = st.sampled_from(["plain", "plain_pool", "residual", "residual_stride"])


@st.composite
def tiny_specs(draw):
    mode = draw(st.sampled_from(["event", "activity"]))
    kinds = draw(st.lists(LAYER_KINDS, min_size=1, max_size=2))
    blocks = []
    for k in kinds:
        f = draw(st.integers(2, 4))
        blocks.append({
            "plain": ConvBlock(f, 3),
            "plain_pool": ConvBlock(f, 3, pool=2),
            "residual": ConvBlock(f, 3, residual=True),
            "residual_stride": ConvBlock(f, 3, 2, residual=True),
        }[k])
    streams = draw(st.sampled_from([1, 2])) if mode == "activity" else 1
    out = draw(st.integers(1 if mode == "event" else 2, 4))
    fc = tuple(draw(st.lists(st.integers(2, 5), max_size=2)))
    return ModelSpec(mode, (8, 8, 2), tuple(blocks), fc, out, streams, draw(st.booleans()))


@settings(max_examples=15, deadline=None)
@given(tiny_specs(), st.integers(0, 1000))
def test_gradient_check_property(spec, seed):
    assert gradient_check(spec, tiny_sample(spec, 2, seed), TrainConfig(seed=seed)) < 1e-3


@settings(max_examples=20, deadline=None)
@given(tiny_specs(), st.integers(0, 2**31))
def test_checkpoint_round_trip_property(spec, seed):
    ckpt = Checkpoint.initialise(spec, seed)
    data = dumps_checkpoint(ckpt)
    assert dumps_checkpoint(loads_checkpoint(data)) == data
