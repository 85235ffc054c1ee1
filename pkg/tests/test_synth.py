import numpy as np
import pytest

from vid2log.baselines import ForestConfig, forest_predictor, train_forest
from vid2log.errors import ValidationError
from vid2log.eval import evaluate
from vid2log.ingest import dumps_manifest
from vid2log.logsink import dumps_log
from vid2log.synth import EVENT_TYPES, SynthConfig, config_from_dict, config_to_dict, generate, style_shift


def test_determinism():
    cfg = SynthConfig(frame_count=120, seed=4)
    m1, l1 = generate(cfg)
    m2, l2 = generate(cfg)
    assert dumps_manifest(m1) == dumps_manifest(m2)
    assert dumps_log(l1) == dumps_log(l2)
    assert m1.images().tobytes() == m2.images().tobytes()


def test_labels_equal_log():
    m, log = generate(SynthConfig(frame_count=300, seed=1))
    assert np.array_equal(m.label_matrix(), log.rasterize())


def test_all_rates_zero_gives_scroll_only():
    cfg = SynthConfig(frame_count=40, empty_fraction=None, event_rates=(0.0,) * 5)
    m, _ = generate(cfg)
    assert all(e.label == () for e in m.entries)
    imgs = m.images()
    assert not np.array_equal(imgs[0], imgs[1])
    # the avatar never moves, so the picture is a pure function of the frame index
    again, _ = generate(cfg)
    assert np.array_equal(again.images(), imgs)


def test_empty_fraction_088_over_3500():
    m, _ = generate(SynthConfig(frame_count=3500, events=EVENT_TYPES, seed=2))
    assert 0.86 <= m.empty_fraction() <= 0.90


def test_cooccurrence_cap():
    m, _ = generate(SynthConfig(frame_count=500, max_cooccurring=3, empty_fraction=0.5))
    assert max(len(e.label) for e in m.entries) <= 3


def test_infeasible_config():
    with pytest.raises(ValidationError, match="infeasible"):
        generate(SynthConfig(event_rates=(0.0,) * 5, empty_fraction=0.88))


def test_style_shift_keeps_logs_and_changes_pixels():
    a = SynthConfig(frame_count=200, seed=3)
    b = style_shift(a, "B")
    ma, la = generate(a)
    mb, lb = generate(b)
    assert np.array_equal(la.rasterize(), lb.rasterize())
    assert [e.label for e in ma.entries] == [e.label for e in mb.entries]
    assert (ma.images() != mb.images()).any(axis=(1, 2, 3)).all()
    with pytest.raises(ValidationError):
        style_shift(a, "A")
    with pytest.raises(ValidationError):
        style_shift(a, "Z")


def test_style_gap():
    cfg = SynthConfig(frame_count=900, seed=6, empty_fraction=0.5)
    ma, _ = generate(cfg)
    mb, _ = generate(style_shift(replace_seed(cfg, 7), "B"))
    held_a, _ = generate(replace_seed(cfg, 7))
    forest = train_forest(ma, ForestConfig(tree_count=5, input_size=(16, 16)))
    same = evaluate(forest_predictor(forest), held_a).mean
    shifted = evaluate(forest_predictor(forest), mb).mean
    assert shifted < same


def replace_seed(cfg, seed):
    return config_from_dict({**config_to_dict(cfg), "seed": seed})


def test_activity_mode():
    m, log = generate(SynthConfig(mode="activity", events=("move_left", "move_right", "jump"), clips_per_class=2, clip_length=4))
    assert len(m) == 24 and m.mode == "activity"
    assert len({e.clip for e in m.entries}) == 6
    assert sorted({e.label for e in m.entries}) == [0, 1, 2]
