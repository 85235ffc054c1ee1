import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vid2log.baselines import random_predictor
from vid2log.errors import LabelError, ShapeError
from vid2log.eval import (
    DecodeConfig,
    EvalReport,
    comparison_table,
    curve_csv,
    decode_multi_hot,
    evaluate,
    holdout_split,
    kfold_split,
    merge_reports,
    partial_accuracies,
    partial_accuracy,
)
from vid2log.ingest import EventVocabulary
from vid2log.netcore import TrainingCurve

from .conftest import make_manifest


def set_oracle(pred: set, truth: set) -> float:
    union = pred | truth
    if not union:
        return 1.0
    return 1.0 - len(pred ^ truth) / len(union)


def hot(indices, n=8):
    v = np.zeros(n, dtype=np.uint8)
    v[list(indices)] = 1
    return v


def test_decode_examples():
    assert decode_multi_hot([0.9, 0.1, 0.5, 0.51]).tolist() == [1, 0, 0, 1]
    assert decode_multi_hot([0.2, 0.7], DecodeConfig(0.25)).tolist() == [0, 1]
    assert decode_multi_hot(np.array([[0.6, 0.4], [0.4, 0.6]])).tolist() == [[1, 0], [0, 1]]


def test_decode_config_rejects_bad_threshold():
    for t in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            DecodeConfig(t)


def test_decode_matches_exhaustive_search():
    # oracle: of all 2^8 vectors, the one agreeing with every thresholded score
    rng = np.random.default_rng(3)
    grid = np.array([0.0, 0.25, 0.5, 0.5 + 1e-9, 0.75, 1.0])
    candidates = np.array(list(itertools.product([0, 1], repeat=8)))
    for _ in range(200):
        s = rng.choice(grid, 8)
        agree = ((candidates == 1) & (s > 0.5)) | ((candidates == 0) & (s <= 0.5))
        best = candidates[np.argmax(agree.sum(axis=1))]
        assert np.array_equal(decode_multi_hot(s), best)


def test_partial_accuracy_examples():
    assert partial_accuracy(hot([]), hot([])) == 1.0
    assert partial_accuracy(hot([0, 1]), hot([0, 1])) == 1.0
    assert partial_accuracy(hot([0]), hot([1])) == 0.0
    # {a,b} vs {a,c}: union 3, disagreements 2
    assert partial_accuracy(hot([0, 1]), hot([0, 2])) == pytest.approx(1 / 3)
    assert partial_accuracy(hot([]), hot([4])) == 0.0


def test_partial_accuracy_shape_mismatch():
    with pytest.raises(ShapeError):
        partial_accuracy([0, 1], [0, 1, 0])


subsets = st.sets(st.integers(0, 7))


@given(subsets, subsets)
def test_partial_accuracy_matches_set_oracle(p, t):
    got = partial_accuracy(hot(p), hot(t))
    assert got == pytest.approx(set_oracle(p, t))
    assert 0.0 <= got <= 1.0
    assert got == partial_accuracy(hot(t), hot(p))
    assert (got == 1.0) == (p == t)


@given(st.lists(st.tuples(subsets, subsets), min_size=1, max_size=20))
def test_rowwise_matches_scalar(pairs):
    p = np.stack([hot(a) for a, _ in pairs])
    t = np.stack([hot(b) for _, b in pairs])
    assert partial_accuracies(p, t).tolist() == pytest.approx([set_oracle(a, b) for a, b in pairs])


@given(st.integers(2, 60).flatmap(lambda n: st.tuples(st.just(n), st.integers(2, n))))
def test_kfold_partition(nk):
    n, k = nk
    m = make_manifest([()] * n, size=(2, 2), names=("a",))
    folds = kfold_split(m, k)
    tests = [[e.frame_index for e in te.entries] for _, te in folds]
    assert sorted(i for t in tests for i in t) == list(range(n))
    sizes = [len(t) for t in tests]
    assert max(sizes) - min(sizes) <= 1
    for (tr, te), t in zip(folds, tests):
        assert all(t[j + 1] == t[j] + 1 for j in range(len(t) - 1))
        assert set(e.frame_index for e in tr.entries).isdisjoint(t)
        assert len(tr) + len(te) == n


def test_kfold_rejects_k_above_n():
    m = make_manifest([()] * 3, size=(2, 2), names=("a",))
    with pytest.raises(ValueError):
        kfold_split(m, 4)


def test_holdout_83_17():
    m = make_manifest([()] * 100, size=(2, 2), names=("a",))
    tr, te = holdout_split(m, 0.83)
    assert len(tr) == 83 and len(te) == 17
    assert te.entries[0].frame_index == 83


def test_holdout_activity_keeps_clips_whole():
    clips = [f"c{i // 4}" for i in range(40)]
    m = make_manifest([i // 20 for i in range(40)], size=(2, 2), mode="activity", names=("x", "y"), clips=clips)
    tr, te = holdout_split(m, 0.8, seed=1)
    a = {e.clip for e in tr.entries}
    b = {e.clip for e in te.entries}
    assert a.isdisjoint(b) and len(a) == 8 and len(b) == 2
    assert holdout_split(m, 0.8, seed=1) == (tr, te)


def test_evaluate_perfect_and_consistent():
    labels = [(), (0,), (1, 2), ()]
    m = make_manifest(labels, size=(2, 2), names=("a", "b", "c"))
    truth = m.label_matrix()
    r = evaluate(lambda t: t.label_matrix(), m)
    assert r.mean == 1.0 and r.metric == "partial_accuracy"
    flipped = truth.copy()
    flipped[1] = [0, 1, 0]
    r2 = evaluate(lambda t: flipped, m)
    assert r2.per_frame == [1.0, 0.0, 1.0, 1.0]
    assert r2.mean == pytest.approx(0.75)


def test_evaluate_vocabulary_mismatch():
    m = make_manifest([(0,)], size=(2, 2), names=("a", "b"))
    with pytest.raises(LabelError, match="does not match"):
        evaluate(lambda t: t.label_matrix(), m, vocabulary=EventVocabulary(("a", "c")))


def test_random_guesser_over_ten_classes():
    labels = [i % 10 for i in range(2000)]
    m = make_manifest(labels, size=(2, 2), mode="activity", names=tuple(f"c{i}" for i in range(10)))
    r = evaluate(random_predictor(seed=5), m)
    # binomial sd at p=0.1, n=2000 is about 0.0067
    assert abs(r.mean - 0.10) < 0.02


def test_report_statistics_and_round_trip():
    parts = [EvalReport("m", "partial_accuracy", [1.0, 0.0], [(0, 2)]),
             EvalReport("m", "partial_accuracy", [1.0, 1.0, 1.0], [(0, 3)])]
    r = merge_reports("m", parts)
    assert r.splits == [(0, 2), (2, 5)]
    assert r.mean == pytest.approx(0.8)
    assert r.split_means == [0.5, 1.0]
    assert r.split_std == pytest.approx(np.std([0.5, 1.0], ddof=1))
    back = EvalReport.from_record(json.loads(r.to_json()))
    assert back == r


def test_curve_csv_and_table():
    curve = TrainingCurve([0.5, 0.9], [1.2, 0.3], [0.4, 0.8])
    lines = curve_csv(curve).splitlines()
    assert lines[0] == "epoch,train_accuracy,train_loss,heldout_accuracy"
    assert lines[2] == "1,0.9,0.3,0.8"
    table = comparison_table([EvalReport("a", "accuracy", [1.0, 0.0], [(0, 1), (1, 2)])])
    assert "| a |" in table and "50.00" in table
