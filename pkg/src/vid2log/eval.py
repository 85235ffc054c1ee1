"""Decoding, frame metrics, dataset splits and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import LabelError, ShapeError, ValidationError
from .ingest import DatasetManifest


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def decode_multi_hot(scores: Sequence[float] | np.ndarray, config: DecodeConfig = DecodeConfig()) -> np.ndarray:
    """Event i is active iff its score is strictly above the threshold.

    Accepts a single score vector or a ``(batch, E)`` matrix.
    """
    return (np.asarray(scores, dtype=np.float64) > config.threshold).astype(np.uint8)


def partial_accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Frame credit ``1 - x/n`` over multi-hot vectors.

    ``n`` counts events in either set (the union) and ``x`` those on which
    prediction and truth disagree (the symmetric difference).  Two empty
    sets score 1.
    """
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ShapeError(f"prediction length {p.shape} differs from truth length {t.shape}")
    n = int(np.count_nonzero(p | t))
    if n == 0:
        return 1.0
    return 1.0 - int(np.count_nonzero(p ^ t)) / n


def partial_accuracies(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Row-wise ``partial_accuracy`` for ``(N, E)`` matrices."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    union = np.count_nonzero(p | t, axis=1)
    wrong = np.count_nonzero(p ^ t, axis=1)
    return np.where(union == 0, 1.0, 1.0 - wrong / np.maximum(union, 1))


def single_label_accuracy(pred: int, truth: int) -> int:
    return int(pred == truth)


def kfold_split(manifest: DatasetManifest, k: int) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Contiguous temporal folds; fold sizes differ by at most one frame."""
    n = len(manifest)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} frames available")
    base, extra = divmod(n, k)
    bounds = [0]
    for i in range(k):
        bounds.append(bounds[-1] + base + (1 if i < extra else 0))
    folds = []
    for i in range(k):
        test = range(bounds[i], bounds[i + 1])
        train = [j for j in range(n) if not bounds[i] <= j < bounds[i + 1]]
        folds.append((manifest.subset(train), manifest.subset(test)))
    return folds


def _clip_groups(manifest: DatasetManifest) -> list[list[int]]:
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        groups.setdefault(e.clip if e.clip is not None else f"#{i}", []).append(i)
    return list(groups.values())


def holdout_split(
    manifest: DatasetManifest, train_fraction: float, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Event mode: contiguous tail holdout.  Activity mode: seeded shuffle of
    whole clips (frames without a clip id count as single-frame clips)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if manifest.mode == "event":
        n = len(manifest)
        n_train = round(n * train_fraction)
        if n_train == 0 or n_train == n:
            raise ValueError(f"split of {n} frames at {train_fraction} leaves one side empty")
        return manifest.subset(range(n_train)), manifest.subset(range(n_train, n))
    groups = _clip_groups(manifest)
    n_train = round(len(groups) * train_fraction)
    if n_train == 0 or n_train == len(groups):
        raise ValueError(f"split of {len(groups)} clips at {train_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(len(groups))
    train_idx = sorted(i for g in order[:n_train] for i in groups[g])
    test_idx = sorted(i for g in order[n_train:] for i in groups[g])
    return manifest.subset(train_idx), manifest.subset(test_idx)


@dataclass
class EvalReport:
    """Per-frame scores for one or more test splits.

    ``std`` is the sample standard deviation over frames; ``split_std`` the
    sample standard deviation of the per-split means (the number tables
    usually quote after the plus-minus sign).
    """

    name: str
    metric: str
    per_frame: list[float]
    splits: list[tuple[int, int]] = field(default_factory=list)
    curves: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.splits:
            self.splits = [(0, len(self.per_frame))]

    @property
    def mean(self) -> float:
        return float(statistics.fmean(self.per_frame)) if self.per_frame else math.nan

    @property
    def std(self) -> float:
        return statistics.stdev(self.per_frame) if len(self.per_frame) > 1 else 0.0

    @property
    def split_means(self) -> list[float]:
        return [statistics.fmean(self.per_frame[a:b]) for a, b in self.splits if b > a]

    @property
    def split_std(self) -> float:
        means = self.split_means
        return statistics.stdev(means) if len(means) > 1 else self.std

    @property
    def table_std(self) -> float:
        return self.split_std if len(self.splits) > 1 else self.std

    def to_record(self, include_frames: bool = True) -> dict:
        rec = {
            "name": self.name,
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "split_std": self.split_std,
            "splits": [
                {"split": i, "start": a, "stop": b, "mean": statistics.fmean(self.per_frame[a:b]) if b > a else None}
                for i, (a, b) in enumerate(self.splits)
            ],
            "curves": dict(self.curves),
        }
        if include_frames:
            rec["per_frame"] = list(self.per_frame)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        if "per_frame" not in rec:
            raise ValidationError(f"report {rec.get('name')!r} has no per-frame values")
        splits = [(s["start"], s["stop"]) for s in rec.get("splits", [])]
        return cls(rec["name"], rec["metric"], list(rec["per_frame"]), splits, dict(rec.get("curves", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{self.name}: {self.metric} {100 * self.mean:.2f}±{100 * self.table_std:.2f} "
                 f"over {len(self.per_frame)} frames"]
        for i, (a, b) in enumerate(self.splits):
            if b > a:
                lines.append(f"  split {i}: {100 * statistics.fmean(self.per_frame[a:b]):.2f} ({b - a} frames)")
        return "\n".join(lines) + "\n"


def merge_reports(name: str, reports: Sequence[EvalReport]) -> EvalReport:
    """Concatenate split reports (e.g. the k folds) into one report."""
    if not reports:
        raise ValueError("no reports to merge")
    metrics = {r.metric for r in reports}
    if len(metrics) != 1:
        raise ValidationError(f"cannot merge reports with different metrics {sorted(metrics)}")
    per_frame: list[float] = []
    splits = []
    for r in reports:
        for a, b in r.splits:
            splits.append((len(per_frame) + a, len(per_frame) + b))
        per_frame.extend(r.per_frame)
    return EvalReport(name, metrics.pop(), per_frame, splits)


# A predictor maps (images, manifest) to a multi-hot (N, E) matrix in event
# mode or a class-index vector in activity mode.
Predictor = Callable[[DatasetManifest], np.ndarray]


def evaluate(
    predictor: Predictor, test: DatasetManifest, name: str = "model", *, vocabulary=None
) -> EvalReport:
    if vocabulary is not None and tuple(vocabulary.names) != test.vocabulary.names:
        raise LabelError(
            f"predictor vocabulary {list(vocabulary.names)} does not match test vocabulary "
            f"{list(test.vocabulary.names)}"
        )
    pred = np.asarray(predictor(test))
    truth = test.label_matrix()
    if test.mode == "event":
        if pred.shape != truth.shape:
            raise ShapeError(f"predictor returned {pred.shape}, expected {truth.shape}")
        scores = partial_accuracies(pred, truth)
        metric = "partial_accuracy"
    else:
        if pred.shape != truth.shape:
            raise ShapeError(f"predictor returned {pred.shape}, expected {truth.shape}")
        scores = (pred == truth).astype(np.float64)
        metric = "accuracy"
    return EvalReport(name, metric, [float(s) for s in scores])


def curve_rows(curve) -> list[tuple]:
    rows = []
    for epoch in range(len(curve.train_accuracy)):
        held = curve.heldout_accuracy[epoch] if curve.heldout_accuracy else None
        rows.append((epoch, curve.train_accuracy[epoch], curve.train_loss[epoch], held))
    return rows


def curve_csv(curve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_accuracy", "train_loss", "heldout_accuracy"])
    for epoch, acc, loss, held in curve_rows(curve):
        writer.writerow([epoch, repr(acc), repr(loss), "" if held is None else repr(held)])
    return buf.getvalue()


def comparison_table(reports: Iterable[EvalReport], extra: dict[str, dict[str, object]] | None = None) -> str:
    """Markdown table of mean±std (percent), one column per report."""
    reports = list(reports)
    extra = extra or {}
    headers = ["", *[r.name for r in reports]]
    rows = [["accuracy", *[f"{100 * r.mean:.2f}±{100 * r.table_std:.2f}" for r in reports]]]
    for key, values in extra.items():
        rows.append([key, *[str(values.get(r.name, "")) for r in reports]])
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"
