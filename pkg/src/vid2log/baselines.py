"""Non-neural comparison predictors: random forest, random guesser, no-event."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestFormatError, ShapeError, TrainingError, ValidationError
from .ingest import DatasetManifest
from .netcore import _resize

FOREST_FORMAT = "vid2log-forest"
FOREST_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 10
    max_depth: int = 100
    max_features: str | int = "sqrt"  # "sqrt", "all" or an explicit count
    bootstrap: bool = True
    input_size: tuple[int, int] = (64, 64)  # frames are downsampled to this first
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError("tree_count must be at least 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")

    def features_per_split(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        return max(1, min(int(self.max_features), n_features))


@dataclass
class Tree:
    """Flat node arrays.  Leaves have ``feature == -1``; ``positives[i]`` out
    of ``counts[i]`` training frames at node i had each event active."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    positives: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        """Edges on the longest root-to-leaf path."""
        deepest, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            deepest = max(deepest, d)
            if self.feature[node] >= 0:
                stack.append((self.left[node], d + 1))
                stack.append((self.right[node], d + 1))
        return deepest

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def votes(self, X: np.ndarray) -> np.ndarray:
        """Per-event active vote: strictly more than half the leaf's frames."""
        leaf = self.leaf_index(X)
        return (2 * self.positives[leaf] > self.counts[leaf][:, None]).astype(np.uint8)


@dataclass
class Forest:
    trees: list[Tree]
    input_shape: tuple[int, int, int]
    event_count: int
    config: ForestConfig
    frame_shape: tuple[int, int, int] | None = None  # raw frame size seen in training

    @property
    def feature_count(self) -> int:
        return math.prod(self.input_shape)


def _impurity(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    # mean over events of binary Gini 2p(1-p)
    p = pos / np.maximum(n, 1)[..., None]
    return (2.0 * p * (1.0 - p)).mean(axis=-1)


def _best_split(X: np.ndarray, Y: np.ndarray, feats: np.ndarray):
    m = len(X)
    Xn = X[:, feats].astype(np.float32)
    order = np.argsort(Xn, axis=0, kind="stable")
    Xs = np.take_along_axis(Xn, order, axis=0)
    Ys = Y[order]  # (m, f, E)
    cum = np.cumsum(Ys, axis=0, dtype=np.int32)
    total = cum[-1]
    left_pos = cum[:-1]
    n_left = np.arange(1, m, dtype=np.float64)[:, None]
    n_right = m - n_left
    score = (n_left * _impurity(left_pos, n_left) + n_right * _impurity(total - left_pos, n_right)) / m
    valid = Xs[:-1] < Xs[1:]
    if not valid.any():
        return None
    score = np.where(valid, score, np.inf)
    i, j = np.unravel_index(np.argmin(score), score.shape)
    threshold = (float(Xs[i, j]) + float(Xs[i + 1, j])) / 2.0
    return int(feats[j]), threshold


def _grow_tree(X: np.ndarray, Y: np.ndarray, config: ForestConfig, rng: np.random.Generator) -> Tree:
    n_features = X.shape[1]
    k = config.features_per_split(n_features)
    feature, threshold, left, right, counts, positives = [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(len(idx))
        positives.append(Y[idx].sum(axis=0))
        return len(feature) - 1

    root_idx = np.arange(len(X))
    stack = [(new_node(root_idx), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        pos = positives[node]
        pure = np.all((pos == 0) | (pos == len(idx)))
        if pure or depth >= config.max_depth or len(idx) < 2:
            continue
        Xn, Yn = X[idx], Y[idx]
        perm = rng.permutation(n_features)
        split = None
        # if every sampled feature is constant here, move on to the next draw
        for start in range(0, n_features, k):
            split = _best_split(Xn, Yn, perm[start : start + k])
            if split is not None:
                break
        if split is None:
            continue
        f, t = split
        go_left = Xn[:, f] <= t
        feature[node], threshold[node] = f, t
        li, ri = idx[go_left], idx[~go_left]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.int64),
        np.array(positives, dtype=np.int64).reshape(len(feature), Y.shape[1]),
    )


def forest_features(images: np.ndarray, input_size: tuple[int, int]) -> np.ndarray:
    return _resize(images, *input_size).reshape(len(images), -1)


def train_forest(manifest: DatasetManifest, config: ForestConfig = ForestConfig(), images: np.ndarray | None = None) -> Forest:
    """Multi-label forest over flattened downsampled pixels.

    Each tree sees a bootstrap sample (when enabled) and its own seeded
    substream; splits minimise the per-event Gini impurity averaged over
    events, searching ``features_per_split`` random pixels per node.
    """
    if manifest.mode != "event":
        raise ValidationError("the forest baseline needs an event-mode manifest")
    if len(manifest) == 0:
        raise TrainingError("cannot train a forest on an empty manifest")
    images = manifest.images() if images is None else images
    X = forest_features(images, config.input_size)
    Y = manifest.label_matrix().astype(np.int32)
    trees = []
    for seq in np.random.SeedSequence(config.seed).spawn(config.tree_count):
        rng = np.random.default_rng(seq)
        rows = rng.integers(0, len(X), len(X)) if config.bootstrap else np.arange(len(X))
        trees.append(_grow_tree(X[rows], Y[rows], config, rng))
    shape = (*config.input_size, images.shape[3])
    return Forest(trees, shape, manifest.event_count, config, tuple(images.shape[1:]))


def predict_forest_batch(forest: Forest, images: np.ndarray) -> np.ndarray:
    if images.ndim != 4 or images.shape[3] != forest.input_shape[2]:
        raise ShapeError(f"expected (N, H, W, {forest.input_shape[2]}) frames, got {images.shape}")
    if forest.frame_shape is not None and tuple(images.shape[1:]) != forest.frame_shape:
        raise ShapeError(f"frames are {images.shape[1:]} but the forest was trained on {forest.frame_shape}")
    X = forest_features(images, forest.input_shape[:2])
    if X.shape[1] != forest.feature_count:
        raise ShapeError("image resolution does not match the forest's features")
    votes = sum(tree.votes(X).astype(np.int64) for tree in forest.trees)
    # a tie (exactly half the trees) resolves to inactive
    return (2 * votes > len(forest.trees)).astype(np.uint8)


def predict_forest(forest: Forest, image: np.ndarray) -> np.ndarray:
    """EventVector for one ``(H, W, C)`` frame by per-event majority vote."""
    if image.ndim != 3 or image.shape[2] != forest.input_shape[2]:
        raise ShapeError(f"image shape {image.shape} does not match forest input {forest.input_shape}")
    return predict_forest_batch(forest, image[None])[0]


def forest_predictor(forest: Forest):
    return lambda manifest: predict_forest_batch(forest, manifest.images())


def random_baseline(event_count: int, max_cooccurring: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform count c in {0..max_cooccurring}, then a uniform c-subset."""
    if not 0 <= max_cooccurring <= event_count:
        raise ValueError("max_cooccurring must lie in [0, event_count]")
    out = np.zeros(event_count, dtype=np.uint8)
    c = int(rng.integers(0, max_cooccurring + 1))
    if c:
        out[rng.choice(event_count, size=c, replace=False)] = 1
    return out


def no_event_baseline(event_count: int) -> np.ndarray:
    return np.zeros(event_count, dtype=np.uint8)


def max_cooccurring(manifest: DatasetManifest) -> int:
    return max((len(e.label) for e in manifest.entries), default=0)


def random_predictor(max_co: int | None = None, seed: int = 0):
    """Random guesser; in activity mode a uniform class, in event mode
    ``random_baseline`` with the cap taken from the test data unless given."""

    def predict(manifest: DatasetManifest) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if manifest.mode == "activity":
            return rng.integers(0, manifest.event_count, len(manifest))
        cap = max_cooccurring(manifest) if max_co is None else max_co
        return np.array(
            [random_baseline(manifest.event_count, cap, rng) for _ in range(len(manifest))], dtype=np.uint8
        ).reshape(len(manifest), manifest.event_count)

    return predict


def no_event_predictor(manifest: DatasetManifest) -> np.ndarray:
    if manifest.mode != "event":
        raise ValidationError("the no-event baseline only applies to event-mode data")
    return np.zeros((len(manifest), manifest.event_count), dtype=np.uint8)


def dumps_forest(forest: Forest) -> str:
    c = forest.config
    lines = [
        f"{FOREST_FORMAT} {FOREST_VERSION}",
        f"trees {len(forest.trees)} events {forest.event_count} input {' '.join(map(str, forest.input_shape))} "
        f"max_depth {c.max_depth} max_features {c.max_features} bootstrap {int(c.bootstrap)} seed {c.seed} "
        f"frame {' '.join(map(str, forest.frame_shape or (0, 0, 0)))}",
    ]
    for k, tree in enumerate(forest.trees):
        lines.append(f"tree {k} nodes {tree.node_count}")
        for i in range(tree.node_count):
            votes = ",".join(str(int(v)) for v in tree.positives[i])
            lines.append(
                f"{i} {int(tree.feature[i])} {float(tree.threshold[i])!r} {tree.left[i]} {tree.right[i]} {tree.counts[i]} {votes}"
            )
    return "\n".join(lines) + "\n"


def save_forest(forest: Forest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(dumps_forest(forest), encoding="utf-8")
    return path


def loads_forest(text: str) -> Forest:
    lines = text.splitlines()
    try:
        magic, version = lines[0].split()
        if magic != FOREST_FORMAT or int(version) != FOREST_VERSION:
            raise ManifestFormatError("not a version-1 forest file")
        h = lines[1].split()
        fields = dict(zip(h[0::2], h[1::2]))
        n_trees, events = int(fields["trees"]), int(fields["events"])
        shape = tuple(int(v) for v in h[h.index("input") + 1 : h.index("input") + 4])
        mf = h[h.index("max_features") + 1]
        config = ForestConfig(
            tree_count=n_trees,
            max_depth=int(h[h.index("max_depth") + 1]),
            max_features=int(mf) if mf.isdigit() else mf,
            bootstrap=bool(int(h[h.index("bootstrap") + 1])),
            input_size=shape[:2],
            seed=int(h[h.index("seed") + 1]),
        )
        frame = tuple(int(v) for v in h[h.index("frame") + 1 : h.index("frame") + 4])
        trees, pos = [], 2
        for _ in range(n_trees):
            count = int(lines[pos].split()[3])
            rows = [ln.split() for ln in lines[pos + 1 : pos + 1 + count]]
            pos += 1 + count
            trees.append(Tree(
                np.array([int(r[1]) for r in rows], dtype=np.int64),
                np.array([float(r[2]) for r in rows], dtype=np.float64),
                np.array([int(r[3]) for r in rows], dtype=np.int64),
                np.array([int(r[4]) for r in rows], dtype=np.int64),
                np.array([int(r[5]) for r in rows], dtype=np.int64),
                np.array([[int(v) for v in r[6].split(",")] for r in rows], dtype=np.int64).reshape(count, events),
            ))
    except (IndexError, ValueError, KeyError) as exc:
        raise ManifestFormatError(f"malformed forest file: {exc}") from None
    return Forest(trees, shape, events, config, frame if all(frame) else None)


def load_forest(path: str | os.PathLike) -> Forest:
    return loads_forest(Path(path).read_text(encoding="utf-8"))
