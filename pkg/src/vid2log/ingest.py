"""Frame extraction, log/frame pairing and the dataset manifest format.

Images are plain ``numpy.uint8`` arrays shaped ``(height, width, channels)``
with 1 or 3 channels.  Video decoding is out of scope: extract numbered
frames with an external decoder first, e.g.::

    ffmpeg -i gameplay.mp4 frames/%06d.png
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import LabelError, ManifestFormatError, MissingImageError, ShapeError

MANIFEST_FORMAT = "vid2log-manifest"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")

# events are compared against frame timestamps computed as i / fps
_TIME_EPS = 1e-9


def check_image(image: np.ndarray) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.dtype != np.uint8:
        raise ShapeError("images must be uint8 numpy arrays")
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ShapeError(f"expected (height, width, 1|3) image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ShapeError("image width and height must be positive")
    return image


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image(image: np.ndarray, path: str | os.PathLike) -> None:
    check_image(image)
    data = image[:, :, 0] if image.shape[2] == 1 else image
    Image.fromarray(data).save(path, format="PNG", optimize=False, compress_level=6)


@dataclass(frozen=True)
class EventVocabulary:
    """Ordered, unique event (or activity class) names.  Index i is event i."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise LabelError("vocabulary must contain at least one name")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise LabelError(f"duplicate vocabulary names: {dupes}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LabelError(f"unknown event name {name!r}") from None


@dataclass(frozen=True)
class LabeledFrame:
    """One dataset entry.

    ``label`` is a sorted tuple of active event indices in event mode and a
    single class index in activity mode.  ``image`` optionally carries the
    decoded pixels in memory; it is never serialized and ignored by ``==``.
    """

    frame_index: int
    timestamp: float
    image_path: str
    label: tuple[int, ...] | int
    clip: str | None = None
    image: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class DatasetManifest:
    target_fps: float
    vocabulary: EventVocabulary
    mode: str
    entries: tuple[LabeledFrame, ...]
    late_events: int = 0
    root: str = field(default=".", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        validate_manifest(self)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def event_count(self) -> int:
        return len(self.vocabulary)

    def label_matrix(self) -> np.ndarray:
        """Multi-hot ``(N, E)`` matrix (event mode) or class vector (activity)."""
        if self.mode == "activity":
            return np.array([e.label for e in self.entries], dtype=np.int64)
        out = np.zeros((len(self.entries), self.event_count), dtype=np.uint8)
        for row, entry in enumerate(self.entries):
            out[row, list(entry.label)] = 1
        return out

    def empty_fraction(self) -> float:
        if self.mode != "event":
            raise LabelError("empty-frame fraction is only defined in event mode")
        if not self.entries:
            return 0.0
        return sum(1 for e in self.entries if not e.label) / len(self.entries)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return replace(self, entries=tuple(self.entries[i] for i in indices))

    def image(self, i: int) -> np.ndarray:
        entry = self.entries[i]
        if entry.image is not None:
            return entry.image
        return read_image(Path(self.root) / entry.image_path)

    def images(self) -> np.ndarray:
        """All images stacked as ``(N, H, W, C)`` uint8."""
        return np.stack([self.image(i) for i in range(len(self.entries))])


def validate_manifest(manifest: DatasetManifest) -> None:
    if manifest.mode not in ("event", "activity"):
        raise ManifestFormatError(f"unknown mode {manifest.mode!r}")
    if not manifest.target_fps > 0:
        raise ManifestFormatError("target_fps must be positive")
    size = len(manifest.vocabulary)
    previous = None
    for entry in manifest.entries:
        key = (entry.clip or "", entry.frame_index)
        if previous is not None and key <= previous:
            raise ManifestFormatError(
                f"entries must be sorted by frame index (at frame {entry.frame_index})"
            )
        previous = key
        if manifest.mode == "event":
            if not isinstance(entry.label, tuple):
                raise LabelError(f"frame {entry.frame_index}: event mode needs a set of indices")
            if list(entry.label) != sorted(set(entry.label)):
                raise LabelError(f"frame {entry.frame_index}: label indices must be sorted and unique")
            bad = [i for i in entry.label if not 0 <= i < size]
        else:
            if isinstance(entry.label, (tuple, list)) or isinstance(entry.label, bool):
                raise LabelError(f"frame {entry.frame_index}: activity mode needs one class index")
            bad = [] if 0 <= entry.label < size else [entry.label]
        if bad:
            raise LabelError(
                f"frame {entry.frame_index}: label indices {bad} outside vocabulary of size {size}"
            )


def restrict_vocabulary(manifest: DatasetManifest, names: Sequence[str]) -> DatasetManifest:
    """Project an event-mode manifest onto a subset of its event types."""
    if manifest.mode != "event":
        raise LabelError("vocabulary restriction is only defined in event mode")
    vocab = EventVocabulary(tuple(names))
    remap = {manifest.vocabulary.index(n): i for i, n in enumerate(vocab.names)}
    entries = tuple(
        replace(e, label=tuple(sorted(remap[i] for i in e.label if i in remap)))
        for e in manifest.entries
    )
    return replace(manifest, vocabulary=vocab, entries=entries)


def list_frame_files(directory: str | os.PathLike) -> list[Path]:
    """Numbered image files in ``directory`` in natural (numeric) order."""
    files = [p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]

    def key(p: Path):
        digits = "".join(ch for ch in p.stem if ch.isdigit())
        return (int(digits) if digits else -1, p.name)

    return sorted(files, key=key)


def frame_stride(source_fps: float, target_fps: float) -> int:
    if not target_fps > 0:
        raise ValueError("target_fps must be positive")
    if target_fps > source_fps:
        raise ValueError(
            f"target fps {target_fps} exceeds source fps {source_fps}; upsampling is not supported"
        )
    return max(1, round(source_fps / target_fps))


def extract_frames(source_frames: Sequence, source_fps: float, target_fps: float) -> list:
    """Keep every k-th frame, k = round(source_fps / target_fps), from index 0.

    Output frame i has timestamp ``i / target_fps``.
    """
    return list(source_frames[:: frame_stride(source_fps, target_fps)])


def read_event_log(path: str | os.PathLike) -> list[tuple[str, float]]:
    """Read an event log of ``event,timestamp`` rows (CSV with optional header)
    or JSON lines with ``event``/``timestamp`` keys."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("{"):
                rec = json.loads(line)
                events.append((str(rec["event"]), float(rec["timestamp"])))
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise ManifestFormatError(f"{path}:{lineno}: expected 'event,timestamp'")
            try:
                events.append((parts[0], float(parts[1])))
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise ManifestFormatError(f"{path}:{lineno}: bad timestamp {parts[1]!r}") from None
    return events


def pair_labels(
    frames: Sequence[str | np.ndarray],
    log: Iterable[tuple[str, float]],
    vocabulary: EventVocabulary,
    target_fps: float,
    *,
    root: str = ".",
) -> DatasetManifest:
    """Label frames with the events of ``log``.

    ``frames`` are image paths (relative to ``root``) or in-memory arrays,
    already at ``target_fps``.  Each event goes to the earliest frame whose
    timestamp is at or after the event time; events past the last frame are
    put on the last frame and counted in ``late_events``.
    """
    n = len(frames)
    hits: list[set[int]] = [set() for _ in range(n)]
    late = 0
    for pos, (name, t) in enumerate(log):
        try:
            event = vocabulary.index(name)
        except LabelError:
            raise LabelError(f"log entry {pos} ({name!r} at {t}s): unknown event name") from None
        if t < 0:
            raise LabelError(f"log entry {pos} ({name!r}): negative timestamp {t}")
        if n == 0:
            raise LabelError("cannot pair a log with an empty frame sequence")
        idx = math.ceil(t * target_fps - _TIME_EPS * target_fps)
        idx = max(idx, 0)
        if idx >= n:
            idx = n - 1
            late += 1
        hits[idx].add(event)

    entries = []
    for i, frame in enumerate(frames):
        if isinstance(frame, np.ndarray):
            path, image = f"{i:06d}.png", check_image(frame)
        else:
            path, image = str(frame), None
        entries.append(
            LabeledFrame(i, i / target_fps, path, tuple(sorted(hits[i])), image=image)
        )
    return DatasetManifest(target_fps, vocabulary, "event", tuple(entries), late, root=root)


def frame_difference(current: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Signed difference mapped onto 8 bits as ``128 + floor(d / 2)``.

    0 maps to 128, +255 to 255 and -255 to 0.
    """
    check_image(current)
    check_image(previous)
    if current.shape != previous.shape:
        raise ShapeError(f"frame shapes differ: {current.shape} vs {previous.shape}")
    diff = current.astype(np.int16) - previous.astype(np.int16)
    return (128 + (diff >> 1)).astype(np.uint8)


def _entry_record(entry: LabeledFrame, mode: str) -> dict:
    rec = {
        "frame_index": entry.frame_index,
        "timestamp": entry.timestamp,
        "image": entry.image_path,
        "label": list(entry.label) if mode == "event" else entry.label,
    }
    if entry.clip is not None:
        rec["clip"] = entry.clip
    return rec


def dumps_manifest(manifest: DatasetManifest) -> str:
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "target_fps": manifest.target_fps,
        "mode": manifest.mode,
        "vocabulary": list(manifest.vocabulary.names),
        "late_events": manifest.late_events,
    }
    lines = [json.dumps(header, ensure_ascii=False)]
    lines += [json.dumps(_entry_record(e, manifest.mode), ensure_ascii=False) for e in manifest.entries]
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike, *, write_images: bool = True) -> Path:
    """Write the manifest; in-memory images are written beside it as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if write_images:
        for entry in manifest.entries:
            if entry.image is not None:
                target = path.parent / entry.image_path
                target.parent.mkdir(parents=True, exist_ok=True)
                write_image(entry.image, target)
    path.write_text(dumps_manifest(manifest), encoding="utf-8")
    return path


def loads_manifest(text: str, root: str = ".", *, check_images: bool = False) -> DatasetManifest:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ManifestFormatError("empty manifest")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"invalid JSON on manifest line {exc.doc[:40]!r}: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ManifestFormatError("missing manifest header")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestFormatError(f"unsupported manifest version {header.get('version')!r}")
    try:
        mode = header["mode"]
        vocab = EventVocabulary(tuple(header["vocabulary"]))
        entries = []
        for rec in records:
            label = rec["label"]
            label = tuple(int(i) for i in label) if mode == "event" and isinstance(label, list) else label
            entries.append(
                LabeledFrame(
                    int(rec["frame_index"]),
                    float(rec["timestamp"]),
                    str(rec["image"]),
                    label,
                    rec.get("clip"),
                )
            )
        manifest = DatasetManifest(
            float(header["target_fps"]),
            vocab,
            mode,
            tuple(entries),
            int(header.get("late_events", 0)),
            root=root,
        )
    except (KeyError, TypeError) as exc:
        raise ManifestFormatError(f"manifest record missing or mistyped field: {exc}") from None
    if check_images:
        for entry in manifest.entries:
            if not (Path(root) / entry.image_path).is_file():
                raise MissingImageError(f"frame {entry.frame_index}: image {entry.image_path!r} not found")
    return manifest


def load_manifest(path: str | os.PathLike, *, check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ManifestFormatError(f"{path} is not UTF-8 text") from None
    return loads_manifest(text, root=str(path.parent), check_images=check_images)


def concat_manifests(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    """Concatenate manifests sharing one vocabulary; entries get clip tags so
    ordering stays valid."""
    if not manifests:
        raise LabelError("nothing to concatenate")
    first = manifests[0]
    for m in manifests[1:]:
        if m.vocabulary != first.vocabulary or m.mode != first.mode:
            only_a = sorted(set(first.vocabulary.names) - set(m.vocabulary.names))
            only_b = sorted(set(m.vocabulary.names) - set(first.vocabulary.names))
            raise LabelError(
                f"vocabulary mismatch: only in first {only_a}, only in other {only_b}"
                + ("" if only_a or only_b else " (same names, different order or mode)")
            )
    entries = []
    for k, m in enumerate(manifests):
        for e in m.entries:
            path = e.image_path
            if e.image is None:
                path = os.path.normpath(os.path.join(os.path.relpath(m.root, first.root), e.image_path))
            entries.append(replace(e, clip=f"{k:03d}:{e.clip or ''}", image_path=path))
    return replace(first, entries=tuple(entries), late_events=sum(m.late_events for m in manifests))
