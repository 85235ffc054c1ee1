"""Game logs built from per-frame event predictions."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ManifestFormatError, ValidationError
from .ingest import EventVocabulary

LOG_FORMAT = "vid2log-gamelog"
LOG_VERSION = 1


@dataclass(frozen=True)
class GameLog:
    vocabulary: EventVocabulary
    fps: float
    frame_count: int
    # (frame_index, timestamp, active event indices) for frames with events
    frame_events: tuple[tuple[int, float, tuple[int, ...]], ...]
    # event index -> sorted, non-overlapping [start_frame, stop_frame) runs
    runs: dict[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    source: str = ""

    def intervals(self, event: int) -> list[tuple[float, float]]:
        """Merged (start_time, end_time) spans of ``event`` in seconds."""
        return [(a / self.fps, b / self.fps) for a, b in self.runs.get(event, ())]

    def rasterize(self) -> np.ndarray:
        """Rebuild the ``(frame_count, E)`` multi-hot matrix from the intervals."""
        out = np.zeros((self.frame_count, len(self.vocabulary)), dtype=np.uint8)
        for event, spans in self.runs.items():
            for a, b in spans:
                out[a:b, event] = 1
        return out

    def frame_matrix(self) -> np.ndarray:
        """Rebuild the multi-hot matrix from the per-frame records."""
        out = np.zeros((self.frame_count, len(self.vocabulary)), dtype=np.uint8)
        for idx, _, events in self.frame_events:
            out[idx, list(events)] = 1
        return out


def _runs(column: np.ndarray) -> tuple[tuple[int, int], ...]:
    padded = np.concatenate([[0], column.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return tuple((int(a), int(b)) for a, b in zip(edges[::2], edges[1::2]))


def emit_log(
    predictions: Sequence[Sequence[int]] | np.ndarray,
    fps: float,
    vocabulary: EventVocabulary,
    source: str = "",
) -> GameLog:
    """Per-frame records plus maximal same-event runs merged into intervals
    ``[first / fps, (last + 1) / fps)``."""
    pred = np.asarray(predictions, dtype=np.uint8)
    if pred.size == 0:
        pred = pred.reshape(0, len(vocabulary))
    if pred.ndim != 2 or pred.shape[1] != len(vocabulary):
        raise ValidationError(
            f"predictions must be (frames, {len(vocabulary)}), got shape {pred.shape}"
        )
    frame_events = tuple(
        (int(i), i / fps, tuple(int(e) for e in np.flatnonzero(row)))
        for i, row in enumerate(pred)
        if row.any()
    )
    runs = {}
    for event in range(pred.shape[1]):
        spans = _runs(pred[:, event])
        if spans:
            runs[event] = spans
    return GameLog(vocabulary, fps, pred.shape[0], frame_events, runs, source)


@dataclass(frozen=True)
class EventAgreement:
    agreement: float
    spurious: int  # active in b only
    missed: int  # active in a only
    frames: int


def log_diff(a: GameLog, b: GameLog) -> dict[str, EventAgreement]:
    """Frame-level agreement of ``b`` against reference ``a`` per event type."""
    if a.vocabulary != b.vocabulary:
        raise ValidationError("logs have different vocabularies")
    if a.fps != b.fps:
        raise ValidationError(f"logs have different frame rates ({a.fps} vs {b.fps})")
    frames = max(a.frame_count, b.frame_count)
    ra = np.zeros((frames, len(a.vocabulary)), dtype=bool)
    rb = np.zeros_like(ra)
    ra[: a.frame_count] = a.rasterize()
    rb[: b.frame_count] = b.rasterize()
    out = {}
    for e, name in enumerate(a.vocabulary.names):
        missed = int(np.count_nonzero(ra[:, e] & ~rb[:, e]))
        spurious = int(np.count_nonzero(rb[:, e] & ~ra[:, e]))
        agreement = 1.0 - (missed + spurious) / frames if frames else 1.0
        out[name] = EventAgreement(agreement, spurious, missed, frames)
    return out


def manifest_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dumps_log(log: GameLog) -> str:
    header = {
        "format": LOG_FORMAT,
        "version": LOG_VERSION,
        "vocabulary": list(log.vocabulary.names),
        "fps": log.fps,
        "frames": log.frame_count,
        "source": log.source,
    }
    lines = [json.dumps(header)]
    for idx, t, events in log.frame_events:
        lines.append(json.dumps({
            "type": "frame",
            "frame": idx,
            "time": t,
            "events": [log.vocabulary.names[e] for e in events],
        }))
    for event in sorted(log.runs):
        for a, b in log.runs[event]:
            lines.append(json.dumps({
                "type": "interval",
                "event": log.vocabulary.names[event],
                "start_frame": a,
                "stop_frame": b,
                "start": a / log.fps,
                "end": b / log.fps,
            }))
    return "\n".join(lines) + "\n"


def save_log(log: GameLog, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_log(log), encoding="utf-8")
    return path


def loads_log(text: str) -> GameLog:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    try:
        header = json.loads(lines[0])
        if header.get("format") != LOG_FORMAT or header.get("version") != LOG_VERSION:
            raise ManifestFormatError("not a version-1 game log")
        vocab = EventVocabulary(tuple(header["vocabulary"]))
        frames, runs = [], {}
        for line in lines[1:]:
            rec = json.loads(line)
            if rec["type"] == "frame":
                frames.append((rec["frame"], rec["time"], tuple(vocab.index(n) for n in rec["events"])))
            elif rec["type"] == "interval":
                runs.setdefault(vocab.index(rec["event"]), []).append((rec["start_frame"], rec["stop_frame"]))
            else:
                raise ManifestFormatError(f"unknown log record type {rec['type']!r}")
    except (IndexError, KeyError, json.JSONDecodeError) as exc:
        raise ManifestFormatError(f"malformed game log: {exc}") from None
    return GameLog(
        vocab,
        float(header["fps"]),
        int(header["frames"]),
        tuple(frames),
        {e: tuple(spans) for e, spans in runs.items()},
        header.get("source", ""),
    )


def load_log(path: str | os.PathLike) -> GameLog:
    return loads_log(Path(path).read_text(encoding="utf-8"))
