import numpy as np
import pytest
import torch

from vid2log.ingest import DatasetManifest, EventVocabulary, LabeledFrame

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_manifest(labels, size=(8, 8), channels=3, names=None, mode="event", seed=0, fps=12.0, clips=None):
    """Small in-memory manifest with random images."""
    rng = np.random.default_rng(seed)
    if names is None:
        width = 1 + max((max(l) for l in labels if isinstance(l, tuple) and l), default=0)
        if mode == "activity":
            width = 1 + max(labels)
        names = tuple(f"e{i}" for i in range(max(width, 2 if mode == "activity" else 1)))
    entries = []
    for i, lab in enumerate(labels):
        img = rng.integers(0, 256, (*size, channels), dtype=np.uint8)
        clip = None if clips is None else clips[i]
        entries.append(LabeledFrame(i, i / fps, f"frames/{i:06d}.png", lab, clip, img))
    return DatasetManifest(fps, EventVocabulary(tuple(names)), mode, tuple(entries))
