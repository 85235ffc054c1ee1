"""Deterministic sprite-world gameplay with exact ground-truth event labels.

Every frame is a pure function of the config, its index and the event
schedule: a scrolling ground with fixed scenery, an avatar, and one visual
cue per active event.  Two styles share the event schedule but use disjoint
palettes and different sprite geometry, which gives a controlled domain
shift for transfer experiments.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ValidationError
from .ingest import DatasetManifest, EventVocabulary, LabeledFrame
from .logsink import GameLog, emit_log

EVENT_TYPES = (
    "move_right",
    "move_left",
    "jump",
    "shoot",
    "collect",
    "enemy_death",
    "hurt",
    "powerup",
)

STYLES = {
    "A": {
        "sky": (92, 148, 252),
        "ground": (200, 76, 12),
        "brick": (124, 40, 0),
        "body": (216, 40, 0),
        "face": (252, 188, 176),
        "hurt": (252, 252, 252),
        "trail": (255, 255, 0),
        "shot": (248, 120, 88),
        "spark": (252, 216, 168),
        "enemy": (136, 20, 176),
        "aura": (0, 232, 216),
    },
    "B": {
        "sky": (16, 16, 48),
        "ground": (60, 188, 80),
        "brick": (24, 100, 36),
        "body": (0, 112, 236),
        "face": (180, 236, 248),
        "hurt": (232, 0, 88),
        "trail": (160, 160, 168),
        "shot": (120, 255, 200),
        "spark": (255, 96, 224),
        "enemy": (228, 148, 40),
        "aura": (248, 248, 120),
    },
}

GROUND_ROWS = 10


@dataclass(frozen=True)
class SynthConfig:
    style: str = "A"
    resolution: tuple[int, int] = (64, 64)  # height, width
    fps: float = 12.0
    frame_count: int = 600
    events: tuple[str, ...] = EVENT_TYPES[:5]
    # relative weights when empty_fraction is set, else per-frame probabilities
    event_rates: tuple[float, ...] | None = None
    max_cooccurring: int = 2
    empty_fraction: float | None = 0.88
    seed: int = 0
    mode: str = "event"  # "event" or "activity"
    clip_length: int = 12  # activity mode: frames per clip
    clips_per_class: int = 5

    @property
    def rates(self) -> tuple[float, ...]:
        return self.event_rates if self.event_rates is not None else (1.0,) * len(self.events)

    def validate(self) -> None:
        if self.style not in STYLES:
            raise ValidationError(f"unknown style {self.style!r}; known styles {sorted(STYLES)}")
        unknown = [e for e in self.events if e not in EVENT_TYPES]
        if unknown or not self.events or len(set(self.events)) != len(self.events):
            raise ValidationError(f"events must be distinct names from {EVENT_TYPES}; bad: {unknown}")
        h, w = self.resolution
        if h < 32 or w < 32:
            raise ValidationError("resolution must be at least 32x32")
        if not self.fps > 0 or self.frame_count < 1:
            raise ValidationError("fps and frame_count must be positive")
        if self.mode not in ("event", "activity"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        rates = self.rates
        if len(rates) != len(self.events) or any(r < 0 for r in rates):
            raise ValidationError("event_rates needs one non-negative rate per event")
        if not 0 <= self.max_cooccurring <= len(self.events):
            raise ValidationError("max_cooccurring must lie in [0, number of events]")
        if self.mode == "activity":
            if len(self.events) < 2 or self.clip_length < 1 or self.clips_per_class < 1:
                raise ValidationError("activity mode needs >= 2 classes and positive clip sizes")
            return
        if self.empty_fraction is None:
            if any(r > 1 for r in rates):
                raise ValidationError("without empty_fraction, event rates are probabilities and must be <= 1")
        else:
            if not 0 <= self.empty_fraction < 1:
                raise ValidationError("empty_fraction must lie in [0, 1)")
            if sum(rates) == 0 or self.max_cooccurring == 0:
                raise ValidationError(
                    f"infeasible: empty_fraction {self.empty_fraction} needs events, "
                    "but every rate (or the co-occurrence cap) is zero"
                )


def style_shift(config: SynthConfig, new_style: str) -> SynthConfig:
    """Same event schedule and seeds, different palette and sprite geometry."""
    if new_style not in STYLES:
        raise ValidationError(f"unknown style {new_style!r}; known styles {sorted(STYLES)}")
    if new_style == config.style:
        raise ValidationError(f"config is already in style {new_style!r}")
    return replace(config, style=new_style)


def event_schedule(config: SynthConfig) -> list[tuple[int, ...]]:
    """Active event indices per frame (event mode)."""
    rng = np.random.default_rng([config.seed, 0])
    n, e = config.frame_count, len(config.events)
    rates = np.asarray(config.rates, dtype=np.float64)
    labels: list[tuple[int, ...]] = [() for _ in range(n)]
    if config.empty_fraction is None:
        for i in range(n):
            active = np.flatnonzero(rng.random(e) < rates)
            if len(active) > config.max_cooccurring:
                active = rng.choice(active, config.max_cooccurring, replace=False)
            labels[i] = tuple(sorted(int(a) for a in active))
        return labels
    busy = round((1.0 - config.empty_fraction) * n)
    frames = np.sort(rng.choice(n, size=busy, replace=False))
    p = rates / rates.sum()
    cap = min(config.max_cooccurring, int(np.count_nonzero(rates)))
    for i in frames:
        c = int(rng.integers(1, cap + 1))
        labels[i] = tuple(sorted(int(a) for a in rng.choice(e, size=c, replace=False, p=p)))
    return labels


def _rect(img, y0, x0, h, w, color):
    H, W = img.shape[:2]
    ya, yb, xa, xb = max(y0, 0), min(y0 + h, H), max(x0, 0), min(x0 + w, W)
    if ya < yb and xa < xb:
        img[ya:yb, xa:xb] = color


def _plus(img, cy, cx, r, color):
    _rect(img, cy - r, cx, 2 * r + 1, 1, color)
    _rect(img, cy, cx - r, 1, 2 * r + 1, color)


def _cross(img, cy, cx, r, color):
    for d in range(-r, r + 1):
        _rect(img, cy + d, cx + d, 1, 1, color)
        _rect(img, cy + d, cx - d, 1, 1, color)


def _diamond(img, cy, cx, r, color):
    for d in range(-r, r + 1):
        half = r - abs(d)
        _rect(img, cy + d, cx - half, 1, 2 * half + 1, color)


def _draw_avatar(img, style, y, x, facing, color):
    pal = STYLES[style]
    if style == "A":
        _rect(img, y, x, 12, 8, color)
        _rect(img, y + 1, x + 1, 4, 6, pal["face"])
        _rect(img, y + 2, x + (5 if facing > 0 else 2), 1, 1, (0, 0, 0))
    else:
        _diamond(img, y + 6, x + 4, 6, color)
        _rect(img, y + 3, x + 2, 3, 5, pal["face"])
        _rect(img, y + 4, x + (5 if facing > 0 else 2), 1, 1, (0, 0, 0))


def _draw_enemy(img, style, y, x, dead):
    color = STYLES[style]["enemy"]
    if style == "A":
        if dead:
            _rect(img, y + 8, x - 1, 3, 10, color)  # flattened
            _rect(img, y + 4, x - 3, 2, 2, color)
            _rect(img, y + 4, x + 9, 2, 2, color)
        else:
            _rect(img, y + 2, x, 9, 8, color)
            _rect(img, y, x + 2, 2, 4, color)
    else:
        if dead:
            _cross(img, y + 6, x + 4, 5, color)
        else:
            _diamond(img, y + 6, x + 4, 4, color)
            _rect(img, y + 10, x + 1, 2, 7, color)


def avatar_positions(config: SynthConfig, labels: list[tuple[int, ...]]) -> list[int]:
    """Avatar x per frame: move events shift it two pixels, reflecting at the
    screen margins."""
    W = config.resolution[1]
    lo, hi = 12, W - 22
    right = config.events.index("move_right") if "move_right" in config.events else -1
    left = config.events.index("move_left") if "move_left" in config.events else -1
    span = hi - lo
    pos, out = 0, []
    for lab in labels:
        pos += 2 * ((right in lab) - (left in lab))
        folded = pos % (2 * span)
        out.append(lo + (folded if folded <= span else 2 * span - folded))
    return out


def render_frame(config: SynthConfig, index: int, label: tuple[int, ...], ax: int | None = None) -> np.ndarray:
    """Rasterise one frame; asserts every labelled event has a drawn cue.

    Scenery (ground pattern, idle enemies, items) is fixed in world space and
    scrolls one pixel per frame; ``ax`` is the avatar's screen x.
    """
    pal = STYLES[config.style]
    style = config.style
    H, W = config.resolution
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = pal["sky"]
    ground = H - GROUND_ROWS
    img[ground:] = pal["ground"]
    period = 16 if style == "A" else 12
    offset = index % period
    for x in range(-offset, W, period):
        if style == "A":
            _rect(img, ground + 3, x, 1, period - 2, pal["brick"])
            _rect(img, ground + 7, x + period // 2, 1, period - 2, pal["brick"])
        else:
            _rect(img, ground + 2, x + 2, 3, 3, pal["brick"])

    names = {config.events[i] for i in label}
    drawn: set[str] = set()
    if ax is None:
        ax = 12 + (W - 34) // 2
    ay = ground - 12
    if "jump" in names:
        ay -= 14
        drawn.add("jump")
    facing = -1 if ("move_left" in names and "move_right" not in names) else 1

    # world scenery: idle enemies every 90 px, items every 70 px
    for wx in range(0, index + W + 90, 90):
        sx = wx + 40 - index
        if -12 < sx < W and not ax - 12 < sx < ax + 12:
            _draw_enemy(img, style, ground - 12, sx, dead=False)
    for wx in range(0, index + W + 70, 70):
        sx = wx + 25 - index
        if -3 < sx < W:
            _rect(img, ground - 5, sx, 3, 3, pal["spark"])

    if "enemy_death" in names:
        _draw_enemy(img, style, ground - 12, ax + 14 if ax + 24 < W else ax - 16, dead=True)
        drawn.add("enemy_death")
    if "powerup" in names:
        _rect(img, ay - 2, ax - 2, 16, 12, pal["aura"])
        drawn.add("powerup")
    _draw_avatar(img, style, ay, ax, facing, pal["hurt"] if "hurt" in names else pal["body"])
    if "hurt" in names:
        drawn.add("hurt")

    if "move_right" in names:
        for k, dy in enumerate((2, 6, 10)):
            if style == "A":
                _rect(img, ay + dy, ax - 9 + k, 1, 6, pal["trail"])
            else:
                for dx in (3, 6, 9):
                    _rect(img, ay + dy, ax - dx, 1, 1, pal["trail"])
        drawn.add("move_right")
    if "move_left" in names:
        for k, dy in enumerate((2, 6, 10)):
            if style == "A":
                _rect(img, ay + dy, ax + 11 - k, 1, 6, pal["trail"])
            else:
                for dx in (3, 6, 9):
                    _rect(img, ay + dy, ax + 8 + dx - 1, 1, 1, pal["trail"])
        drawn.add("move_left")
    if "shoot" in names:
        sx = ax + 12 if facing > 0 else ax - 8
        if style == "A":
            _rect(img, ay + 5, sx, 3, 5, pal["shot"])
        else:
            _diamond(img, ay + 6, sx + 2, 3, pal["shot"])
        drawn.add("shoot")
    if "collect" in names:
        if style == "A":
            _plus(img, ay - 5, ax + 4, 3, pal["spark"])
        else:
            _cross(img, ay - 5, ax + 4, 3, pal["spark"])
        drawn.add("collect")

    assert drawn == names, f"frame {index}: drew {sorted(drawn)} but label says {sorted(names)}"
    return img


def _activity_frames(config: SynthConfig):
    """Clips of one continuous activity each; the avatar drifts per frame."""
    per = config.clip_length
    for c, name in enumerate(config.events):
        for k in range(config.clips_per_class):
            clip = f"{name}-{k:03d}"
            base = c * config.clips_per_class * per + k * per
            for j in range(per):
                yield clip, j, c, base + j


def generate(config: SynthConfig) -> tuple[DatasetManifest, GameLog]:
    """Render the dataset; images ride along in memory on each entry."""
    config.validate()
    vocab = EventVocabulary(tuple(config.events))
    if config.mode == "activity":
        frames = list(_activity_frames(config))
        xs = avatar_positions(config, [(cls,) for _, _, cls, _ in frames])
        entries = []
        for (clip, j, cls, index), ax in zip(frames, xs):
            img = render_frame(config, index, (cls,), ax)
            entries.append(LabeledFrame(j, j / config.fps, f"frames/{clip}/{j:04d}.png", cls, clip, img))
        entries.sort(key=lambda e: (e.clip, e.frame_index))
        manifest = DatasetManifest(config.fps, vocab, "activity", tuple(entries))
        onehot = np.zeros((len(entries), len(vocab)), dtype=np.uint8)
        onehot[np.arange(len(entries)), [e.label for e in entries]] = 1
        return manifest, emit_log(onehot, config.fps, vocab, source=f"synth:{config.style}:{config.seed}")

    labels = event_schedule(config)
    xs = avatar_positions(config, labels)
    entries = tuple(
        LabeledFrame(i, i / config.fps, f"frames/{i:06d}.png", lab, image=render_frame(config, i, lab, x))
        for i, (lab, x) in enumerate(zip(labels, xs))
    )
    manifest = DatasetManifest(config.fps, vocab, "event", entries)
    log = emit_log(manifest.label_matrix(), config.fps, vocab, source=f"synth:{config.style}:{config.seed}")
    return manifest, log


def config_to_dict(config: SynthConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    for key in ("resolution", "events", "event_rates"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    try:
        return SynthConfig(**d)
    except TypeError as exc:
        raise ValidationError(f"bad synth config: {exc}") from None
