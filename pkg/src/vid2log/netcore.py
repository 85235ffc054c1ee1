"""Convolutional classifiers: specs, initialisation, training and checkpoints.

Two network families share one spec format:

* event nets: plain conv blocks, three fully connected layers, one sigmoid
  output per event type, trained with per-event binary cross-entropy;
* activity nets: a residual trunk per input stream (raw pixels, and
  optionally frame differences), global pooling, a fusion layer when there
  are two streams, and a softmax head trained with categorical
  cross-entropy.

Torch provides the tensor kernels and autograd.  Initial parameter values
come from numpy's PCG64 generator so a seed means the same weights on every
platform.
"""

from __future__ import annotations

import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, LabelError, ShapeError, TrainingError, ValidationError
from .ingest import DatasetManifest, frame_difference

CHECKPOINT_MAGIC = b"PXLG"
CHECKPOINT_VERSION = 1
SUPPORTED_DEPTHS = (6, 10, 18)
DESK_INPUT = (64, 64, 3)
PAPER_INPUT = (227, 227, 3)


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int
    stride: int = 1
    pool: int = 1  # max-pool window, 1 = no pooling
    pool_stride: int = 0  # 0 = same as the window
    residual: bool = False

    @property
    def pool_step(self) -> int:
        return self.pool_stride or self.pool


@dataclass(frozen=True)
class ModelSpec:
    mode: str  # "event" | "activity"
    input_shape: tuple[int, int, int]  # height, width, channels
    conv_blocks: tuple[ConvBlock, ...]
    fc_widths: tuple[int, ...]
    output_size: int
    streams: int = 1
    global_pool: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "conv_blocks", tuple(self.conv_blocks))
        object.__setattr__(self, "fc_widths", tuple(self.fc_widths))
        if self.mode not in ("event", "activity"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.output_size < 1:
            raise ValidationError("output_size must be at least 1")
        if self.streams not in (1, 2):
            raise ValidationError("streams must be 1 or 2")
        if self.streams == 2 and self.mode != "activity":
            raise ValidationError("two-stream input is only supported in activity mode")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValidationError(f"bad input shape {self.input_shape}")
        if not self.conv_blocks:
            raise ValidationError("at least one conv block is required")
        feature_shape(self)  # raises if the input collapses to nothing

    @property
    def output_activation(self) -> str:
        return "sigmoid" if self.mode == "event" else "softmax"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_activation"] = self.output_activation
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        try:
            spec = cls(
                mode=d["mode"],
                input_shape=tuple(d["input_shape"]),
                conv_blocks=tuple(ConvBlock(**b) for b in d["conv_blocks"]),
                fc_widths=tuple(d["fc_widths"]),
                output_size=int(d["output_size"]),
                streams=int(d.get("streams", 1)),
                global_pool=bool(d.get("global_pool", False)),
            )
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"invalid model spec: {exc}") from None
        if "output_activation" in d and d["output_activation"] != spec.output_activation:
            raise CheckpointError("output activation does not match the model spec mode")
        return spec

    def with_output_size(self, size: int) -> "ModelSpec":
        return ModelSpec(self.mode, self.input_shape, self.conv_blocks, self.fc_widths, size,
                         self.streams, self.global_pool)


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def feature_shape(spec: ModelSpec) -> tuple[int, int, int]:
    """(channels, height, width) at the end of one stream's conv trunk."""
    h, w, c = spec.input_shape
    for i, block in enumerate(spec.conv_blocks):
        h, w = _conv_out(h, block.kernel, block.stride), _conv_out(w, block.kernel, block.stride)
        if block.pool > 1:
            h = (h - block.pool) // block.pool_step + 1
            w = (w - block.pool) // block.pool_step + 1
        if h < 1 or w < 1:
            raise ValidationError(f"input {spec.input_shape} collapses to nothing at conv block {i}")
        c = block.filters
    return c, h, w


def _stream_names(spec: ModelSpec) -> tuple[str, ...]:
    return ("pixel", "motion")[: spec.streams]


def parameter_shapes(spec: ModelSpec) -> "OrderedDict[str, tuple[int, ...]]":
    """Ordered parameter table implied by a model spec, derived by shape arithmetic."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for stream in _stream_names(spec):
        c = spec.input_shape[2]
        for i, b in enumerate(spec.conv_blocks):
            pre = f"{stream}.block{i}"
            if b.residual:
                shapes[f"{pre}.conv_a.weight"] = (b.filters, c, b.kernel, b.kernel)
                shapes[f"{pre}.conv_a.bias"] = (b.filters,)
                shapes[f"{pre}.conv_b.weight"] = (b.filters, b.filters, b.kernel, b.kernel)
                shapes[f"{pre}.conv_b.bias"] = (b.filters,)
                if c != b.filters or b.stride != 1:
                    shapes[f"{pre}.proj.weight"] = (b.filters, c, 1, 1)
                    shapes[f"{pre}.proj.bias"] = (b.filters,)
            else:
                shapes[f"{pre}.conv.weight"] = (b.filters, c, b.kernel, b.kernel)
                shapes[f"{pre}.conv.bias"] = (b.filters,)
            c = b.filters
    fc, fh, fw = feature_shape(spec)
    width = fc if spec.global_pool else fc * fh * fw
    if spec.streams == 2:
        shapes["fusion.weight"] = (width, 2 * width)
        shapes["fusion.bias"] = (width,)
    for i, out in enumerate(spec.fc_widths):
        shapes[f"fc{i}.weight"] = (out, width)
        shapes[f"fc{i}.bias"] = (out,)
        width = out
    shapes["head.weight"] = (spec.output_size, width)
    shapes["head.bias"] = (spec.output_size,)
    return shapes


def final_layer_names(spec: ModelSpec) -> tuple[str, str]:
    """Weight and bias names of the last fully connected layer."""
    fc = [n for n, s in parameter_shapes(spec).items() if len(s) == 2]
    if not fc:
        raise ValidationError("spec has no fully connected layer")
    weight = fc[-1]
    return weight, weight.rsplit(".", 1)[0] + ".bias"


def parameter_count(spec: ModelSpec) -> int:
    return sum(math.prod(s) for s in parameter_shapes(spec).values())


def build_event_net(event_count: int, scale: str = "desk", input_shape: Sequence[int] | None = None) -> ModelSpec:
    """Five conv blocks and three fully connected layers, head width E."""
    if event_count < 1:
        raise ValidationError("event_count must be at least 1")
    if scale == "desk":
        blocks = (
            ConvBlock(16, 5, 2, pool=2),
            ConvBlock(32, 3, 1, pool=2),
            ConvBlock(32, 3),
            ConvBlock(48, 3),
            ConvBlock(48, 3, pool=2),
        )
        fc = (128, 128)
        shape = tuple(input_shape or DESK_INPUT)
        if shape[0] > 64 or shape[1] > 64:
            raise ValidationError("desk scale supports inputs up to 64x64")
    elif scale == "paper":
        blocks = (
            ConvBlock(96, 11, 4, pool=3, pool_stride=2),
            ConvBlock(256, 5, 1, pool=3, pool_stride=2),
            ConvBlock(384, 3),
            ConvBlock(384, 3),
            ConvBlock(256, 3, pool=3, pool_stride=2),
        )
        fc = (4096, 4096)
        shape = tuple(input_shape or PAPER_INPUT)
    else:
        raise ValidationError(f"unknown scale {scale!r}; expected 'desk' or 'paper'")
    return ModelSpec("event", shape, blocks, fc, event_count)


def build_activity_net(
    classes: int, two_stream: bool = False, depth: int = 10, input_shape: Sequence[int] | None = None
) -> ModelSpec:
    """Residual classifier of ``depth`` weight layers: a stem conv, residual
    blocks of two convs each, and the head."""
    if classes < 2:
        raise ValidationError("activity nets need at least two classes")
    if depth not in SUPPORTED_DEPTHS:
        raise ValidationError(f"unsupported depth {depth}; supported depths are {list(SUPPORTED_DEPTHS)}")
    n_blocks = (depth - 2) // 2
    first = n_blocks // 2
    blocks = [ConvBlock(16, 3, 1, pool=2)]
    blocks += [ConvBlock(16, 3, residual=True) for _ in range(first)]
    blocks += [ConvBlock(32, 3, 2 if i == 0 else 1, residual=True) for i in range(n_blocks - first)]
    return ModelSpec(
        "activity", tuple(input_shape or DESK_INPUT), tuple(blocks), (), classes,
        streams=2 if two_stream else 1, global_pool=True,
    )


# ---------------------------------------------------------------------------
# torch modules


class _Plain(nn.Module):
    def __init__(self, c_in: int, b: ConvBlock):
        super().__init__()
        self.conv = nn.Conv2d(c_in, b.filters, b.kernel, b.stride, b.kernel // 2)
        self.relu = nn.ReLU()
        self.pool = nn.MaxPool2d(b.pool, b.pool_step) if b.pool > 1 else None

    def forward(self, x):
        x = self.relu(self.conv(x))
        return x if self.pool is None else self.pool(x)


class _Residual(nn.Module):
    def __init__(self, c_in: int, b: ConvBlock):
        super().__init__()
        self.conv_a = nn.Conv2d(c_in, b.filters, b.kernel, b.stride, b.kernel // 2)
        self.conv_b = nn.Conv2d(b.filters, b.filters, b.kernel, 1, b.kernel // 2)
        self.proj = nn.Conv2d(c_in, b.filters, 1, b.stride) if c_in != b.filters or b.stride != 1 else None
        self.relu = nn.ReLU()
        self.pool = nn.MaxPool2d(b.pool, b.pool_step) if b.pool > 1 else None

    def forward(self, x):
        skip = x if self.proj is None else self.proj(x)
        x = self.relu(self.conv_b(self.relu(self.conv_a(x))) + skip)
        return x if self.pool is None else self.pool(x)


class SpecNet(nn.Module):
    """Torch module realising a ModelSpec.  ``forward`` returns logits."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        for stream in _stream_names(spec):
            trunk = nn.Module()
            c = spec.input_shape[2]
            for i, b in enumerate(spec.conv_blocks):
                trunk.add_module(f"block{i}", (_Residual if b.residual else _Plain)(c, b))
                c = b.filters
            self.add_module(stream, trunk)
        shapes = parameter_shapes(spec)
        if spec.streams == 2:
            self.fusion = nn.Linear(*reversed(shapes["fusion.weight"]))
        for i in range(len(spec.fc_widths)):
            self.add_module(f"fc{i}", nn.Linear(*reversed(shapes[f"fc{i}.weight"])))
        self.head = nn.Linear(*reversed(shapes["head.weight"]))
        self.relu = nn.ReLU()
        names = [n for n, _ in self.named_parameters()]
        if names != list(shapes):
            raise AssertionError(f"module parameters {names} drifted from the model spec table")

    def _trunk(self, stream: str, x):
        trunk = getattr(self, stream)
        for i in range(len(self.spec.conv_blocks)):
            x = getattr(trunk, f"block{i}")(x)
        if self.spec.global_pool:
            return x.mean(dim=(2, 3))
        return x.flatten(1)

    def forward(self, x):
        # x: (batch, streams, channels, height, width)
        feats = [self._trunk(s, x[:, k]) for k, s in enumerate(_stream_names(self.spec))]
        h = feats[0] if len(feats) == 1 else self.relu(self.fusion(torch.cat(feats, dim=1)))
        for i in range(len(self.spec.fc_widths)):
            h = self.relu(getattr(self, f"fc{i}")(h))
        return self.head(h)


def loss_from_logits(spec: ModelSpec, logits, target):
    """Summed per-event BCE (event mode) or categorical CE (activity), batch mean."""
    if spec.mode == "event":
        per = F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="none")
        return per.sum(dim=1).mean()
    return F.cross_entropy(logits, target)


def activate(spec: ModelSpec, logits):
    return torch.sigmoid(logits) if spec.mode == "event" else torch.softmax(logits, dim=1)


# ---------------------------------------------------------------------------
# parameters and checkpoints


def _fan_in(shape: tuple[int, ...]) -> int:
    return math.prod(shape[1:]) if len(shape) > 1 else shape[0]


def init_parameters(
    spec: ModelSpec, rng: np.random.Generator, names: Sequence[str] | None = None
) -> "OrderedDict[str, np.ndarray]":
    """Fan-in scaled uniform init.

    Weights feeding a ReLU draw from U(-sqrt(6/fan_in), +), the head from
    U(-sqrt(3/fan_in), +); biases from U(-1/sqrt(fan_in), +) with the
    owning weight's fan-in.  ``names`` restricts which tensors are drawn.
    """
    shapes = parameter_shapes(spec)
    head_w, _ = final_layer_names(spec)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in shapes.items():
        if names is not None and name not in names:
            continue
        owner = name.rsplit(".", 1)[0] + ".weight"
        fan_in = _fan_in(shapes[owner])
        if name.endswith(".bias"):
            bound = 1.0 / math.sqrt(fan_in)
        elif name == head_w:
            bound = math.sqrt(3.0 / fan_in)
        else:
            bound = math.sqrt(6.0 / fan_in)
            if name.endswith("conv_b.weight"):
                bound *= 0.5  # keeps the residual sum from growing with depth
        out[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return out


@dataclass
class Checkpoint:
    spec: ModelSpec
    parameters: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = parameter_shapes(self.spec)
        if list(self.parameters) != list(shapes):
            raise CheckpointError("parameter names/order do not match the model spec")
        for name, shape in shapes.items():
            arr = self.parameters[name]
            if tuple(arr.shape) != shape:
                raise CheckpointError(f"{name}: shape {arr.shape} does not match spec {shape}")
            if arr.dtype != np.float32:
                self.parameters[name] = arr.astype(np.float32)

    @classmethod
    def initialise(cls, spec: ModelSpec, seed: int, **meta) -> "Checkpoint":
        return cls(spec, init_parameters(spec, np.random.default_rng(seed)), {"seed": seed, "epochs": 0, **meta})

    @property
    def vocabulary(self) -> tuple[str, ...] | None:
        names = self.meta.get("vocabulary")
        return tuple(names) if names is not None else None

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameters.values())

    def to_module(self, dtype=torch.float32) -> SpecNet:
        net = SpecNet(self.spec).to(dtype)
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(torch.from_numpy(self.parameters[name]).to(dtype))
        return net

    @classmethod
    def from_module(cls, net: SpecNet, meta: dict) -> "Checkpoint":
        params = OrderedDict(
            (n, p.detach().to(torch.float32).cpu().numpy().copy()) for n, p in net.named_parameters()
        )
        return cls(net.spec, params, meta)


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "spec": ckpt.spec.to_dict(),
        "parameters": [[name, list(arr.shape)] for name, arr in ckpt.parameters.items()],
        "seed": ckpt.meta.get("seed"),
        "epochs": ckpt.meta.get("epochs", 0),
        "meta": {k: v for k, v in ckpt.meta.items() if k not in ("seed", "epochs")},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.parameters.values())
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + payload


def loads_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if 16 + head_len > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + head_len].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        table = [(name, tuple(shape)) for name, shape in header["parameters"]]
    except (ValueError, KeyError, TypeError, ValidationError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(data)[16 + head_len :]
    expected = 4 * sum(math.prod(s) for _, s in table)
    if len(payload) != expected:
        raise CheckpointError(
            f"payload holds {len(payload)} bytes but the shape table needs {expected}"
        )
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 0
    for name, shape in table:
        n = math.prod(shape)
        params[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape)
        offset += 4 * n
    meta = dict(header.get("meta", {}))
    meta["seed"] = header.get("seed")
    meta["epochs"] = header.get("epochs", 0)
    return Checkpoint(spec, params, meta)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_checkpoint(ckpt))
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# data plumbing


def _resize(images: np.ndarray, height: int, width: int) -> np.ndarray:
    if images.shape[1:3] == (height, width):
        return images
    t = torch.from_numpy(images).permute(0, 3, 1, 2).float()
    t = F.interpolate(t, size=(height, width), mode="area")
    return t.round().clamp(0, 255).to(torch.uint8).permute(0, 2, 3, 1).numpy()


def stack_inputs(images: np.ndarray, spec: ModelSpec, clips: Sequence[str | None] | None = None) -> np.ndarray:
    """uint8 ``(N, H, W, C)`` frames to uint8 ``(N, streams, C, h, w)`` model input.

    The second stream holds the difference to the previous frame of the same
    clip; the first frame of a clip is differenced against itself.
    """
    h, w, c = spec.input_shape
    if images.ndim != 4 or images.shape[3] != c:
        raise ShapeError(f"expected (N, H, W, {c}) frames, got {images.shape}")
    frames = _resize(images, h, w)
    streams = [frames]
    if spec.streams == 2:
        diffs = np.empty_like(frames)
        for i in range(len(frames)):
            same_clip = i > 0 and (clips is None or clips[i] == clips[i - 1])
            diffs[i] = frame_difference(frames[i], frames[i - 1] if same_clip else frames[i])
        streams.append(diffs)
    return np.ascontiguousarray(np.stack(streams, axis=1).transpose(0, 1, 4, 2, 3))


def manifest_inputs(manifest: DatasetManifest, spec: ModelSpec) -> np.ndarray:
    if len(manifest) == 0:
        return np.zeros((0, spec.streams, spec.input_shape[2], *spec.input_shape[:2]), dtype=np.uint8)
    return stack_inputs(manifest.images(), spec, [e.clip for e in manifest.entries])


def _targets(manifest: DatasetManifest, spec: ModelSpec) -> torch.Tensor:
    if manifest.mode != spec.mode:
        raise LabelError(f"manifest is in {manifest.mode} mode but the model is in {spec.mode} mode")
    if manifest.event_count != spec.output_size:
        raise LabelError(
            f"manifest has {manifest.event_count} labels but the model outputs {spec.output_size}"
        )
    return torch.from_numpy(manifest.label_matrix().astype(np.float32 if spec.mode == "event" else np.int64))


def _to_float(batch: np.ndarray | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    t = torch.as_tensor(batch)
    return t.to(dtype) / 255.0 if t.dtype == torch.uint8 else t.to(dtype)


def forward(ckpt: Checkpoint, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Activated outputs for ``(N, streams, C, H, W)`` inputs (uint8 or float)."""
    spec = ckpt.spec
    expected = (spec.streams, spec.input_shape[2], spec.input_shape[0], spec.input_shape[1])
    if inputs.ndim != 5 or tuple(inputs.shape[1:]) != expected:
        raise ShapeError(f"expected inputs shaped (N, {', '.join(map(str, expected))}), got {inputs.shape}")
    net = ckpt.to_module().eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            outs.append(activate(spec, net(_to_float(inputs[start : start + batch_size]))).numpy())
    if not outs:
        return np.zeros((0, spec.output_size), dtype=np.float32)
    return np.concatenate(outs)


def predict_labels(ckpt: Checkpoint, inputs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Decoded predictions: multi-hot rows (event) or class indices (activity)."""
    scores = forward(ckpt, inputs)
    if ckpt.spec.mode == "event":
        return (scores > threshold).astype(np.uint8)
    return scores.argmax(axis=1)


def checkpoint_predictor(ckpt: Checkpoint, threshold: float = 0.5):
    def predict(manifest: DatasetManifest) -> np.ndarray:
        return predict_labels(ckpt, manifest_inputs(manifest, ckpt.spec), threshold)

    return predict


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class TrainingCurve:
    train_accuracy: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    heldout_accuracy: list[float] | None = None

    def __len__(self) -> int:
        return len(self.train_accuracy)

    def to_dict(self) -> dict:
        return asdict(self)


def _batch_scores(spec: ModelSpec, logits, target, threshold: float) -> torch.Tensor:
    if spec.mode == "event":
        pred = torch.sigmoid(logits) > threshold
        truth = target > 0.5
        union = (pred | truth).sum(dim=1)
        wrong = (pred ^ truth).sum(dim=1)
        return torch.where(union == 0, torch.ones_like(union, dtype=torch.float64),
                           1.0 - wrong.double() / union.clamp(min=1).double())
    return (logits.argmax(dim=1) == target).double()


def heldout_accuracy(ckpt_or_net, inputs: np.ndarray, target: torch.Tensor, threshold: float = 0.5) -> float:
    net = ckpt_or_net.to_module() if isinstance(ckpt_or_net, Checkpoint) else ckpt_or_net
    was_training = net.training
    net.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(inputs), 256):
            logits = net(_to_float(inputs[start : start + 256]))
            scores.append(_batch_scores(net.spec, logits, target[start : start + 256], threshold))
    net.train(was_training)
    return float(torch.cat(scores).mean())


def train(
    model: ModelSpec | Checkpoint,
    manifest: DatasetManifest,
    config: TrainConfig = TrainConfig(),
    *,
    mask: Mapping[str, bool] | None = None,
    heldout: DatasetManifest | None = None,
    inputs: np.ndarray | None = None,
    heldout_inputs: np.ndarray | None = None,
) -> tuple[Checkpoint, "TrainingCurve"]:
    """Fit with Adam on mini-batches; returns the new checkpoint and curve.

    ``mask`` maps every parameter name to True (trainable) or False (frozen).
    Frozen tensors are left out of the optimiser entirely.  Pre-computed
    ``inputs`` (from ``manifest_inputs``) skip image decoding.
    """
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint.initialise(model, config.seed)
    spec = ckpt.spec
    if len(manifest) == 0:
        raise TrainingError("cannot train on an empty manifest")
    target = _targets(manifest, spec)
    x = manifest_inputs(manifest, spec) if inputs is None else inputs
    if len(x) != len(manifest):
        raise ShapeError("pre-computed inputs do not match the manifest length")
    if heldout is not None:
        held_target = _targets(heldout, spec)
        held_x = manifest_inputs(heldout, spec) if heldout_inputs is None else heldout_inputs
    if mask is not None and set(mask) != set(ckpt.parameters):
        missing = sorted(set(ckpt.parameters) - set(mask))
        extra = sorted(set(mask) - set(ckpt.parameters))
        raise ValidationError(f"mask does not cover the parameters (missing {missing}, unknown {extra})")

    net = ckpt.to_module()
    trainable = []
    for name, p in net.named_parameters():
        keep = True if mask is None else bool(mask[name])
        p.requires_grad_(keep)
        if keep:
            trainable.append(p)
    if not trainable:
        raise TrainingError("every parameter is frozen")
    opt = torch.optim.Adam(trainable, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    order_rng = np.random.default_rng([config.seed, 1])
    x_t = torch.from_numpy(x)
    curve = TrainingCurve(heldout_accuracy=[] if heldout is not None else None)
    n = len(x)
    net.train()
    for epoch in range(config.epochs):
        order = torch.from_numpy(order_rng.permutation(n))
        loss_sum, score_sum = 0.0, 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = net(_to_float(x_t[idx]))
            loss = loss_from_logits(spec, logits, target[idx])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}; "
                    "try a smaller step size"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            score_sum += float(_batch_scores(spec, logits.detach(), target[idx], config.threshold).sum())
        curve.train_loss.append(loss_sum / n)
        curve.train_accuracy.append(score_sum / n)
        if heldout is not None:
            curve.heldout_accuracy.append(heldout_accuracy(net, held_x, held_target, config.threshold))

    meta = dict(ckpt.meta)
    meta["epochs"] = int(meta.get("epochs") or 0) + config.epochs
    meta["seed"] = config.seed
    meta["vocabulary"] = list(manifest.vocabulary.names)
    return Checkpoint.from_module(net, meta), curve


# ---------------------------------------------------------------------------
# gradient verification


class _KinkTrace:
    """Records which side of every ReLU and max-pool switch a forward pass took."""

    def __init__(self, net: nn.Module):
        self.marks: list[torch.Tensor] = []
        self.handles = []
        for m in net.modules():
            if isinstance(m, nn.ReLU):
                self.handles.append(m.register_forward_hook(lambda _m, inp, _o: self.marks.append(inp[0] > 0)))
            elif isinstance(m, nn.MaxPool2d):
                self.handles.append(m.register_forward_hook(self._pool_hook))

    def _pool_hook(self, m, inp, _out):
        _, idx = F.max_pool2d(inp[0], m.kernel_size, m.stride, return_indices=True)
        self.marks.append(idx)

    def pattern(self, fn) -> tuple[float, list[torch.Tensor]]:
        self.marks = []
        value = fn()
        return value, self.marks


def gradient_check(
    spec: ModelSpec,
    sample: tuple[np.ndarray, np.ndarray],
    config: TrainConfig = TrainConfig(),
    *,
    parameters: Mapping[str, np.ndarray] | None = None,
    per_tensor: int = 4,
    step: float = 1e-4,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs in float64.  ``sample`` is ``(inputs, targets)`` with inputs shaped
    ``(N, streams, C, H, W)``.  Up to ``per_tensor`` entries of each
    parameter tensor are probed; relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``.  A probe whose +/- step flips any
    ReLU or max-pool switch straddles a kink, where the loss has no
    derivative, and is replaced by another entry of the same tensor.
    """
    rng = np.random.default_rng(config.seed)
    params = parameters if parameters is not None else init_parameters(spec, rng)
    net = SpecNet(spec).double()
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.as_tensor(np.asarray(params[name], dtype=np.float64)))
    x = torch.as_tensor(np.asarray(sample[0], dtype=np.float64))
    y = torch.as_tensor(sample[1])
    y = y.double() if spec.mode == "event" else y.long()
    trace = _KinkTrace(net)

    def objective():
        return loss_from_logits(spec, net(x), y)

    loss, base = trace.pattern(objective)
    net.zero_grad()
    loss.backward()
    analytic = {n: p.grad.detach().clone() for n, p in net.named_parameters()}

    worst = 0.0
    with torch.no_grad():
        for name, p in net.named_parameters():
            flat = p.view(-1)
            probed = 0
            for j in rng.permutation(flat.numel()):
                if probed == per_tensor:
                    break
                orig = flat[j].item()
                flat[j] = orig + step
                up, up_marks = trace.pattern(lambda: objective().item())
                flat[j] = orig - step
                down, down_marks = trace.pattern(lambda: objective().item())
                flat[j] = orig
                if not all(torch.equal(a, b) and torch.equal(a, c) for a, b, c in zip(base, up_marks, down_marks)):
                    continue
                probed += 1
                numeric = (up - down) / (2 * step)
                a = analytic[name].view(-1)[j].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, err)
    for h in trace.handles:
        h.remove()
    return worst
