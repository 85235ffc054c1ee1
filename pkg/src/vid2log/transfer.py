"""Student-teacher transfer and the two comparison regimes.

* ``make_student``: copy every teacher weight, swap in a freshly initialised
  head of the new width; the whole student is then retrained.
* ``transfer_last_layer``: same resize, but only the head trains.
* ``domain_adapt``: train from scratch on the merged shared-class datasets.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .ingest import DatasetManifest, concat_manifests
from .netcore import (
    Checkpoint,
    ModelSpec,
    TrainConfig,
    TrainingCurve,
    final_layer_names,
    init_parameters,
    train,
)

TrainableMask = Mapping[str, bool]


def make_student(teacher: Checkpoint, new_output_size: int, seed: int = 0) -> Checkpoint:
    if new_output_size < 1:
        raise ValidationError("new_output_size must be at least 1")
    try:
        head = final_layer_names(teacher.spec)
    except ValidationError:
        raise ValidationError("teacher has no recognisable final classification layer") from None
    if not all(name in teacher.parameters for name in head):
        raise ValidationError("teacher has no recognisable final classification layer")
    spec = teacher.spec.with_output_size(new_output_size)
    fresh = init_parameters(spec, np.random.default_rng(seed), names=head)
    params = OrderedDict(
        (name, fresh[name] if name in head else value.copy()) for name, value in teacher.parameters.items()
    )
    meta = {"seed": seed, "epochs": 0, "teacher_epochs": teacher.meta.get("epochs", 0)}
    return Checkpoint(spec, params, meta)


def full_mask(ckpt: Checkpoint) -> dict[str, bool]:
    return {name: True for name in ckpt.parameters}


def head_only_mask(ckpt: Checkpoint) -> dict[str, bool]:
    head = final_layer_names(ckpt.spec)
    return {name: name in head for name in ckpt.parameters}


def transfer_last_layer(
    pretrained: Checkpoint,
    new_output_size: int,
    manifest: DatasetManifest,
    config: TrainConfig = TrainConfig(),
    **train_kwargs,
) -> tuple[Checkpoint, TrainingCurve]:
    student = make_student(pretrained, new_output_size, config.seed)
    return train(student, manifest, config, mask=head_only_mask(student), **train_kwargs)


def domain_adapt(
    spec: ModelSpec,
    shared_manifests: Sequence[DatasetManifest],
    config: TrainConfig = TrainConfig(),
    **train_kwargs,
) -> tuple[Checkpoint, TrainingCurve]:
    merged = concat_manifests(shared_manifests)
    if spec.output_size != merged.event_count:
        spec = spec.with_output_size(merged.event_count)
    return train(spec, merged, config, **train_kwargs)


def epochs_to_threshold(curve: TrainingCurve, threshold: float, use: str = "heldout") -> int | None:
    """First 0-based epoch whose accuracy reaches ``threshold``, else None."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    if use == "heldout":
        values = curve.heldout_accuracy
        if values is None:
            raise ValueError("curve has no held-out accuracy; pass use='train'")
    elif use == "train":
        values = curve.train_accuracy
    else:
        raise ValueError(f"use must be 'heldout' or 'train', not {use!r}")
    for epoch, acc in enumerate(values):
        if acc >= threshold:
            return epoch
    return None
