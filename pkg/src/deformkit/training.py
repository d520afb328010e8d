"""Training loop: Adam over the train split with a fixed scene order.

Keypoint sampling, neighbor structure, and grouping seeds are derived per
scene from the run seed, so two runs with identical inputs produce
bit-identical checkpoints and loss logs.
"""

from __future__ import annotations

import csv
import io
import os
from typing import Optional, Sequence

from .core import Scene, read_scene
from .deformnet import (
    AblationFlags,
    ModelConfig,
    PreparedScene,
    build_params,
    derive_seed,
    forward_prepared,
    loss_and_backward,
    prepare_scene,
    sample_keypoints,
)
from .diffkit import ParamStore, adam_step
from .synth import read_manifest


def load_split(data_dir, split: Optional[str] = None) -> list[Scene]:
    """Scenes listed in the manifest, optionally filtered by split tag."""
    scenes = []
    for row in read_manifest(data_dir):
        if split is not None and row["split"] != split:
            continue
        scenes.append(read_scene(os.path.join(data_dir, row["file"])))
    return scenes


def prepare_scenes(
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    keypoints: int,
    sampler: str,
    seed: int,
) -> list[PreparedScene]:
    """Param-independent preprocessing, done once and reused every epoch."""
    prepared = []
    for scene in scenes:
        kp = sample_keypoints(
            scene, keypoints, sampler, seed=derive_seed(seed, scene.scene_id, 0)
        )
        prepared.append(
            prepare_scene(scene, kp, cfg, seed=derive_seed(seed, scene.scene_id, 1))
        )
    return prepared


def train_model(
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    flags: AblationFlags,
    epochs: int,
    lr: float,
    keypoints: int,
    sampler: str = "fps",
    seed: int = 0,
    batch_scenes: int = 1,
    params: Optional[ParamStore] = None,
) -> tuple[ParamStore, list[float]]:
    """Returns the trained store and the mean loss per epoch."""
    if params is None:
        params = build_params(derive_seed(seed, 101), cfg)
    prepared = prepare_scenes(scenes, cfg, keypoints, sampler, seed)
    epoch_losses = []
    for _ in range(epochs):
        total = 0.0
        pending = 0
        for prep in prepared:
            scores, cache = forward_prepared(prep, params, cfg, flags)
            total += loss_and_backward(scores, prep.kp_classes, params, cache)
            pending += 1
            if pending == batch_scenes:
                adam_step(params, lr=lr)
                pending = 0
        if pending:
            adam_step(params, lr=lr)
        epoch_losses.append(total / len(prepared))
    return params, epoch_losses


def trainlog_csv_bytes(epoch_losses: Sequence[float]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "mean_loss"])
    for epoch, loss in enumerate(epoch_losses):
        writer.writerow([epoch, f"{loss:.6f}"])
    return buf.getvalue().encode("utf-8")
