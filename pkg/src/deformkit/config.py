"""Flat key=value run configuration with dotted section prefixes.

Example file:

    paths.data_dir=data
    gen.n_scenes=50
    deform.k_def=8
    sa.mlp_dims=32,32
    train.epochs=4
    ablation.deform=true

Every key has a typed default; unknown keys and dimensional
inconsistencies are rejected with the offending key named, before any
work starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Optional

from .deformnet import AblationFlags, DeformConfig, GateConfig, ModelConfig, SAConfig
from .synth import GenConfig


class ConfigError(Exception):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


# key -> (parser, default)
SCHEMA = {
    "paths.data_dir": (str, "data"),
    "paths.checkpoint_dir": (str, "checkpoints"),
    "paths.report_dir": (str, "reports"),
    "gen.extent": (float, 60.0),
    "gen.n_car": (int, 2),
    "gen.n_pedestrian": (int, 3),
    "gen.n_cyclist": (int, 3),
    "gen.n_pole": (int, 3),
    "gen.n_seated": (int, 3),
    "gen.range_min": (float, 8.0),
    "gen.range_max": (float, 48.0),
    "gen.density_at_10m": (float, 25.0),
    "gen.n_ground": (int, 300),
    "gen.seed": (int, 0),
    "gen.n_scenes": (int, 50),
    "deform.k_def": (int, 8),
    "deform.d_feat": (int, 16),
    "deform.d_off": (int, 8),
    "deform.delta_max": (float, 1.0),
    "encoder.radius": (float, 1.0),
    "encoder.max_samples": (int, 16),
    "sa.radius": (float, 0.6),
    "sa.max_samples": (int, 16),
    "sa.mlp_dims": (_parse_int_tuple, (32, 32)),
    "gate.d_in": (int, None),  # default: set-abstraction output dim
    "gate.d_out": (int, None),
    "train.epochs": (int, 4),
    "train.lr": (float, 0.005),
    "train.batch_scenes": (int, 1),
    "train.seed": (int, 0),
    "train.keypoints": (int, 2048),
    "train.sampler": (str, "fps"),
    "ablation.deform": (_parse_bool, True),
    "ablation.gate": (_parse_bool, True),
}


@dataclass(frozen=True)
class RunConfig:
    data_dir: str
    checkpoint_dir: str
    report_dir: str
    gen: GenConfig
    n_scenes: int
    model: ModelConfig
    epochs: int
    lr: float
    batch_scenes: int
    seed: int
    keypoints: int
    sampler: str
    flags: AblationFlags

    @property
    def variant_tag(self) -> str:
        return f"d{int(self.flags.use_deform)}g{int(self.flags.use_gate)}"

    def checkpoint_path(self) -> str:
        name = f"model_{self.variant_tag}_k{self.keypoints}_s{self.seed}.dckpt"
        return os.path.join(self.checkpoint_dir, name)

    def trainlog_path(self) -> str:
        name = f"trainlog_{self.variant_tag}_k{self.keypoints}_s{self.seed}.csv"
        return os.path.join(self.checkpoint_dir, name)

    def report_path(self) -> str:
        name = f"eval_{self.variant_tag}_k{self.keypoints}_s{self.seed}.csv"
        return os.path.join(self.report_dir, name)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def build_run_config(values: dict) -> RunConfig:
    """Assemble and cross-validate typed sub-configs from raw key values."""
    try:
        gen = GenConfig(
            extent=values["gen.extent"],
            n_car=values["gen.n_car"],
            n_pedestrian=values["gen.n_pedestrian"],
            n_cyclist=values["gen.n_cyclist"],
            n_pole=values["gen.n_pole"],
            n_seated=values["gen.n_seated"],
            range_min=values["gen.range_min"],
            range_max=values["gen.range_max"],
            density_at_10m=values["gen.density_at_10m"],
            n_ground=values["gen.n_ground"],
            seed=values["gen.seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"gen.*: {exc}") from exc

    d_feat = values["deform.d_feat"]
    d_a = values["sa.mlp_dims"][-1]
    d_gate_in = values["gate.d_in"] if values["gate.d_in"] is not None else d_a
    d_gate_out = values["gate.d_out"] if values["gate.d_out"] is not None else d_a
    try:
        model = ModelConfig(
            deform=DeformConfig(
                k_def=values["deform.k_def"],
                d_feat=d_feat,
                d_off=values["deform.d_off"],
                delta_max=values["deform.delta_max"],
            ),
            encoder=SAConfig(
                radius=values["encoder.radius"],
                max_samples=values["encoder.max_samples"],
                mlp_dims=(d_feat,),
            ),
            sa=SAConfig(
                radius=values["sa.radius"],
                max_samples=values["sa.max_samples"],
                mlp_dims=values["sa.mlp_dims"],
            ),
            gate=GateConfig(d_in=d_gate_in, d_out=d_gate_out),
        )
    except ValueError as exc:
        raise ConfigError(f"model dimensions: {exc} (check gate.d_in/gate.d_out/sa.mlp_dims)") from exc

    if values["train.sampler"] not in ("fps", "random"):
        raise ConfigError(f"train.sampler must be fps or random, got {values['train.sampler']!r}")
    if values["train.epochs"] < 1 or values["train.batch_scenes"] < 1:
        raise ConfigError("train.epochs and train.batch_scenes must be >= 1")
    if values["train.keypoints"] < 1:
        raise ConfigError("train.keypoints must be >= 1")

    return RunConfig(
        data_dir=values["paths.data_dir"],
        checkpoint_dir=values["paths.checkpoint_dir"],
        report_dir=values["paths.report_dir"],
        gen=gen,
        n_scenes=values["gen.n_scenes"],
        model=model,
        epochs=values["train.epochs"],
        lr=values["train.lr"],
        batch_scenes=values["train.batch_scenes"],
        seed=values["train.seed"],
        keypoints=values["train.keypoints"],
        sampler=values["train.sampler"],
        flags=AblationFlags(
            use_deform=values["ablation.deform"], use_gate=values["ablation.gate"]
        ),
    )


def load_config(path: Optional[str]) -> RunConfig:
    """Read a config file (or pure defaults when path is None)."""
    if path is None:
        return build_run_config({k: d for k, (_, d) in SCHEMA.items()})
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return build_run_config(parse_config_text(fh.read(), source=path))


def apply_overrides(
    cfg: RunConfig,
    deform: Optional[bool] = None,
    gate: Optional[bool] = None,
    keypoints: Optional[int] = None,
    sampler: Optional[str] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    flags = cfg.flags
    if deform is not None or gate is not None:
        flags = AblationFlags(
            use_deform=flags.use_deform if deform is None else deform,
            use_gate=flags.use_gate if gate is None else gate,
        )
    return replace(
        cfg,
        flags=flags,
        keypoints=cfg.keypoints if keypoints is None else keypoints,
        sampler=cfg.sampler if sampler is None else sampler,
        seed=cfg.seed if seed is None else seed,
    )
