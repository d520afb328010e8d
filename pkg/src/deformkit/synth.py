"""Seeded synthetic LIDAR-like scene generator.

Scenes contain three labeled object archetypes (car-, pedestrian- and
cyclist-like), two unlabeled clutter archetypes chosen to be locally
confusable with the small classes (thin poles vs pedestrians, seated
figures vs cyclists), uniform ground returns, and a (10/d)^2 falloff of
surface point counts with range d.  Everything is a pure function of
(config, scene_id), so regeneration is byte-identical.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import ObjectClass, ObjectLabel, PointCloud, Scene, encode_scene

SURFACE_SIGMA = 0.02  # meters, Gaussian surface noise, clipped at 3 sigma
PLACEMENT_MARGIN = 0.3  # meters of clearance between box footprints
MAX_PLACEMENT_ATTEMPTS = 200


class PlacementFailureError(RuntimeError):
    """Rejection sampling could not fit all objects disjointly."""


@dataclass(frozen=True)
class GenConfig:
    """Scene generator knobs; all lengths in meters."""

    extent: float = 60.0  # scene half-width: |x|, |y| <= extent
    n_car: int = 2
    n_pedestrian: int = 3
    n_cyclist: int = 3
    n_pole: int = 3
    n_seated: int = 3
    range_min: float = 8.0
    range_max: float = 48.0
    density_at_10m: float = 25.0  # surface points per m^2 at 10 m range
    n_ground: int = 300
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_car, self.n_pedestrian, self.n_cyclist, self.n_pole, self.n_seated)
        if any(c < 0 for c in counts) or self.n_ground < 0:
            raise ValueError("object counts must be >= 0")
        if not 0.0 < self.range_min < self.range_max <= self.extent:
            raise ValueError("need 0 < range_min < range_max <= extent")
        if not self.density_at_10m > 0.0:
            raise ValueError("density_at_10m must be positive")


# archetype name -> (surface kind, nominal (L, W, H), labeled class or None)
ARCHETYPES: dict[str, tuple[str, tuple[float, float, float], Optional[ObjectClass]]] = {
    "car": ("box", (4.0, 1.8, 1.5), ObjectClass.CAR_LIKE),
    "pedestrian": ("cylinder", (0.6, 0.6, 1.7), ObjectClass.PEDESTRIAN_LIKE),
    "cyclist": ("cyclist", (1.8, 0.6, 1.7), ObjectClass.CYCLIST_LIKE),
    "pole": ("cylinder", (0.3, 0.3, 2.5), None),
    "seated": ("seated", (0.6, 0.6, 1.1), None),
}


def archetype_surface_area(kind: str, dims: tuple[float, float, float]) -> float:
    """Area of the sampled surfaces; drives the range-based point budget."""
    length, width, height = dims
    if kind == "box":
        # four side faces plus the top; the ground-facing face is never hit
        return 2.0 * height * (length + width) + length * width
    radius = min(length, width) / 2.0
    if kind == "cylinder":
        return 2.0 * math.pi * radius * height + math.pi * radius * radius
    if kind == "cyclist":
        # low box (frame) topped by an upright cylinder (rider torso)
        box_h = 0.5 * height
        box = 2.0 * box_h * (length + width) + length * width
        cyl = 2.0 * math.pi * radius * (height - box_h) + math.pi * radius * radius
        return box + cyl
    if kind == "seated":
        box_h = 0.45 * height
        box = 2.0 * box_h * (length + width) + length * width
        cyl = 2.0 * math.pi * radius * (height - box_h) + math.pi * radius * radius
        return box + cyl
    raise ValueError(f"unknown archetype kind {kind!r}")


def surface_point_count(density_at_10m: float, area: float, distance: float) -> int:
    """Budget follows the (10/d)^2 falloff; at least 3 returns per object."""
    return max(3, round(density_at_10m * area * (10.0 / distance) ** 2))


def _box_shell(n: int, dims, rng, z_lo: float, z_hi: float) -> np.ndarray:
    """Uniform points on the four sides and top of an upright box."""
    length, width, _ = dims
    height = z_hi - z_lo
    areas = np.array(
        [length * height, length * height, width * height, width * height, length * width]
    )
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(size=n)
    pts = np.empty((n, 3))
    for f in range(5):
        m = face == f
        if f < 2:  # y = +/- W/2 faces
            pts[m, 0] = u[m] * length
            pts[m, 1] = (0.5 if f == 0 else -0.5) * width
            pts[m, 2] = z_lo + v[m] * height
        elif f < 4:  # x = +/- L/2 faces
            pts[m, 0] = (0.5 if f == 2 else -0.5) * length
            pts[m, 1] = u[m] * width
            pts[m, 2] = z_lo + v[m] * height
        else:  # top
            pts[m, 0] = u[m] * length
            pts[m, 1] = v[m] * width - 0.5 * width
            pts[m, 2] = z_hi
    return pts


def _cylinder(n: int, radius: float, rng, z_lo: float, z_hi: float) -> np.ndarray:
    """Uniform points on the side and top disk of an upright cylinder."""
    height = z_hi - z_lo
    side_area = 2.0 * math.pi * radius * height
    top_area = math.pi * radius * radius
    n_top = int(round(n * top_area / (side_area + top_area)))
    n_side = n - n_top
    theta = rng.uniform(-math.pi, math.pi, size=n)
    pts = np.empty((n, 3))
    pts[:n_side, 0] = radius * np.cos(theta[:n_side])
    pts[:n_side, 1] = radius * np.sin(theta[:n_side])
    pts[:n_side, 2] = z_lo + rng.uniform(size=n_side) * height
    rr = radius * np.sqrt(rng.uniform(size=n_top))
    pts[n_side:, 0] = rr * np.cos(theta[n_side:])
    pts[n_side:, 1] = rr * np.sin(theta[n_side:])
    pts[n_side:, 2] = z_hi
    return pts


def _object_local_points(kind: str, n: int, dims, rng) -> np.ndarray:
    """Surface samples in the object frame: footprint-centered, z in [0, H]."""
    length, width, height = dims
    radius = min(length, width) / 2.0
    if kind == "box":
        return _box_shell(n, dims, rng, 0.0, height)
    if kind == "cylinder":
        return _cylinder(n, radius, rng, 0.0, height)
    if kind in ("cyclist", "seated"):
        box_h = (0.5 if kind == "cyclist" else 0.45) * height
        box_dims = (length, width, box_h)
        box_area = archetype_surface_area("box", box_dims)
        cyl_area = 2.0 * math.pi * radius * (height - box_h) + math.pi * radius * radius
        n_box = int(round(n * box_area / (box_area + cyl_area)))
        parts = [
            _box_shell(n_box, box_dims, rng, 0.0, box_h),
            _cylinder(n - n_box, radius, rng, box_h, height),
        ]
        return np.concatenate(parts, axis=0)
    raise ValueError(f"unknown archetype kind {kind!r}")


@dataclass
class _Placed:
    name: str
    kind: str
    dims: tuple[float, float, float]
    center_xy: np.ndarray
    yaw: float
    class_id: Optional[ObjectClass]

    @property
    def footprint_radius(self) -> float:
        return math.hypot(self.dims[0], self.dims[1]) / 2.0


def _place_objects(config: GenConfig, rng) -> list[_Placed]:
    order = [
        ("car", config.n_car),
        ("pedestrian", config.n_pedestrian),
        ("cyclist", config.n_cyclist),
        ("pole", config.n_pole),
        ("seated", config.n_seated),
    ]
    placed: list[_Placed] = []
    for name, count in order:
        kind, nominal, class_id = ARCHETYPES[name]
        for _ in range(count):
            dims = tuple(d * rng.uniform(0.9, 1.1) for d in nominal)
            yaw = float(rng.uniform(-math.pi, math.pi))
            obj = _Placed(name, kind, dims, np.zeros(2), yaw, class_id)
            for attempt in range(MAX_PLACEMENT_ATTEMPTS):
                dist = rng.uniform(config.range_min, config.range_max)
                phi = rng.uniform(-math.pi, math.pi)
                cxy = np.array([dist * math.cos(phi), dist * math.sin(phi)])
                clear = all(
                    np.linalg.norm(cxy - other.center_xy)
                    > obj.footprint_radius + other.footprint_radius + PLACEMENT_MARGIN
                    for other in placed
                )
                if clear:
                    obj.center_xy = cxy
                    break
            else:
                raise PlacementFailureError(
                    f"could not place {name} after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            placed.append(obj)
    return placed


def generate_scene(config: GenConfig, scene_id: int) -> Scene:
    """Build one scene; deterministic in (config, scene_id)."""
    rng = np.random.default_rng(config.seed + scene_id)
    placed = _place_objects(config, rng)

    chunks = []
    labels = []
    for obj in placed:
        dist = float(np.linalg.norm(obj.center_xy))
        area = archetype_surface_area(obj.kind, obj.dims)
        n = surface_point_count(config.density_at_10m, area, dist)
        local = _object_local_points(obj.kind, n, obj.dims, rng)
        noise = rng.normal(0.0, SURFACE_SIGMA, size=local.shape)
        np.clip(noise, -3.0 * SURFACE_SIGMA, 3.0 * SURFACE_SIGMA, out=noise)
        local = local + noise
        c, s = math.cos(obj.yaw), math.sin(obj.yaw)
        world = np.empty_like(local)
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + obj.center_xy[0]
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + obj.center_xy[1]
        world[:, 2] = local[:, 2]
        chunks.append(world)
        if obj.class_id is not None:
            height = obj.dims[2]
            labels.append(
                ObjectLabel(
                    class_id=obj.class_id,
                    center=np.array([obj.center_xy[0], obj.center_xy[1], height / 2.0]),
                    size=np.asarray(obj.dims),
                    yaw=obj.yaw,
                )
            )

    if config.n_ground > 0:
        ground = np.empty((config.n_ground, 3))
        ground[:, 0] = rng.uniform(-config.extent, config.extent, config.n_ground)
        ground[:, 1] = rng.uniform(-config.extent, config.extent, config.n_ground)
        # strictly non-positive z keeps ground returns out of every box interior
        gz = rng.normal(0.0, SURFACE_SIGMA, config.n_ground)
        ground[:, 2] = -np.abs(np.clip(gz, -3.0 * SURFACE_SIGMA, 3.0 * SURFACE_SIGMA))
        chunks.append(ground)

    xyz = np.concatenate(chunks, axis=0)
    intensity = rng.uniform(0.0, 1.0, size=xyz.shape[0])
    return Scene(cloud=PointCloud(xyz, intensity), labels=labels, scene_id=scene_id)


# ---------------------------------------------------------------------------
# Dataset materialization

MANIFEST_FIELDS = ["scene_id", "file", "split", "n_car", "n_ped", "n_cyc", "n_clutter", "n_points"]


def split_of(scene_id: int) -> str:
    """Deterministic 80/20 train/val split by scene_id."""
    return "val" if scene_id % 5 == 4 else "train"


def generate_dataset(
    config: GenConfig, n_scenes: int, out_dir, seed: Optional[int] = None
) -> list[dict]:
    """Write n_scenes .dscene files plus manifest.csv; returns manifest rows."""
    if seed is not None:
        config = replace(config, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for scene_id in range(n_scenes):
        scene = generate_scene(config, scene_id)
        fname = f"scene_{scene_id:05d}.dscene"
        _atomic_write_bytes(os.path.join(out_dir, fname), encode_scene(scene))
        n_clutter = config.n_pole + config.n_seated
        rows.append(
            {
                "scene_id": scene_id,
                "file": fname,
                "split": split_of(scene_id),
                "n_car": sum(1 for l in scene.labels if l.class_id == ObjectClass.CAR_LIKE),
                "n_ped": sum(1 for l in scene.labels if l.class_id == ObjectClass.PEDESTRIAN_LIKE),
                "n_cyc": sum(1 for l in scene.labels if l.class_id == ObjectClass.CYCLIST_LIKE),
                "n_clutter": n_clutter,
                "n_points": len(scene.cloud),
            }
        )
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _atomic_write_bytes(os.path.join(out_dir, "manifest.csv"), buf.getvalue().encode("utf-8"))
    return rows


def read_manifest(data_dir) -> list[dict]:
    path = os.path.join(data_dir, "manifest.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.csv in {data_dir}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
