"""Domain types for LIDAR-like scenes plus a bit-exact file codec.

Coordinate convention: right-handed sensor frame, x forward, y left, z up,
sensor at the origin.  All coordinates are meters and stored as 64-bit
floats end to end (file, memory, math), so codec roundtrips are exact.

Scene file layout (".dscene", little-endian):

    magic "DFRM" | version u16 | scene_id u32 | point_count u32 |
    label_count u16 | point records (x, y, z, intensity as f64) |
    label records (class u8, center f64*3, size f64*3, yaw f64)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

MAGIC = b"DFRM"
VERSION = 1

_HEADER = struct.Struct("<4sHIIH")
_POINT = struct.Struct("<4d")
_LABEL = struct.Struct("<B7d")


class CodecError(Exception):
    """Base for scene file decode failures."""


class BadMagicError(CodecError):
    """File does not start with the scene magic word."""


class TruncatedError(CodecError):
    """Byte length disagrees with the declared record counts."""


class InvariantViolationError(Exception):
    """A domain type invariant does not hold."""


class ObjectClass(IntEnum):
    """Object categories; BACKGROUND is used for keypoint labels only."""

    CAR_LIKE = 0
    PEDESTRIAN_LIKE = 1
    CYCLIST_LIKE = 2
    BACKGROUND = 3


LABELABLE_CLASSES = (
    ObjectClass.CAR_LIKE,
    ObjectClass.PEDESTRIAN_LIKE,
    ObjectClass.CYCLIST_LIKE,
)


@dataclass(frozen=True)
class Point:
    """A single return: position in meters, intensity in [0, 1]."""

    x: float
    y: float
    z: float
    intensity: float


class PointCloud:
    """Ordered point set held as float64 arrays.

    xyz has shape (n, 3), intensity shape (n,); n >= 1.  Instances are
    treated as immutable: the arrays are write-locked at construction.
    """

    def __init__(self, xyz: np.ndarray, intensity: np.ndarray):
        # Copy so the write lock below never reaches back into caller arrays.
        xyz = np.array(xyz, dtype=np.float64, order="C")
        intensity = np.array(intensity, dtype=np.float64, order="C")
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise InvariantViolationError(f"xyz must be (n, 3), got {xyz.shape}")
        if intensity.shape != (xyz.shape[0],):
            raise InvariantViolationError("intensity length must match point count")
        if xyz.shape[0] < 1:
            raise InvariantViolationError("point cloud must contain at least one point")
        if not np.isfinite(xyz).all():
            raise InvariantViolationError("point coordinates must be finite")
        if intensity.min() < 0.0 or intensity.max() > 1.0:
            raise InvariantViolationError("intensity must lie in [0, 1]")
        xyz.flags.writeable = False
        intensity.flags.writeable = False
        self.xyz = xyz
        self.intensity = intensity

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def point(self, i: int) -> Point:
        return Point(*self.xyz[i], self.intensity[i])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.xyz, other.xyz) and np.array_equal(
            self.intensity, other.intensity
        )


@dataclass(frozen=True)
class ObjectLabel:
    """Oriented ground-truth box: center/size in meters, yaw about +z."""

    class_id: ObjectClass
    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64)
        size = np.array(self.size, dtype=np.float64)
        center.flags.writeable = False
        size.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        if self.class_id not in LABELABLE_CLASSES:
            raise InvariantViolationError(f"label class must be an object class, got {self.class_id}")
        if self.center.shape != (3,) or self.size.shape != (3,):
            raise InvariantViolationError("center and size must be 3-vectors")
        if not (np.isfinite(self.center).all() and np.isfinite(self.size).all()):
            raise InvariantViolationError("label geometry must be finite")
        if (self.size <= 0.0).any():
            raise InvariantViolationError("box size components must be positive")
        if not (-math.pi <= self.yaw < math.pi):
            raise InvariantViolationError(f"yaw must lie in [-pi, pi), got {self.yaw}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObjectLabel):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.size, other.size)
            and self.yaw == other.yaw
        )


@dataclass
class Scene:
    """A point cloud plus its object labels."""

    cloud: PointCloud
    labels: list[ObjectLabel]
    scene_id: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.cloud == other.cloud
            and self.labels == other.labels
        )


@dataclass
class Keypoint:
    """A sampled 3D location paired with its feature vector."""

    position: np.ndarray
    feature: np.ndarray


def encode_scene(scene: Scene) -> bytes:
    """Serialize a scene to the deterministic byte layout."""
    cloud = scene.cloud
    n_points = len(cloud)
    parts = [
        _HEADER.pack(MAGIC, VERSION, scene.scene_id, n_points, len(scene.labels))
    ]
    # tobytes() on the contiguous float64 arrays gives the little-endian
    # record stream directly on every platform this targets.
    record = np.empty((n_points, 4), dtype="<f8")
    record[:, :3] = cloud.xyz
    record[:, 3] = cloud.intensity
    parts.append(record.tobytes())
    for label in scene.labels:
        parts.append(
            _LABEL.pack(
                int(label.class_id),
                *label.center,
                *label.size,
                label.yaw,
            )
        )
    return b"".join(parts)


def decode_scene(data: bytes) -> Scene:
    """Parse scene bytes; raises a CodecError subclass on malformed input."""
    if len(data) < _HEADER.size:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise BadMagicError("not a scene file")
        raise TruncatedError(f"header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, scene_id, n_points, n_labels = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise InvariantViolationError(f"unsupported version {version}")
    expected = _HEADER.size + n_points * _POINT.size + n_labels * _LABEL.size
    if len(data) != expected:
        raise TruncatedError(f"expected {expected} bytes, got {len(data)}")

    offset = _HEADER.size
    record = np.frombuffer(data, dtype="<f8", count=4 * n_points, offset=offset)
    record = record.reshape(n_points, 4)
    offset += n_points * _POINT.size

    labels = []
    for _ in range(n_labels):
        cls, cx, cy, cz, sx, sy, sz, yaw = _LABEL.unpack_from(data, offset)
        offset += _LABEL.size
        if cls >= len(LABELABLE_CLASSES):
            raise InvariantViolationError(f"unknown class byte {cls}")
        labels.append(
            ObjectLabel(ObjectClass(cls), np.array([cx, cy, cz]), np.array([sx, sy, sz]), yaw)
        )

    cloud = PointCloud(record[:, :3].copy(), record[:, 3].copy())
    return Scene(cloud=cloud, labels=labels, scene_id=scene_id)


def write_scene(scene: Scene, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_scene(scene))


def read_scene(path) -> Scene:
    with open(path, "rb") as fh:
        return decode_scene(fh.read())


def label_keypoints(positions: np.ndarray, labels: Sequence[ObjectLabel]) -> np.ndarray:
    """Assign each position the class of the box whose open interior holds it.

    Boundary points count as BACKGROUND (strict inequalities), which keeps
    the assignment unambiguous; labels are assumed pairwise disjoint, so at
    most one box can claim a position.

    Returns an int64 array of ObjectClass values, BACKGROUND where no box
    contains the position.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise InvariantViolationError(f"positions must be (m, 3), got {positions.shape}")
    out = np.full(positions.shape[0], int(ObjectClass.BACKGROUND), dtype=np.int64)
    for label in labels:
        d = positions - label.center
        c, s = math.cos(label.yaw), math.sin(label.yaw)
        # Rotate into the box frame (inverse yaw about z).
        bx = c * d[:, 0] + s * d[:, 1]
        by = -s * d[:, 0] + c * d[:, 1]
        bz = d[:, 2]
        half = label.size / 2.0
        inside = (
            (np.abs(bx) < half[0])
            & (np.abs(by) < half[1])
            & (np.abs(bz) < half[2])
        )
        out[inside] = int(label.class_id)
    return out
