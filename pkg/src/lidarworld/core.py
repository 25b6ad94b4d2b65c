"""Core containers: poses, boxes, point clouds, frames, sequences and grids.

All containers validate their invariants on construction and are immutable
afterwards (arrays are made read-only), so they can be shared freely across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Optional

import numpy as np

ORTHO_TOL = 1e-9

# Ternary voxel states, ordered so that a max-merge is the right combiner.
INVALID = 0
FREE = 1
OCCUPIED = 2


class ValidationError(ValueError):
    """Raised when a container or operation precondition is violated."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_rotation(r: np.ndarray, what: str) -> None:
    drift = np.abs(r.T @ r - np.eye(3)).max()
    if drift >= ORTHO_TOL:
        raise ValidationError(
            f"{what}: rotation not orthonormal, max |R^T R - I| = {drift:.3e}"
        )
    if np.linalg.det(r) <= 0:
        raise ValidationError(f"{what}: rotation has non-positive determinant")


@dataclass(frozen=True, eq=False)
class Pose:
    """4x4 rigid transform mapping local/sensor coordinates to global."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError(f"Pose matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("Pose matrix contains non-finite entries")
        if not np.array_equal(m[3], np.array([0.0, 0.0, 0.0, 1.0])):
            raise ValidationError("Pose bottom row must be exactly (0, 0, 0, 1)")
        _check_rotation(m[:3, :3], "Pose")
        object.__setattr__(self, "matrix", _readonly(m))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation in the forward convention p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("RigidTransform needs a 3x3 rotation and 3-vector")
        _check_rotation(r, "RigidTransform")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


# Canonical corner sign pattern: x varies fastest, then y, then z.
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [+1, -1, -1],
        [-1, +1, -1],
        [+1, +1, -1],
        [-1, -1, +1],
        [+1, -1, +1],
        [-1, +1, +1],
        [+1, +1, +1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True, eq=False)
class InstanceBox:
    """Oriented box with a persistent instance identity (yaw about +z)."""

    instance_id: str
    center: np.ndarray
    dims: np.ndarray
    yaw: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        d = np.asarray(self.dims, dtype=np.float64)
        if c.shape != (3,) or d.shape != (3,):
            raise ValidationError("InstanceBox center/dims must be 3-vectors")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(d)) and np.isfinite(self.yaw)):
            raise ValidationError("InstanceBox has non-finite fields")
        if np.any(d <= 0):
            raise ValidationError(f"InstanceBox dims must be strictly positive, got {d}")
        object.__setattr__(self, "center", _readonly(c))
        object.__setattr__(self, "dims", _readonly(d))
        object.__setattr__(self, "yaw", float(self.yaw))

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        """The 8 corners in canonical order (deterministic)."""
        local = _CORNER_SIGNS * (self.dims / 2.0)
        return local @ self.rotation().T + self.center


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x 3 points (meters) with optional intensity and a frame tag."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    frame_tag: str = "ego"

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        finite = np.isfinite(p).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise ValidationError(f"PointCloud has non-finite point at index {bad}")
        object.__setattr__(self, "points", _readonly(p))
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != p.shape[0]:
                raise ValidationError(
                    f"intensity length {inten.shape[0]} != point count {p.shape[0]}"
                )
            object.__setattr__(self, "intensity", _readonly(inten))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls, frame_tag: str = "ego") -> "PointCloud":
        return cls(np.zeros((0, 3)), frame_tag=frame_tag)

    def select(self, idx) -> "PointCloud":
        inten = self.intensity[idx] if self.intensity is not None else None
        return PointCloud(self.points[idx], inten, self.frame_tag)


@dataclass(frozen=True, eq=False)
class Frame:
    """One timestamped LiDAR frame with pose, boxes and optional point labels."""

    timestamp_index: int
    pose: Pose
    sensor_origin: np.ndarray
    cloud: PointCloud
    boxes: tuple = ()
    point_instance_ids: Optional[tuple] = None

    def __post_init__(self):
        if self.timestamp_index < 0:
            raise ValidationError("timestamp_index must be >= 0")
        o = np.asarray(self.sensor_origin, dtype=np.float64)
        if o.shape != (3,) or not np.all(np.isfinite(o)):
            raise ValidationError("sensor_origin must be a finite 3-vector")
        object.__setattr__(self, "sensor_origin", _readonly(o))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.point_instance_ids is not None:
            ids = tuple(self.point_instance_ids)
            if len(ids) != len(self.cloud):
                raise ValidationError(
                    f"point_instance_ids length {len(ids)} != point count {len(self.cloud)}"
                )
            known = {b.instance_id for b in self.boxes}
            for k, iid in enumerate(ids):
                if iid is not None and iid not in known:
                    raise ValidationError(
                        f"point {k} references unknown instance '{iid}' "
                        f"at frame {self.timestamp_index}"
                    )
            object.__setattr__(self, "point_instance_ids", ids)

    def box_by_id(self, instance_id: str) -> Optional[InstanceBox]:
        for b in self.boxes:
            if b.instance_id == instance_id:
                return b
        return None


@dataclass(frozen=True, eq=False)
class Sequence:
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise ValidationError("Sequence must contain at least one frame")
        ts = [f.timestamp_index for f in frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"timestamp indices not strictly increasing: {ts}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Metric range plus voxel size; extents must divide exactly."""

    range: tuple
    voxel_size: tuple

    def __post_init__(self):
        r = tuple(float(v) for v in self.range)
        v = tuple(float(s) for s in self.voxel_size)
        if len(r) != 6 or len(v) != 3:
            raise ValidationError("GridSpec needs a 6-tuple range and 3-tuple voxel size")
        if any(s <= 0 for s in v):
            raise ValidationError("voxel sizes must be strictly positive")
        dims = []
        for ax in range(3):
            lo, hi = r[ax], r[ax + 3]
            if hi <= lo:
                raise ValidationError(f"range max <= min on axis {ax}")
            n = (hi - lo) / v[ax]
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValidationError(
                    f"extent {hi - lo} on axis {ax} is not an exact multiple "
                    f"of voxel size {v[ax]}"
                )
            dims.append(int(round(n)))
        object.__setattr__(self, "range", r)
        object.__setattr__(self, "voxel_size", v)
        object.__setattr__(self, "_dims", tuple(dims))

    @property
    def dims(self) -> tuple:
        return self._dims

    @property
    def mins(self) -> np.ndarray:
        return np.array(self.range[:3])

    @property
    def maxs(self) -> np.ndarray:
        return np.array(self.range[3:])

    def voxel_index(self, pts: np.ndarray) -> np.ndarray:
        """Floor-based voxel indices; coordinates exactly at the upper range
        clamp to the last voxel. Out-of-range points yield out-of-range indices."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((pts - self.mins) / np.array(self.voxel_size)).astype(np.int64)
        for ax in range(3):
            idx[pts[:, ax] == self.maxs[ax], ax] = self.dims[ax] - 1
        return idx

    def in_range(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return np.all((pts >= self.mins) & (pts <= self.maxs), axis=1)


DEFAULT_GRID = GridSpec(range=(-40.0, -40.0, -2.0, 40.0, 40.0, 4.0),
                        voxel_size=(0.4, 0.4, 0.4))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Dense ternary grid, shape (nx, ny, nz), values in {INVALID, FREE, OCCUPIED}."""

    spec: GridSpec
    state: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.state, dtype=np.uint8)
        if s.shape != self.spec.dims:
            raise ValidationError(
                f"grid state shape {s.shape} != spec dims {self.spec.dims}"
            )
        if s.size and s.max() > OCCUPIED:
            raise ValidationError("grid state contains values outside {0, 1, 2}")
        object.__setattr__(self, "state", _readonly(s))

    @classmethod
    def all_invalid(cls, spec: GridSpec) -> "OccupancyGrid":
        return cls(spec, np.zeros(spec.dims, dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class BevSpec:
    """x-y projection of a GridSpec."""

    range: tuple  # (x_min, y_min, x_max, y_max)
    cell_size: tuple  # (v_x, v_y)

    def __post_init__(self):
        r = tuple(float(v) for v in self.range)
        v = tuple(float(s) for s in self.cell_size)
        if len(r) != 4 or len(v) != 2:
            raise ValidationError("BevSpec needs a 4-tuple range and 2-tuple cell size")
        dims = []
        for ax in range(2):
            lo, hi, s = r[ax], r[ax + 2], v[ax]
            if s <= 0 or hi <= lo:
                raise ValidationError("BevSpec range/cell size invalid")
            n = (hi - lo) / s
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValidationError("BevSpec extent not an exact multiple of cell size")
            dims.append(int(round(n)))
        object.__setattr__(self, "range", r)
        object.__setattr__(self, "cell_size", v)
        object.__setattr__(self, "_dims", tuple(dims))

    @classmethod
    def from_grid_spec(cls, spec: GridSpec) -> "BevSpec":
        r = spec.range
        return cls((r[0], r[1], r[3], r[4]), spec.voxel_size[:2])

    @property
    def dims(self) -> tuple:
        return self._dims

    def cell_index(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        xy = pts[:, :2]
        mins = np.array(self.range[:2])
        maxs = np.array(self.range[2:])
        idx = np.floor((xy - mins) / np.array(self.cell_size)).astype(np.int64)
        for ax in range(2):
            idx[xy[:, ax] == maxs[ax], ax] = self.dims[ax] - 1
        return idx

    def in_range(self, pts: np.ndarray) -> np.ndarray:
        xy = np.asarray(pts, dtype=np.float64)[:, :2]
        mins = np.array(self.range[:2])
        maxs = np.array(self.range[2:])
        return np.all((xy >= mins) & (xy <= maxs), axis=1)


@dataclass(frozen=True, eq=False)
class BEVMask:
    """Group-level non-emptiness and the sampled mask over a BEV grid."""

    spec_2d: BevSpec
    group_nonempty: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.group_nonempty, dtype=bool)
        m = np.asarray(self.masked, dtype=bool)
        if g.shape != self.spec_2d.dims or m.shape != self.spec_2d.dims:
            raise ValidationError(
                f"BEVMask grids {g.shape}/{m.shape} do not match spec dims "
                f"{self.spec_2d.dims}"
            )
        object.__setattr__(self, "group_nonempty", _readonly(g))
        object.__setattr__(self, "masked", _readonly(m))


class CellKind(Enum):
    NONEMPTY = "nonempty"
    EMPTY_BUT_GROUP_NONEMPTY = "empty_but_group_nonempty"
    EMPTY = "empty"


def clouds_equal(a: PointCloud, b: PointCloud) -> bool:
    if a.points.shape != b.points.shape or not np.array_equal(a.points, b.points):
        return False
    if (a.intensity is None) != (b.intensity is None):
        return False
    if a.intensity is not None and not np.array_equal(a.intensity, b.intensity):
        return False
    return True


def boxes_equal(a: InstanceBox, b: InstanceBox) -> bool:
    return (
        a.instance_id == b.instance_id
        and np.array_equal(a.center, b.center)
        and np.array_equal(a.dims, b.dims)
        and a.yaw == b.yaw
    )


def frames_equal(a: Frame, b: Frame) -> bool:
    if a.timestamp_index != b.timestamp_index:
        return False
    if not np.array_equal(a.pose.matrix, b.pose.matrix):
        return False
    if not np.array_equal(a.sensor_origin, b.sensor_origin):
        return False
    if not clouds_equal(a.cloud, b.cloud):
        return False
    if len(a.boxes) != len(b.boxes) or not all(
        boxes_equal(x, y) for x, y in zip(a.boxes, b.boxes)
    ):
        return False
    return a.point_instance_ids == b.point_instance_ids


def sequences_equal(a: Sequence, b: Sequence) -> bool:
    return len(a) == len(b) and all(
        frames_equal(x, y) for x, y in zip(a.frames, b.frames)
    )


def grids_equal(a: OccupancyGrid, b: OccupancyGrid) -> bool:
    return (
        a.spec.range == b.spec.range
        and a.spec.voxel_size == b.spec.voxel_size
        and np.array_equal(a.state, b.state)
    )
