"""Deterministic synthetic scenes: moving ego, moving boxes, simulated LiDAR.

LiDAR is a fixed azimuth/elevation ray fan intersected exactly against box
surfaces and an optional ground plane, so every generated point lies exactly
on a surface and all outputs are reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Frame,
    GridSpec,
    InstanceBox,
    PointCloud,
    Pose,
    Sequence,
    ValidationError,
)
from .geometry import apply_pose, invert_pose


@dataclass(frozen=True)
class EgoTrajectory:
    speed: float = 0.0  # meters per frame, along current heading
    yaw_rate: float = 0.0  # radians per frame


@dataclass(frozen=True)
class ObjectSpec:
    instance_id: str
    dims: tuple
    center: tuple  # global, at spawn
    yaw: float = 0.0
    velocity: tuple = (0.0, 0.0, 0.0)  # meters per frame
    spawn: int = 0
    despawn: int = 10**9  # exclusive

    def __post_init__(self):
        if self.despawn <= self.spawn:
            raise ValidationError("object despawn must be after spawn")

    def box_at(self, frame: int) -> InstanceBox:
        c = np.asarray(self.center) + np.asarray(self.velocity) * (frame - self.spawn)
        return InstanceBox(self.instance_id, c, np.asarray(self.dims), self.yaw)

    def live_at(self, frame: int) -> bool:
        return self.spawn <= frame < self.despawn


@dataclass(frozen=True)
class LidarConfig:
    num_azimuth: int = 180
    num_elevation: int = 16
    max_range: float = 60.0
    elev_min: float = -0.40
    elev_max: float = 0.05
    height: float = 1.8  # sensor height above ground, meters

    def __post_init__(self):
        if self.num_azimuth < 1 or self.num_elevation < 1:
            raise ValidationError("ray counts must be >= 1")


@dataclass(frozen=True)
class SceneConfig:
    num_frames: int = 11
    ego: EgoTrajectory = field(default_factory=EgoTrajectory)
    objects: tuple = ()
    lidar: LidarConfig = field(default_factory=LidarConfig)
    ground: bool = True
    rng_seed: int = 0

    def to_json(self) -> dict:
        return {
            "num_frames": self.num_frames,
            "ego": {"speed": self.ego.speed, "yaw_rate": self.ego.yaw_rate},
            "objects": [
                {
                    "instance_id": o.instance_id,
                    "dims": list(o.dims),
                    "center": list(o.center),
                    "yaw": o.yaw,
                    "velocity": list(o.velocity),
                    "spawn": o.spawn,
                    "despawn": o.despawn,
                }
                for o in self.objects
            ],
            "lidar": {
                "num_azimuth": self.lidar.num_azimuth,
                "num_elevation": self.lidar.num_elevation,
                "max_range": self.lidar.max_range,
                "elev_min": self.lidar.elev_min,
                "elev_max": self.lidar.elev_max,
                "height": self.lidar.height,
            },
            "ground": self.ground,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SceneConfig":
        return cls(
            num_frames=data["num_frames"],
            ego=EgoTrajectory(**data["ego"]),
            objects=tuple(
                ObjectSpec(
                    instance_id=o["instance_id"],
                    dims=tuple(o["dims"]),
                    center=tuple(o["center"]),
                    yaw=o["yaw"],
                    velocity=tuple(o["velocity"]),
                    spawn=o["spawn"],
                    despawn=o["despawn"],
                )
                for o in data["objects"]
            ),
            lidar=LidarConfig(**data["lidar"]),
            ground=data["ground"],
            rng_seed=data["rng_seed"],
        )


def ego_pose(cfg: SceneConfig, frame: int) -> Pose:
    """Ego pose integrated step-wise from (speed, yaw_rate)."""
    pos = np.zeros(3)
    yaw = 0.0
    for _ in range(frame):
        pos += cfg.ego.speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        yaw += cfg.ego.yaw_rate
    c, s = np.cos(yaw), np.sin(yaw)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t = np.array([pos[0], pos[1], cfg.lidar.height])
    return Pose.from_rt(r, t)


def _ray_fan(lidar: LidarConfig) -> np.ndarray:
    az = np.arange(lidar.num_azimuth) * (2.0 * np.pi / lidar.num_azimuth)
    if lidar.num_elevation == 1:
        el = np.array([(lidar.elev_min + lidar.elev_max) / 2.0])
    else:
        el = np.linspace(lidar.elev_min, lidar.elev_max, lidar.num_elevation)
    azg, elg = np.meshgrid(az, el, indexing="ij")
    cos_el = np.cos(elg)
    dirs = np.stack(
        [cos_el * np.cos(azg), cos_el * np.sin(azg), np.sin(elg)], axis=-1
    )
    return dirs.reshape(-1, 3)


def _ray_box_hits(origin, dirs, box: InstanceBox):
    """Slab test in the box frame; returns hit distances (inf = miss)."""
    r = box.rotation()
    o = (origin - box.center) @ r  # R^T (o - c)
    d = dirs @ r
    half = box.dims / 2.0
    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    miss = np.zeros(dirs.shape[0], dtype=bool)
    for ax in range(3):
        dax = d[:, ax]
        parallel = np.abs(dax) < 1e-15
        miss |= parallel & (np.abs(o[ax]) > half[ax])
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half[ax] - o[ax]) / dax
            tb = (half[ax] - o[ax]) / dax
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        valid = ~parallel
        t_near[valid] = np.maximum(t_near[valid], lo[valid])
        t_far[valid] = np.minimum(t_far[valid], hi[valid])
    t = np.where(t_near > 1e-9, t_near, t_far)  # allow origin inside the box
    hit = ~miss & (t_near <= t_far) & (t > 1e-9)
    return np.where(hit, t, np.inf)


def generate(cfg: SceneConfig) -> Sequence:
    """Simulate the configured scene into a Sequence (fully deterministic)."""
    dirs_local = _ray_fan(cfg.lidar)
    frames = []
    for i in range(cfg.num_frames):
        pose = ego_pose(cfg, i)
        origin = pose.translation
        dirs = dirs_local @ pose.rotation.T
        n_rays = dirs.shape[0]
        best_t = np.full(n_rays, np.inf)
        best_obj = np.full(n_rays, -1, dtype=np.int64)

        live = [o for o in cfg.objects if o.live_at(i)]
        boxes = [o.box_at(i) for o in live]
        for oi, box in enumerate(boxes):
            t = _ray_box_hits(origin, dirs, box)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_obj[closer] = oi
        if cfg.ground:
            dz = dirs[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                tg = np.where(dz < 0, -origin[2] / dz, np.inf)
            closer = (tg > 1e-9) & (tg < best_t)
            best_t[closer] = tg[closer]
            best_obj[closer] = -1

        hit = best_t <= cfg.lidar.max_range
        t_hit = best_t[hit]
        pts_global = origin + dirs[hit] * t_hit[:, None]
        pose_inv = invert_pose(pose)
        pts_ego = pts_global @ pose_inv.rotation.T + pose_inv.translation
        ids = tuple(
            boxes[oi].instance_id if oi >= 0 else None for oi in best_obj[hit]
        )
        # boxes recorded in ego coordinates (yaw-only ego rotation)
        ego_yaw = np.arctan2(pose.rotation[1, 0], pose.rotation[0, 0])
        ego_boxes = tuple(
            InstanceBox(
                b.instance_id,
                pose_inv.rotation @ b.center + pose_inv.translation,
                b.dims,
                b.yaw - ego_yaw,
            )
            for b in boxes
        )
        frames.append(
            Frame(
                timestamp_index=i,
                pose=pose,
                sensor_origin=np.zeros(3),
                cloud=PointCloud(pts_ego, frame_tag="ego"),
                boxes=ego_boxes,
                point_instance_ids=ids,
            )
        )
    return Sequence(tuple(frames))


def analytic_occupancy(cfg: SceneConfig, frame: int, spec: GridSpec,
                       ref_pose: Pose | None = None) -> set:
    """Exact voxel-center occupancy of the live boxes (and ground) at a frame.

    Voxel centers are interpreted in ref_pose's local coordinates when given
    (e.g. the current frame's pose), otherwise in global coordinates.
    """
    nx, ny, nz = spec.dims
    mins = spec.mins
    v = np.array(spec.voxel_size)
    ix, iy, iz = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    centers = mins + (np.stack([ix, iy, iz], axis=-1) + 0.5) * v
    centers = centers.reshape(-1, 3)
    if ref_pose is not None:
        centers = centers @ ref_pose.rotation.T + ref_pose.translation

    inside = np.zeros(centers.shape[0], dtype=bool)
    for obj in cfg.objects:
        if not obj.live_at(frame):
            continue
        box = obj.box_at(frame)
        local = (centers - box.center) @ box.rotation()
        inside |= np.all(np.abs(local) <= box.dims / 2.0, axis=1)
    if cfg.ground:
        inside |= np.abs(centers[:, 2]) <= v[2] / 2.0
    flat = np.flatnonzero(inside)
    return {
        (int(f // (ny * nz)), int((f // nz) % ny), int(f % nz)) for f in flat
    }


def write_scene(cfg: SceneConfig, path) -> Sequence:
    """Generate and persist a scene; returns the generated sequence."""
    from .scene_io import write_sequence

    seq = generate(cfg)
    path = Path(path)
    write_sequence(seq, path)
    with open(path / "scene_config.json", "w") as fh:
        json.dump(cfg.to_json(), fh, sort_keys=True, indent=1)
    return seq
