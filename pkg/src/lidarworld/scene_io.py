"""On-disk formats: sequence directories, occupancy grid files, tensor files.

Layout of a sequence directory:
    manifest.json                  num_frames, frame file names, grid defaults
    frame_<i>.pts                  binary point cloud (LWPC)
    poses.json                     per-frame 4x4 row-major pose matrices
    origins.json                   per-frame sensor origin 3-vectors
    boxes.json                     per-frame box lists
    point_instance_ids_<i>.json    sparse point-index -> instance id map
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    BEVMask,
    DEFAULT_GRID,
    Frame,
    GridSpec,
    InstanceBox,
    OccupancyGrid,
    PointCloud,
    Pose,
    Sequence,
    ValidationError,
)

PTS_MAGIC = b"LWPC"
GRID_MAGIC = b"LWOG"
TENSOR_MAGIC = b"LWTB"


class SceneIOError(Exception):
    """A file is missing, truncated, or has a malformed header."""


# ---------------------------------------------------------------------------
# point cloud files

def write_points(cloud: PointCloud, path) -> None:
    path = Path(path)
    n = len(cloud)
    has_int = cloud.intensity is not None
    header = PTS_MAGIC + struct.pack("<IB7x", n, 1 if has_int else 0)
    if has_int:
        data = np.column_stack([cloud.points, cloud.intensity]).astype("<f4")
    else:
        data = cloud.points.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_points(path, frame_tag: str = "ego") -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise SceneIOError(f"missing point file {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != PTS_MAGIC:
        raise SceneIOError(f"malformed point file header in {path}")
    n, has_int = struct.unpack_from("<IB", raw, 4)
    cols = 4 if has_int else 3
    expected = 16 + n * cols * 4
    if len(raw) != expected:
        raise SceneIOError(
            f"truncated point file {path}: expected {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, cols).astype(np.float64)
    if has_int:
        return PointCloud(data[:, :3], data[:, 3], frame_tag)
    return PointCloud(data, None, frame_tag)


# ---------------------------------------------------------------------------
# sequence directories

def write_sequence(seq: Sequence, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frame_files = []
    poses = []
    origins = []
    boxes = []
    for k, frame in enumerate(seq.frames):
        name = f"frame_{k}.pts"
        frame_files.append(name)
        write_points(frame.cloud, path / name)
        poses.append(frame.pose.matrix.tolist())
        origins.append(frame.sensor_origin.tolist())
        boxes.append(
            [
                {
                    "id": b.instance_id,
                    "center": b.center.tolist(),
                    "dims": b.dims.tolist(),
                    "yaw": b.yaw,
                }
                for b in frame.boxes
            ]
        )
        if frame.point_instance_ids is not None:
            sparse = {
                str(i): iid
                for i, iid in enumerate(frame.point_instance_ids)
                if iid is not None
            }
            with open(path / f"point_instance_ids_{k}.json", "w") as fh:
                json.dump(sparse, fh, sort_keys=True)
    manifest = {
        "num_frames": len(seq),
        "frames": frame_files,
        "timestamps": [f.timestamp_index for f in seq.frames],
        "grid_defaults": {
            "range": list(DEFAULT_GRID.range),
            "voxel_size": list(DEFAULT_GRID.voxel_size),
        },
    }
    for name, payload in (
        ("manifest.json", manifest),
        ("poses.json", poses),
        ("origins.json", origins),
        ("boxes.json", boxes),
    ):
        with open(path / name, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)


def _load_json(path: Path):
    if not path.exists():
        raise SceneIOError(f"missing file {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneIOError(f"malformed JSON in {path}: {exc}")


def read_sequence(path) -> Sequence:
    path = Path(path)
    manifest = _load_json(path / "manifest.json")
    try:
        num_frames = manifest["num_frames"]
        frame_files = manifest["frames"]
    except (KeyError, TypeError) as exc:
        raise SceneIOError(f"malformed manifest in {path}: missing {exc}")
    if num_frames != len(frame_files):
        raise SceneIOError(f"manifest in {path}: num_frames != number of frame files")
    timestamps = manifest.get("timestamps", list(range(num_frames)))
    poses = _load_json(path / "poses.json")
    origins = _load_json(path / "origins.json")
    boxes = _load_json(path / "boxes.json")
    if not (len(poses) == len(origins) == len(boxes) == num_frames):
        raise SceneIOError(f"per-frame file lengths disagree with manifest in {path}")

    frames = []
    for k, name in enumerate(frame_files):
        cloud = read_points(path / name)
        try:
            pose = Pose(np.array(poses[k], dtype=np.float64))
        except ValidationError as exc:
            raise ValidationError(f"poses.json frame {k}: {exc}")
        frame_boxes = tuple(
            InstanceBox(b["id"], np.array(b["center"]), np.array(b["dims"]), b["yaw"])
            for b in boxes[k]
        )
        ids = None
        ids_path = path / f"point_instance_ids_{k}.json"
        if ids_path.exists():
            sparse = _load_json(ids_path)
            ids = [None] * len(cloud)
            for key, iid in sparse.items():
                i = int(key)
                if not 0 <= i < len(cloud):
                    raise ValidationError(
                        f"{ids_path.name}: point index {i} out of range at frame {k}"
                    )
                ids[i] = iid
            ids = tuple(ids)
        try:
            frames.append(
                Frame(
                    timestamp_index=timestamps[k],
                    pose=pose,
                    sensor_origin=np.array(origins[k], dtype=np.float64),
                    cloud=cloud,
                    boxes=frame_boxes,
                    point_instance_ids=ids,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"frame {k} in {path}: {exc}")
    return Sequence(tuple(frames))


# ---------------------------------------------------------------------------
# occupancy grid files

def write_grid(grid: OccupancyGrid, path) -> None:
    spec = grid.spec
    header = GRID_MAGIC
    header += struct.pack("<9d", *spec.range, *spec.voxel_size)
    header += struct.pack("<3I", *spec.dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.state, dtype=np.uint8).tobytes())


def read_grid(path) -> OccupancyGrid:
    path = Path(path)
    if not path.exists():
        raise SceneIOError(f"missing grid file {path}")
    raw = path.read_bytes()
    hdr = 4 + 72 + 12
    if len(raw) < hdr or raw[:4] != GRID_MAGIC:
        raise SceneIOError(f"malformed grid file header in {path}")
    vals = struct.unpack_from("<9d", raw, 4)
    dims = struct.unpack_from("<3I", raw, 76)
    spec = GridSpec(range=vals[:6], voxel_size=vals[6:])
    if spec.dims != tuple(dims):
        raise SceneIOError(
            f"grid file {path}: header dims {dims} inconsistent with spec {spec.dims}"
        )
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != hdr + n:
        raise SceneIOError(
            f"grid file {path}: payload size {len(raw) - hdr} != expected {n}"
        )
    state = np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)
    return OccupancyGrid(spec, state)


def write_bev_mask(mask: BEVMask, path) -> None:
    """BEV mask as a grid file with nz = 1 (u8: 0 unmasked, 1 masked)."""
    bev = mask.spec_2d
    spec = GridSpec(
        range=(bev.range[0], bev.range[1], 0.0, bev.range[2], bev.range[3], 1.0),
        voxel_size=(bev.cell_size[0], bev.cell_size[1], 1.0),
    )
    state = mask.masked.astype(np.uint8)[:, :, None]
    write_grid(OccupancyGrid(spec, state), path)


# ---------------------------------------------------------------------------
# OCF sample directories

def write_ocf_sample(sample, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    input_files = []
    for k, cloud in enumerate(sample.inputs):
        name = f"input_{k}.pts"
        write_points(cloud, path / name)
        input_files.append(name)
    label_files = []
    for k, grid in enumerate(sample.labels):
        name = f"label_{k}.lwog"
        write_grid(grid, path / name)
        label_files.append(name)
    meta = {
        "cur_index": sample.cur_index,
        "n_pre": len(sample.inputs) - 1,
        "n_post": len(sample.labels) - 1,
        "inputs": input_files,
        "labels": label_files,
        "grid": {
            "range": list(sample.labels[0].spec.range),
            "voxel_size": list(sample.labels[0].spec.voxel_size),
        },
    }
    with open(path / "sample.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def read_ocf_sample(path):
    from .raycast import OcfSample

    path = Path(path)
    meta = _load_json(path / "sample.json")
    inputs = [read_points(path / name, frame_tag="common@cur") for name in meta["inputs"]]
    labels = [read_grid(path / name) for name in meta["labels"]]
    return OcfSample(inputs=tuple(inputs), labels=tuple(labels),
                     cur_index=meta["cur_index"])


# ---------------------------------------------------------------------------
# embedding tensor files (loss-check CLI input)

def write_tensor_file(values: np.ndarray, mask: np.ndarray, path) -> None:
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n, d = values.shape
    if mask.shape != (n,):
        raise ValidationError(f"mask length {mask.shape} != row count {n}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<II", n, d))
        fh.write(values.astype("<f4").tobytes())
        fh.write(mask.astype(np.uint8).tobytes())


def read_tensor_file(path):
    path = Path(path)
    if not path.exists():
        raise SceneIOError(f"missing tensor file {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != TENSOR_MAGIC:
        raise SceneIOError(f"malformed tensor file header in {path}")
    n, d = struct.unpack_from("<II", raw, 4)
    expected = 12 + n * d * 4 + n
    if len(raw) != expected:
        raise SceneIOError(
            f"truncated tensor file {path}: expected {expected} bytes, got {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=12, count=n * d)
    values = values.reshape(n, d).astype(np.float64)
    mask = np.frombuffer(raw, dtype=np.uint8, offset=12 + n * d * 4).astype(bool)
    return values, mask
