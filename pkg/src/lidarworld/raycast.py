"""Ray-cast voxelization: sparse network inputs and completed occupancy labels.

State semantics: voxels strictly before a ray endpoint become FREE, the
endpoint voxel becomes OCCUPIED, untouched voxels stay INVALID. Rays merge
under max with INVALID < FREE < OCCUPIED, so results are order-independent.
Rays and endpoints are clipped to the grid range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import (
    FREE,
    INVALID,
    OCCUPIED,
    GridSpec,
    OccupancyGrid,
    PointCloud,
    Sequence,
    ValidationError,
)
from .geometry import apply_pose, compose, invert_pose


@dataclass(frozen=True, eq=False)
class OcfSample:
    """Inputs (past clouds, current-frame coords) and labels (future grids)."""

    inputs: tuple
    labels: tuple
    cur_index: int

    def __post_init__(self):
        if not self.inputs or not self.labels:
            raise ValidationError("OcfSample needs at least one input and one label")
        spec0 = self.labels[0].spec
        for g in self.labels:
            if g.spec.range != spec0.range or g.spec.voxel_size != spec0.voxel_size:
                raise ValidationError("OcfSample label grids must share one GridSpec")


@njit(cache=True, nogil=True)
def _clip_segment(o, e, rmin, rmax):
    """Clip segment o->e (t in [0,1]) to the range box. Returns (hit, t0, t1)."""
    t0 = 0.0
    t1 = 1.0
    for ax in range(3):
        d = e[ax] - o[ax]
        if abs(d) < 1e-15:
            if o[ax] < rmin[ax] or o[ax] > rmax[ax]:
                return False, 0.0, 0.0
        else:
            ta = (rmin[ax] - o[ax]) / d
            tb = (rmax[ax] - o[ax]) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t0 > t1:
        return False, 0.0, 0.0
    return True, t0, t1


@njit(cache=True, nogil=True)
def _voxel_of(p, rmin, vsize, dims, out):
    for ax in range(3):
        i = int(np.floor((p[ax] - rmin[ax]) / vsize[ax]))
        if i < 0:
            i = 0
        if i >= dims[ax]:
            i = dims[ax] - 1
        out[ax] = i


@njit(cache=True, nogil=True)
def _point_in_range(p, rmin, rmax):
    for ax in range(3):
        if p[ax] < rmin[ax] or p[ax] > rmax[ax]:
            return False
    return True


@njit(cache=True, nogil=True)
def _traverse_rays(origin, ends, rmin, rmax, vsize, dims, state):
    """Amanatides-Woo traversal of every ray, merging states under max."""
    ev = np.empty(3, dtype=np.int64)
    cur = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    tmax = np.empty(3, dtype=np.float64)
    tdelta = np.empty(3, dtype=np.float64)
    p0 = np.empty(3, dtype=np.float64)
    big = 1e300
    for r in range(ends.shape[0]):
        e = ends[r]
        hit, t0, t1 = _clip_segment(origin, e, rmin, rmax)
        point_in = _point_in_range(e, rmin, rmax)
        if point_in:
            _voxel_of(e, rmin, vsize, dims, ev)
        if not hit:
            continue
        if t1 > 1.0:
            t1 = 1.0
        dlen = 0.0
        for ax in range(3):
            dlen += (e[ax] - origin[ax]) ** 2
        if dlen < 1e-24:
            # zero-length ray: endpoint voxel only
            if point_in:
                state[ev[0], ev[1], ev[2]] = OCCUPIED
            continue
        for ax in range(3):
            p0[ax] = origin[ax] + t0 * (e[ax] - origin[ax])
        _voxel_of(p0, rmin, vsize, dims, cur)
        for ax in range(3):
            d = e[ax] - origin[ax]
            if d > 0:
                step[ax] = 1
                bound = rmin[ax] + (cur[ax] + 1) * vsize[ax]
                tmax[ax] = (bound - origin[ax]) / d
                tdelta[ax] = vsize[ax] / d
            elif d < 0:
                step[ax] = -1
                bound = rmin[ax] + cur[ax] * vsize[ax]
                tmax[ax] = (bound - origin[ax]) / d
                tdelta[ax] = -vsize[ax] / d
            else:
                step[ax] = 0
                tmax[ax] = big
                tdelta[ax] = big
        guard = dims[0] + dims[1] + dims[2] + 4
        for _ in range(guard):
            if point_in and cur[0] == ev[0] and cur[1] == ev[1] and cur[2] == ev[2]:
                break
            if state[cur[0], cur[1], cur[2]] < FREE:
                state[cur[0], cur[1], cur[2]] = FREE
            m = 0
            if tmax[1] < tmax[m]:
                m = 1
            if tmax[2] < tmax[m]:
                m = 2
            if tmax[m] > t1:
                break
            cur[m] += step[m]
            if cur[m] < 0 or cur[m] >= dims[m]:
                break
            tmax[m] += tdelta[m]
        if point_in:
            state[ev[0], ev[1], ev[2]] = OCCUPIED


@njit(cache=True, nogil=True)
def _sample_rays(origin, ends, rmin, rmax, vsize, dims, state, flags):
    """Dense-sampling reference: samples each ray at step min(voxel)/10 and
    bisects gaps until consecutive samples land in the same or face-adjacent
    voxels (their union is convex, so no voxel can hide between them).

    Writes the same ternary semantics as the traversal. flags[r] is set when
    the ray grazes a voxel edge or face within float resolution (those rays
    are excluded from equivalence comparisons).
    """
    vmin = vsize[0]
    if vsize[1] < vmin:
        vmin = vsize[1]
    if vsize[2] < vmin:
        vmin = vsize[2]
    base_step = vmin / 10.0

    ev = np.empty(3, dtype=np.int64)
    va = np.empty(3, dtype=np.int64)
    vm = np.empty(3, dtype=np.int64)
    p = np.empty(3, dtype=np.float64)
    stack_t = np.empty((4096, 2), dtype=np.float64)
    stack_d = np.empty(4096, dtype=np.int64)

    for r in range(ends.shape[0]):
        e = ends[r]
        hit, t0, t1 = _clip_segment(origin, e, rmin, rmax)
        point_in = _point_in_range(e, rmin, rmax)
        if point_in:
            _voxel_of(e, rmin, vsize, dims, ev)
            # endpoint on a voxel face is a tie case
            for ax in range(3):
                f = (e[ax] - rmin[ax]) / vsize[ax]
                if abs(f - np.floor(f + 0.5)) * vsize[ax] < 1e-9:
                    flags[r] = True
        if not hit:
            continue
        if t1 > 1.0:
            t1 = 1.0
        dlen = 0.0
        for ax in range(3):
            dlen += (e[ax] - origin[ax]) ** 2
        dlen = np.sqrt(dlen)
        if dlen < 1e-12:
            if point_in:
                state[ev[0], ev[1], ev[2]] = OCCUPIED
            continue
        for ax in range(3):
            d = e[ax] - origin[ax]
            if abs(d) < 1e-12:
                # ray parallel to the grid planes of this axis: flag if it
                # runs along a plane
                f = (origin[ax] - rmin[ax]) / vsize[ax]
                if abs(f - np.floor(f + 0.5)) * vsize[ax] < 1e-9:
                    flags[r] = True

        seg_len = dlen * (t1 - t0)
        nseg = int(np.ceil(seg_len / base_step))
        if nseg < 1:
            nseg = 1
        dt = (t1 - t0) / nseg

        ta = t0
        for ax in range(3):
            p[ax] = origin[ax] + ta * (e[ax] - origin[ax])
        _voxel_of(p, rmin, vsize, dims, va)
        if not (point_in and va[0] == ev[0] and va[1] == ev[1] and va[2] == ev[2]):
            if state[va[0], va[1], va[2]] < FREE:
                state[va[0], va[1], va[2]] = FREE

        for k in range(nseg):
            tb = t0 + (k + 1) * dt
            if k == nseg - 1:
                tb = t1
            # resolve the gap (ta, tb) with a bisection stack
            top = 0
            stack_t[top, 0] = ta
            stack_t[top, 1] = tb
            stack_d[top] = 0
            while top >= 0:
                ga = stack_t[top, 0]
                gb = stack_t[top, 1]
                depth = stack_d[top]
                top -= 1
                for ax in range(3):
                    p[ax] = origin[ax] + ga * (e[ax] - origin[ax])
                _voxel_of(p, rmin, vsize, dims, va)
                for ax in range(3):
                    p[ax] = origin[ax] + gb * (e[ax] - origin[ax])
                _voxel_of(p, rmin, vsize, dims, vm)
                diff = (
                    abs(va[0] - vm[0]) + abs(va[1] - vm[1]) + abs(va[2] - vm[2])
                )
                if diff == 0:
                    continue
                if diff == 1:
                    if not (
                        point_in
                        and vm[0] == ev[0]
                        and vm[1] == ev[1]
                        and vm[2] == ev[2]
                    ):
                        if state[vm[0], vm[1], vm[2]] < FREE:
                            state[vm[0], vm[1], vm[2]] = FREE
                    continue
                if depth > 60:
                    # cannot separate the crossings: edge-grazing ray
                    flags[r] = True
                    continue
                gm = 0.5 * (ga + gb)
                top += 1
                stack_t[top, 0] = gm
                stack_t[top, 1] = gb
                stack_d[top] = depth + 1
                top += 1
                stack_t[top, 0] = ga
                stack_t[top, 1] = gm
                stack_d[top] = depth + 1
            ta = tb
        if point_in:
            state[ev[0], ev[1], ev[2]] = OCCUPIED


def _as_end_array(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return np.ascontiguousarray(points.points, dtype=np.float64)
    return np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))


def _grid_arrays(spec: GridSpec):
    rmin = np.array(spec.range[:3], dtype=np.float64)
    rmax = np.array(spec.range[3:], dtype=np.float64)
    vsize = np.array(spec.voxel_size, dtype=np.float64)
    dims = np.array(spec.dims, dtype=np.int64)
    return rmin, rmax, vsize, dims


def raycast(origin, points, spec: GridSpec) -> OccupancyGrid:
    """Exact grid-walking ray cast from one origin to every point."""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(origin)):
        raise ValidationError("raycast origin must be finite")
    ends = _as_end_array(points)
    rmin, rmax, vsize, dims = _grid_arrays(spec)
    state = np.zeros(spec.dims, dtype=np.uint8)
    if ends.shape[0]:
        _traverse_rays(origin, ends, rmin, rmax, vsize, dims, state)
    return OccupancyGrid(spec, state)


def raycast_oracle(origin, points, spec: GridSpec):
    """Independent dense-sampling/bisection reference for raycast.

    Returns (grid, boundary_flags); rays flagged True graze voxel faces or
    edges within float resolution and carry no equivalence guarantee.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    ends = _as_end_array(points)
    rmin, rmax, vsize, dims = _grid_arrays(spec)
    state = np.zeros(spec.dims, dtype=np.uint8)
    flags = np.zeros(ends.shape[0], dtype=np.bool_)
    if ends.shape[0]:
        _sample_rays(origin, ends, rmin, rmax, vsize, dims, state, flags)
    return OccupancyGrid(spec, state), flags


def voxelize_points(points, spec: GridSpec) -> set:
    """Voxel indices containing at least one in-range point."""
    pts = _as_end_array(points)
    if pts.shape[0] == 0:
        return set()
    keep = spec.in_range(pts)
    idx = spec.voxel_index(pts[keep])
    return {tuple(row) for row in idx}


def build_inputs(seq: Sequence, cur: int, n_pre: int) -> list:
    """Raw clouds of frames cur-n_pre..cur mapped into current-frame coords."""
    if cur - n_pre < 0:
        raise ValidationError(
            f"input window underflows sequence start: cur={cur}, n_pre={n_pre}"
        )
    if not 0 <= cur < len(seq):
        raise ValidationError(f"cur={cur} out of range for sequence of length {len(seq)}")
    pose_cur_inv = invert_pose(seq.frames[cur].pose)
    out = []
    for i in range(cur - n_pre, cur + 1):
        rel = compose(pose_cur_inv, seq.frames[i].pose)
        out.append(apply_pose(rel, seq.frames[i].cloud, frame_tag="common@cur"))
    return out


def build_labels(seq: Sequence, cur: int, n_pre: int, n_post: int,
                 spec: GridSpec, use_transformed: bool = True) -> list:
    """Completed-occupancy label grids for times cur..cur+n_post.

    For each label time i, points of the clamped window
    [max(i-n_pre, 0), min(i+n_post, L-1)] are instance-aligned toward frame i
    (so moving objects sit at their time-i pose), mapped into current-frame
    coordinates, and ray cast from the time-i sensor origin expressed in
    current-frame coordinates. With use_transformed=False the raw
    (non-aligned) window clouds are aggregated instead.
    """
    from .sequence_transform import transform_sequence

    L = len(seq)
    if cur + n_post > L - 1:
        raise ValidationError(
            f"label window exceeds sequence end: cur={cur}, n_post={n_post}, L={L}"
        )
    pose_cur_inv = invert_pose(seq.frames[cur].pose)
    grids = []
    for i in range(cur, cur + n_post + 1):
        k_start = max(i - n_pre, 0)
        k_end = min(i + n_post, L - 1)
        if use_transformed:
            tr = transform_sequence(seq, i, id_start=k_start, id_end=k_end)
            window = tr.per_frame_points
        else:
            window = {j: seq.frames[j].cloud for j in range(k_start, k_end + 1)}
        parts = []
        for j in range(k_start, k_end + 1):
            rel = compose(pose_cur_inv, seq.frames[j].pose)
            parts.append(apply_pose(rel, window[j]).points)
        aggr = np.vstack(parts) if parts else np.zeros((0, 3))
        rel_i = compose(pose_cur_inv, seq.frames[i].pose)
        origin_i = rel_i.rotation @ seq.frames[i].sensor_origin + rel_i.translation
        grids.append(raycast(origin_i, aggr, spec))
    return grids


def build_ocf_sample(seq: Sequence, cur: int, n_pre: int, n_post: int,
                     spec: GridSpec, use_transformed: bool = True) -> OcfSample:
    inputs = build_inputs(seq, cur, n_pre)
    labels = build_labels(seq, cur, n_pre, n_post, spec, use_transformed)
    return OcfSample(inputs=tuple(inputs), labels=tuple(labels), cur_index=cur)
