"""Ghost removal and cross-frame moving-instance alignment.

For a chosen current frame, every other frame is rewritten so that points of
instances shared with the current frame are moved onto the current instance
pose (via rigid corner alignment), points of instances absent at the current
frame are deleted, and background points pass through untouched. Outputs stay
in each source frame's local coordinates so they aggregate through the normal
pose chain afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Frame, InstanceBox, PointCloud, Pose, Sequence, ValidationError
from .geometry import apply_pose, compose, invert_pose, points_in_box, svd_align

FALLBACK_MARGIN = 0.1  # meters, for frames without stored per-point labels


@dataclass(frozen=True, eq=False)
class TransformedSequence:
    """Per-frame clouds after ghost removal and instance alignment.

    provenance[i][k] is (source frame index, instance id or None) for point k
    of per_frame_points[i].
    """

    cur_index: int
    per_frame_points: dict
    provenance: dict

    def __post_init__(self):
        for i, cloud in self.per_frame_points.items():
            if len(self.provenance[i]) != len(cloud):
                raise ValidationError(f"provenance length mismatch at frame {i}")


def assign_instance_ids(frame: Frame) -> np.ndarray:
    """Per-point instance id (object array, None = background).

    Uses stored labels when present; otherwise falls back to box containment
    with a 0.1 m margin, ties broken by smallest box volume.
    """
    n = len(frame.cloud)
    ids = np.full(n, None, dtype=object)
    if frame.point_instance_ids is not None:
        ids[:] = frame.point_instance_ids
        return ids
    order = sorted(frame.boxes, key=lambda b: float(np.prod(b.dims)), reverse=True)
    for box in order:  # smallest volume assigned last wins ties
        idx = points_in_box(frame.cloud, box, margin=FALLBACK_MARGIN)
        ids[idx] = box.instance_id
    return ids


def ghost_filter(frame: Frame, boxes_cur) -> PointCloud:
    """Drop points of instances absent from boxes_cur (id equality)."""
    keep = _ghost_keep_mask(frame, boxes_cur)
    return frame.cloud.select(keep)


def _ghost_keep_mask(frame: Frame, boxes_cur) -> np.ndarray:
    cur_ids = {b.instance_id for b in boxes_cur}
    ids = assign_instance_ids(frame)
    keep = np.ones(len(frame.cloud), dtype=bool)
    for k, iid in enumerate(ids):
        if iid is not None and iid not in cur_ids:
            keep[k] = False
    return keep


def align_instance(points_j: PointCloud, box_i: InstanceBox, box_cur: InstanceBox,
                   pose_i: Pose, pose_cur: Pose) -> PointCloud:
    """Move an instance's frame-i points onto its current-frame box.

    The corner alignment (R, c) maps frame-i locals onto the current frame's
    box footprint; mapping the result through inv(pose_i) . pose_cur brings it
    back into frame-i local coordinates.
    """
    if box_i.instance_id != box_cur.instance_id:
        raise ValidationError(
            f"instance id mismatch: '{box_i.instance_id}' vs '{box_cur.instance_id}'"
        )
    rt = svd_align(box_i, box_cur)
    moved = PointCloud(rt.apply(points_j.points), points_j.intensity,
                       points_j.frame_tag)
    rel = compose(invert_pose(pose_i), pose_cur)
    return apply_pose(rel, moved)


def transform_sequence(seq: Sequence, cur: int, id_start: int = 0,
                       id_end: int | None = None) -> TransformedSequence:
    """Ghost-filter and instance-align every frame toward frame `cur`."""
    L = len(seq)
    if not 0 <= cur < L:
        raise ValidationError(f"cur={cur} out of range for sequence of length {L}")
    if id_end is None:
        id_end = L - 1
    if not (0 <= id_start <= cur <= id_end <= L - 1):
        raise ValidationError(
            f"invalid window [{id_start}, {id_end}] for cur={cur}, L={L}"
        )
    frame_cur = seq.frames[cur]
    cur_boxes = {b.instance_id: b for b in frame_cur.boxes}

    per_frame = {}
    provenance = {}
    for i in range(id_start, id_end + 1):
        frame = seq.frames[i]
        ids = assign_instance_ids(frame)
        if i == cur:
            per_frame[i] = frame.cloud
            provenance[i] = [(i, iid) for iid in ids]
            continue
        pts = frame.cloud.points.copy()
        keep = np.ones(len(frame.cloud), dtype=bool)
        for box in frame.boxes:
            sel = np.flatnonzero(ids == box.instance_id)
            if sel.size == 0:
                continue
            box_cur = cur_boxes.get(box.instance_id)
            if box_cur is None:
                keep[sel] = False  # ghost instance: absent at cur
                continue
            try:
                aligned = align_instance(
                    frame.cloud.select(sel), box, box_cur, frame.pose, frame_cur.pose
                )
            except ValidationError as exc:
                raise ValidationError(
                    f"frame {i}, instance '{box.instance_id}': {exc}"
                )
            pts[sel] = aligned.points
        inten = frame.cloud.intensity
        per_frame[i] = PointCloud(
            pts[keep], None if inten is None else inten[keep], frame.cloud.frame_tag
        )
        provenance[i] = [(i, iid) for iid, k in zip(ids, keep) if k]
    return TransformedSequence(cur_index=cur, per_frame_points=per_frame,
                               provenance=provenance)
