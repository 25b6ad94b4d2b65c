"""Rigid-body pose algebra and SVD-based box-to-box alignment."""

from __future__ import annotations

import numpy as np

from .core import (
    InstanceBox,
    PointCloud,
    Pose,
    RigidTransform,
    ValidationError,
)


def apply_pose(pose: Pose, points: PointCloud, frame_tag: str | None = None) -> PointCloud:
    """Map each point through p' = R p + t; intensity passes through."""
    pts = np.asarray(points.points, dtype=np.float64)
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValidationError(f"non-finite input point at index {bad}")
    out = pts @ pose.rotation.T + pose.translation
    return PointCloud(out, points.intensity,
                      points.frame_tag if frame_tag is None else frame_tag)


def invert_pose(pose: Pose) -> Pose:
    """Inverse via (R^T, -R^T t); never a general matrix inversion."""
    r = pose.rotation
    return Pose.from_rt(r.T, -(r.T @ pose.translation))


def _polar_rotation(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def compose(a: Pose, b: Pose) -> Pose:
    """Matrix product a.matrix @ b.matrix, re-orthonormalized if drift > 1e-12."""
    m = a.matrix @ b.matrix
    r = m[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-12:
        r = _polar_rotation(r)
    return Pose.from_rt(r, m[:3, 3])


def relative_pose(dst: Pose, src: Pose) -> Pose:
    """Pose mapping src-local coordinates into dst-local coordinates."""
    return compose(invert_pose(dst), src)


def svd_align(src: InstanceBox, dst: InstanceBox) -> RigidTransform:
    """Kabsch alignment of the 8 canonical corners, index-matched.

    Returns (R, c) minimizing sum ||R s_k + c - d_k||^2 with det(R) = +1.
    """
    s = src.corners()
    d = dst.corners()
    s_mean = s.mean(axis=0)
    d_mean = d.mean(axis=0)
    h = (s - s_mean).T @ (d - d_mean)
    try:
        u, _, vt = np.linalg.svd(h)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"SVD did not converge during box alignment: {exc}")
    v = vt.T
    sign = np.sign(np.linalg.det(v @ u.T))
    r = v @ np.diag([1.0, 1.0, sign]) @ u.T
    c = d_mean - r @ s_mean
    return RigidTransform(r, c)


def points_in_box(points: PointCloud, box: InstanceBox, margin: float = 0.0) -> np.ndarray:
    """Indices of points within dims/2 + margin of the box, in box-local axes."""
    if margin < 0:
        raise ValidationError("margin must be >= 0")
    pts = points.points
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    local = (pts - box.center) @ box.rotation()  # R^T (p - center)
    half = box.dims / 2.0 + margin
    inside = np.all(np.abs(local) <= half, axis=1)
    return np.flatnonzero(inside)
