"""Group BEV-guided masking over a multi-frame window.

All frames in the window are first expressed in the current frame's
coordinates, so one mask over the shared BEV grid applies identically at every
time step and ego motion cannot leak masked content between frames. Mask
sampling is exact-count stratified over non-empty and empty cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    BEVMask,
    BevSpec,
    CellKind,
    PointCloud,
    Sequence,
    ValidationError,
)
from .geometry import apply_pose, compose, invert_pose


@dataclass(frozen=True)
class MaskConfig:
    ratio_nonempty: float = 0.5
    ratio_empty: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("ratio_nonempty", "ratio_empty"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True, eq=False)
class MaskedFrameSet:
    group_mask: BEVMask
    per_frame_nonempty: dict
    context_clouds: dict
    target_cells: dict


def to_common_frame(seq: Sequence, cur: int, t_window: int) -> dict:
    """Each window frame's cloud expressed in frame-cur coordinates."""
    lo, hi = cur - t_window, cur + t_window
    if lo < 0 or hi > len(seq) - 1:
        raise ValidationError(
            f"window [{lo}, {hi}] out of bounds for sequence of length {len(seq)}"
        )
    pose_cur_inv = invert_pose(seq.frames[cur].pose)
    out = {}
    for i in range(lo, hi + 1):
        rel = compose(pose_cur_inv, seq.frames[i].pose)
        out[i] = apply_pose(rel, seq.frames[i].cloud, frame_tag="common@cur")
    return out


def _cell_occupancy(cloud: PointCloud, bev: BevSpec) -> np.ndarray:
    occ = np.zeros(bev.dims, dtype=bool)
    pts = cloud.points
    if pts.shape[0] == 0:
        return occ
    keep = bev.in_range(pts)
    idx = bev.cell_index(pts[keep])
    occ[idx[:, 0], idx[:, 1]] = True
    return occ


def group_occupancy(common_clouds: dict, bev: BevSpec) -> np.ndarray:
    """Cell is non-empty iff any frame contributes a point to it."""
    occ = np.zeros(bev.dims, dtype=bool)
    for cloud in common_clouds.values():
        occ |= _cell_occupancy(cloud, bev)
    return occ


def sample_group_mask(group_occ: np.ndarray, cfg: MaskConfig,
                      bev: BevSpec) -> BEVMask:
    """Exact-count stratified sampling: round(ratio * #cells) per stratum."""
    group_occ = np.asarray(group_occ, dtype=bool)
    if group_occ.shape != bev.dims:
        raise ValidationError(
            f"group occupancy shape {group_occ.shape} != BEV dims {bev.dims}"
        )
    rng = np.random.default_rng(cfg.rng_seed)
    masked = np.zeros(bev.dims, dtype=bool)
    flat_occ = group_occ.ravel()
    for stratum, ratio in ((True, cfg.ratio_nonempty), (False, cfg.ratio_empty)):
        cells = np.flatnonzero(flat_occ == stratum)
        count = int(round(ratio * cells.size))
        if count > 0:
            chosen = rng.choice(cells, size=count, replace=False)
            masked.ravel()[chosen] = True
    return BEVMask(spec_2d=bev, group_nonempty=group_occ, masked=masked)


def propagate_and_split(common_clouds: dict, group_mask: BEVMask,
                        bev: BevSpec) -> MaskedFrameSet:
    """Apply the one group mask to every frame in the window.

    Context clouds keep only points in unmasked cells (points outside the BEV
    extent belong to no cell and stay in the context). target_cells tags each
    masked cell per frame with its per-frame emptiness kind.
    """
    if bev.dims != group_mask.spec_2d.dims:
        raise ValidationError("BEV spec does not match the mask's grid")
    masked = group_mask.masked
    masked_cells = [tuple(c) for c in np.argwhere(masked)]

    per_frame_nonempty = {}
    context_clouds = {}
    target_cells = {}
    for i, cloud in common_clouds.items():
        occ = _cell_occupancy(cloud, bev)
        per_frame_nonempty[i] = occ
        pts = cloud.points
        if pts.shape[0]:
            in_bev = bev.in_range(pts)
            idx = bev.cell_index(pts)
            in_masked = in_bev & masked[
                np.clip(idx[:, 0], 0, bev.dims[0] - 1),
                np.clip(idx[:, 1], 0, bev.dims[1] - 1),
            ]
            context_clouds[i] = cloud.select(~in_masked)
        else:
            context_clouds[i] = cloud
        kinds = []
        for cell in masked_cells:
            if occ[cell]:
                kind = CellKind.NONEMPTY
            elif group_mask.group_nonempty[cell]:
                kind = CellKind.EMPTY_BUT_GROUP_NONEMPTY
            else:
                kind = CellKind.EMPTY
            kinds.append((cell, kind))
        target_cells[i] = kinds
    return MaskedFrameSet(
        group_mask=group_mask,
        per_frame_nonempty=per_frame_nonempty,
        context_clouds=context_clouds,
        target_cells=target_cells,
    )


def mask_window(seq: Sequence, cur: int, t_window: int, cfg: MaskConfig,
                bev: BevSpec) -> MaskedFrameSet:
    """Full pipeline: common frame -> group occupancy -> mask -> propagate."""
    clouds = to_common_frame(seq, cur, t_window)
    occ = group_occupancy(clouds, bev)
    mask = sample_group_mask(occ, cfg, bev)
    return propagate_and_split(clouds, mask, bev)
