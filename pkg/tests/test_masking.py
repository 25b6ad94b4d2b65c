import numpy as np
import pytest

from lidarworld import (
    BevSpec,
    CellKind,
    GridSpec,
    MaskConfig,
    ValidationError,
    mask_window,
)
from lidarworld.masking import (
    group_occupancy,
    propagate_and_split,
    sample_group_mask,
    to_common_frame,
)
from lidarworld.synth import EgoTrajectory, SceneConfig, generate

BEV = BevSpec.from_grid_spec(
    GridSpec(range=(-20, -20, -2, 20, 20, 4), voxel_size=(0.5, 0.5, 0.5))
)


def _seq(seed=0, frames=5, speed=1.0):
    return generate(SceneConfig(num_frames=frames,
                                ego=EgoTrajectory(speed=speed),
                                rng_seed=seed))


def test_mask_config_validates_ratios():
    with pytest.raises(ValidationError):
        MaskConfig(ratio_nonempty=1.5)
    with pytest.raises(ValidationError):
        MaskConfig(ratio_empty=-0.1)


def test_to_common_frame_window_bounds():
    seq = _seq(frames=5)
    with pytest.raises(ValidationError):
        to_common_frame(seq, cur=1, t_window=2)
    clouds = to_common_frame(seq, cur=2, t_window=2)
    assert sorted(clouds) == [0, 1, 2, 3, 4]
    # the current frame maps through the identity
    np.testing.assert_allclose(clouds[2].points, seq.frames[2].cloud.points,
                               atol=1e-12)


def test_group_occupancy_is_or_over_frames():
    seq = _seq(frames=5)
    clouds = to_common_frame(seq, cur=2, t_window=2)
    group = group_occupancy(clouds, BEV)
    for cloud in clouds.values():
        single = group_occupancy({0: cloud}, BEV)
        assert np.all(group[single])  # every per-frame cell is in the union


def test_sample_group_mask_exact_stratified_counts():
    rng = np.random.default_rng(3)
    occ = rng.random(BEV.dims) < 0.3
    for ratio_ne, ratio_e in ((0.5, 0.5), (0.25, 0.1), (1.0, 0.0)):
        mask = sample_group_mask(occ, MaskConfig(ratio_ne, ratio_e, 7), BEV)
        n_ne = int(occ.sum())
        n_e = occ.size - n_ne
        assert int((mask.masked & occ).sum()) == round(ratio_ne * n_ne)
        assert int((mask.masked & ~occ).sum()) == round(ratio_e * n_e)


def test_sample_group_mask_deterministic_in_seed():
    occ = np.zeros(BEV.dims, dtype=bool)
    occ[10:20, 30:50] = True
    a = sample_group_mask(occ, MaskConfig(0.5, 0.5, 42), BEV)
    b = sample_group_mask(occ, MaskConfig(0.5, 0.5, 42), BEV)
    c = sample_group_mask(occ, MaskConfig(0.5, 0.5, 43), BEV)
    assert np.array_equal(a.masked, b.masked)
    assert not np.array_equal(a.masked, c.masked)


def test_context_points_never_in_masked_cells():
    seq = _seq(seed=5, frames=7, speed=1.5)
    result = mask_window(seq, cur=3, t_window=3, cfg=MaskConfig(0.5, 0.5, 1),
                         bev=BEV)
    masked = result.group_mask.masked
    for cloud in result.context_clouds.values():
        pts = cloud.points
        inside = BEV.in_range(pts)
        idx = BEV.cell_index(pts[inside])
        assert not masked[idx[:, 0], idx[:, 1]].any()


def test_out_of_bev_points_stay_in_context():
    seq = _seq(seed=2, frames=3, speed=12.0)  # fast ego pushes points far out
    result = mask_window(seq, cur=1, t_window=1, cfg=MaskConfig(1.0, 1.0, 0),
                         bev=BEV)
    # with everything masked, context = exactly the out-of-BEV points
    for i, cloud in result.context_clouds.items():
        if len(cloud) == 0:
            continue
        assert not BEV.in_range(cloud.points).any()


def test_target_cell_kinds():
    seq = _seq(seed=1, frames=5)
    result = mask_window(seq, cur=2, t_window=2, cfg=MaskConfig(0.5, 0.5, 9),
                         bev=BEV)
    group = result.group_mask.group_nonempty
    for i, cells in result.target_cells.items():
        occ = result.per_frame_nonempty[i]
        for cell, kind in cells:
            assert result.group_mask.masked[cell]
            if kind is CellKind.NONEMPTY:
                assert occ[cell]
            elif kind is CellKind.EMPTY_BUT_GROUP_NONEMPTY:
                assert not occ[cell] and group[cell]
            else:
                assert not occ[cell] and not group[cell]


def test_masked_cell_kinds_cover_all_masked_cells():
    seq = _seq(seed=4, frames=5)
    result = mask_window(seq, cur=2, t_window=2, cfg=MaskConfig(0.5, 0.5, 11),
                         bev=BEV)
    n_masked = int(result.group_mask.masked.sum())
    for cells in result.target_cells.values():
        assert len(cells) == n_masked
