import numpy as np
import pytest

from lidarworld import (
    FREE,
    GridSpec,
    INVALID,
    OCCUPIED,
    ValidationError,
    build_inputs,
    build_labels,
    raycast,
    raycast_oracle,
    voxelize_points,
)
from lidarworld.synth import EgoTrajectory, LidarConfig, ObjectSpec, SceneConfig, generate

SPEC = GridSpec(range=(0, 0, 0, 4, 4, 4), voxel_size=(1, 1, 1))


def test_single_axis_ray():
    grid = raycast([0.5, 0.5, 0.5], [[3.5, 0.5, 0.5]], SPEC)
    assert grid.state[3, 0, 0] == OCCUPIED
    assert grid.state[0, 0, 0] == FREE
    assert grid.state[1, 0, 0] == FREE
    assert grid.state[2, 0, 0] == FREE
    assert grid.state[0, 1, 0] == INVALID


def test_endpoint_voxel_wins_over_free():
    # second ray passes through the first ray's endpoint voxel
    grid = raycast([0.5, 0.5, 0.5], [[2.5, 0.5, 0.5], [3.5, 0.5, 0.5]], SPEC)
    assert grid.state[2, 0, 0] == OCCUPIED  # endpoint of ray 1, traversed by ray 2
    assert grid.state[3, 0, 0] == OCCUPIED


def test_merge_is_order_independent():
    ends = [[3.5, 0.5, 0.5], [0.5, 3.5, 0.5], [2.5, 2.5, 2.5]]
    a = raycast([0.5, 0.5, 0.5], ends, SPEC)
    b = raycast([0.5, 0.5, 0.5], list(reversed(ends)), SPEC)
    np.testing.assert_array_equal(a.state, b.state)


def test_endpoint_outside_range_carves_free_only():
    grid = raycast([0.5, 0.5, 0.5], [[10.0, 0.5, 0.5]], SPEC)
    assert not np.any(grid.state == OCCUPIED)
    assert grid.state[3, 0, 0] == FREE  # clipped ray still traverses the grid


def test_origin_outside_range():
    grid = raycast([-2.5, 0.5, 0.5], [[1.5, 0.5, 0.5]], SPEC)
    assert grid.state[1, 0, 0] == OCCUPIED
    assert grid.state[0, 0, 0] == FREE


def test_ray_fully_outside_range_touches_nothing():
    grid = raycast([-5.0, -5.0, -5.0], [[-1.0, -1.0, -1.0]], SPEC)
    assert not np.any(grid.state != INVALID)


def test_zero_length_ray_marks_endpoint_only():
    grid = raycast([1.5, 1.5, 1.5], [[1.5, 1.5, 1.5]], SPEC)
    assert grid.state[1, 1, 1] == OCCUPIED
    assert np.sum(grid.state != INVALID) == 1


def test_every_occupied_voxel_contains_an_endpoint():
    rng = np.random.default_rng(0)
    spec = GridSpec(range=(-5, -5, -5, 5, 5, 5), voxel_size=(0.5, 0.5, 0.5))
    ends = rng.uniform(-6, 6, (500, 3))
    grid = raycast([0.1, 0.2, 0.3], ends, spec)
    endpoint_voxels = voxelize_points(ends, spec)
    occupied = {tuple(v) for v in np.argwhere(grid.state == OCCUPIED)}
    assert occupied <= endpoint_voxels


def test_matches_oracle_on_random_rays():
    rng = np.random.default_rng(1)
    spec = GridSpec(range=(-4, -4, -4, 4, 4, 4), voxel_size=(0.4, 0.4, 0.4))
    origin = np.array([0.13, -0.41, 0.27])
    ends = rng.uniform(-5, 5, (400, 3))
    _, flags = raycast_oracle(origin, ends, spec)
    keep = ends[~flags]
    grid = raycast(origin, keep, spec)
    oracle, _ = raycast_oracle(origin, keep, spec)
    np.testing.assert_array_equal(grid.state, oracle.state)


def test_raycast_rejects_non_finite_origin():
    with pytest.raises(ValidationError):
        raycast([np.nan, 0, 0], [[1, 1, 1]], SPEC)


def test_voxelize_points_ignores_out_of_range():
    vox = voxelize_points([[0.5, 0.5, 0.5], [9.0, 0.5, 0.5]], SPEC)
    assert vox == {(0, 0, 0)}


def test_upper_boundary_point_clamps_to_last_voxel():
    vox = voxelize_points([[4.0, 4.0, 4.0]], SPEC)
    assert vox == {(3, 3, 3)}


def _toy_sequence():
    return generate(SceneConfig(
        num_frames=7,
        ego=EgoTrajectory(speed=0.5),
        objects=(ObjectSpec("a", dims=(2.0, 2.0, 1.5), center=(8.0, 2.0, 0.75),
                            velocity=(0.4, 0.0, 0.0)),),
        lidar=LidarConfig(num_azimuth=90, num_elevation=8),
        rng_seed=0,
    ))


def test_build_inputs_window_and_frame():
    seq = _toy_sequence()
    inputs = build_inputs(seq, cur=3, n_pre=2)
    assert len(inputs) == 3
    # frame cur maps through the identity: unchanged coordinates
    np.testing.assert_allclose(inputs[-1].points, seq.frames[3].cloud.points,
                               atol=1e-12)
    with pytest.raises(ValidationError):
        build_inputs(seq, cur=1, n_pre=3)


def test_build_labels_count_and_window_clamp():
    seq = _toy_sequence()
    spec = GridSpec(range=(-20, -20, -2, 20, 20, 4), voxel_size=(0.5, 0.5, 0.5))
    labels = build_labels(seq, cur=3, n_pre=2, n_post=3, spec=spec)
    assert len(labels) == 4  # cur .. cur+3
    for g in labels:
        assert np.any(g.state == OCCUPIED)
    with pytest.raises(ValidationError):
        build_labels(seq, cur=5, n_pre=2, n_post=3, spec=spec)


def test_build_labels_raw_mode_differs_for_moving_objects():
    seq = _toy_sequence()
    spec = GridSpec(range=(-20, -20, -2, 20, 20, 4), voxel_size=(0.5, 0.5, 0.5))
    aligned = build_labels(seq, cur=3, n_pre=2, n_post=2, spec=spec)
    raw = build_labels(seq, cur=3, n_pre=2, n_post=2, spec=spec,
                       use_transformed=False)
    assert any(
        not np.array_equal(a.state, r.state) for a, r in zip(aligned, raw)
    )
