"""Oracle-equivalence and property suites runnable from the CLI and tests.

Each suite returns {"suite", "passed", "details"}; details carry the numbers
a reviewer needs to judge a failure.
"""

from __future__ import annotations

import numpy as np

from .core import (
    BevSpec,
    Frame,
    GridSpec,
    InstanceBox,
    OCCUPIED,
    OccupancyGrid,
    PointCloud,
    Pose,
    Sequence,
)
from .geometry import apply_pose, compose, invert_pose, svd_align
from .losses import (
    EmbeddingBatch,
    cosine_prediction_loss,
    finite_difference_grad,
    iou_metrics,
    l2_prediction_loss,
    masked_bce,
    sigreg,
    total_loss,
    variance_reg,
)
from .masking import MaskConfig, mask_window
from .raycast import build_labels, raycast, raycast_oracle
from .sequence_transform import transform_sequence
from .synth import (
    EgoTrajectory,
    LidarConfig,
    ObjectSpec,
    SceneConfig,
    analytic_occupancy,
    generate,
)


def _random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _random_pose(rng) -> Pose:
    return Pose.from_rt(_random_rotation(rng), rng.uniform(-10, 10, 3))


# ---------------------------------------------------------------------------

def suite_raycast(num_scenes: int = 100, rays_per_scene: int = 1000,
                  seed: int = 0) -> dict:
    """Traversal vs dense-sampling oracle on random scenes, exact match on
    non-boundary rays."""
    spec = GridSpec(range=(-10.0, -10.0, -2.0, 10.0, 10.0, 4.0),
                    voxel_size=(0.4, 0.4, 0.4))
    rng = np.random.default_rng(seed)
    mismatched_scenes = []
    total_boundary = 0
    for s in range(num_scenes):
        if s % 5 == 0:
            origin = rng.uniform([-14, -14, -4], [14, 14, 6])  # may be outside
        else:
            origin = rng.uniform([-9, -9, -1.5], [9, 9, 3.5])
        ends = rng.uniform([-12, -12, -3], [12, 12, 5], size=(rays_per_scene, 3))
        _, flags = raycast_oracle(origin, ends, spec)
        keep = ends[~flags]
        total_boundary += int(flags.sum())
        grid = raycast(origin, keep, spec)
        oracle, _ = raycast_oracle(origin, keep, spec)
        if not np.array_equal(grid.state, oracle.state):
            diff = int(np.sum(grid.state != oracle.state))
            mismatched_scenes.append({"scene": s, "mismatched_voxels": diff})
    return {
        "suite": "raycast",
        "passed": not mismatched_scenes,
        "details": {
            "num_scenes": num_scenes,
            "rays_per_scene": rays_per_scene,
            "boundary_rays_excluded": total_boundary,
            "mismatches": mismatched_scenes,
        },
    }


def suite_procrustes(num_pairs: int = 1000, seed: int = 1) -> dict:
    """Recover a random yaw+translation motion of a random box within 1e-6."""
    rng = np.random.default_rng(seed)
    worst_r = 0.0
    worst_c = 0.0
    worst_res = 0.0
    failures = 0
    for _ in range(num_pairs):
        dims = rng.uniform(0.5, 5.0, 3)
        center = rng.uniform(-10, 10, 3)
        yaw = rng.uniform(-np.pi, np.pi)
        src = InstanceBox("obj-0", center, dims, yaw)
        dyaw = rng.uniform(-np.pi, np.pi)
        c0 = rng.uniform(-5, 5, 3)
        cos, sin = np.cos(dyaw), np.sin(dyaw)
        r0 = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
        dst = InstanceBox("obj-0", r0 @ center + c0, dims, yaw + dyaw)
        rt = svd_align(src, dst)
        err_r = np.linalg.norm(rt.rotation - r0)
        err_c = np.linalg.norm(rt.translation - c0)
        res = np.abs(rt.apply(src.corners()) - dst.corners()).max()
        worst_r = max(worst_r, err_r)
        worst_c = max(worst_c, err_c)
        worst_res = max(worst_res, res)
        if err_r > 1e-6 or err_c > 1e-6:
            failures += 1
    return {
        "suite": "procrustes",
        "passed": failures == 0,
        "details": {
            "num_pairs": num_pairs,
            "failures": failures,
            "worst_rotation_frobenius": worst_r,
            "worst_translation": worst_c,
            "worst_corner_residual": worst_res,
        },
    }


def static_world_sequence(num_frames: int = 10, num_points: int = 400,
                          seed: int = 2) -> Sequence:
    """A static world observed from a moving ego: the same global points
    (and one static box) re-expressed in each frame's local coordinates."""
    rng = np.random.default_rng(seed)
    pts_global = rng.uniform([-15, -15, 0], [15, 15, 3], size=(num_points, 3))
    box_global = InstanceBox("obj-0", np.array([5.0, 2.0, 1.0]),
                             np.array([3.0, 2.0, 2.0]), 0.4)
    local = (pts_global - box_global.center) @ box_global.rotation()
    in_box = np.all(np.abs(local) <= box_global.dims / 2.0, axis=1)
    ids_global = tuple("obj-0" if b else None for b in in_box)

    frames = []
    for i in range(num_frames):
        yaw = 0.08 * i
        cos, sin = np.cos(yaw), np.sin(yaw)
        r = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
        t = np.array([0.9 * i, 0.3 * i, 1.5])
        pose = Pose.from_rt(r, t)
        inv = invert_pose(pose)
        pts_local = pts_global @ inv.rotation.T + inv.translation
        box_local = InstanceBox(
            "obj-0",
            inv.rotation @ box_global.center + inv.translation,
            box_global.dims,
            box_global.yaw - yaw,
        )
        frames.append(
            Frame(
                timestamp_index=i,
                pose=pose,
                sensor_origin=np.zeros(3),
                cloud=PointCloud(pts_local, frame_tag="ego"),
                boxes=(box_local,),
                point_instance_ids=ids_global,
            )
        )
    return Sequence(tuple(frames))


def suite_static_scene(num_frames: int = 10, seed: int = 2) -> dict:
    """Transform + common-frame mapping of a static world must make all
    frames' clouds coincide within 1e-6 per coordinate."""
    seq = static_world_sequence(num_frames=num_frames, seed=seed)
    cur = num_frames // 2
    tr = transform_sequence(seq, cur)
    pose_cur_inv = invert_pose(seq.frames[cur].pose)
    ref = apply_pose(compose(pose_cur_inv, seq.frames[cur].pose),
                     tr.per_frame_points[cur]).points
    worst = 0.0
    for i in range(num_frames):
        rel = compose(pose_cur_inv, seq.frames[i].pose)
        mapped = apply_pose(rel, tr.per_frame_points[i]).points
        worst = max(worst, float(np.abs(mapped - ref).max()))
    return {
        "suite": "static_scene",
        "passed": worst < 1e-6,
        "details": {"num_frames": num_frames, "worst_coordinate_error": worst},
    }


def ghost_scene_config(seed: int = 3) -> SceneConfig:
    return SceneConfig(
        num_frames=11,
        ego=EgoTrajectory(speed=0.0),
        objects=(
            ObjectSpec("obj-keep", dims=(3.0, 2.0, 1.6), center=(6.0, 1.0, 0.8),
                       velocity=(0.3, 0.0, 0.0)),
            ObjectSpec("obj-ghost", dims=(2.0, 2.0, 1.6), center=(-6.0, -2.0, 0.8),
                       despawn=3),
        ),
        lidar=LidarConfig(num_azimuth=240, num_elevation=24, max_range=40.0),
        ground=True,
        rng_seed=seed,
    )


def suite_ghost_removal() -> dict:
    """An object despawning before cur must contribute zero points anywhere."""
    seq = generate(ghost_scene_config())
    cur = 5
    ghost_points_in_source = sum(
        sum(1 for iid in f.point_instance_ids if iid == "obj-ghost")
        for f in seq.frames
    )
    tr = transform_sequence(seq, cur)
    leaked = 0
    for i, prov in tr.provenance.items():
        leaked += sum(1 for _, iid in prov if iid == "obj-ghost")
    return {
        "suite": "ghost_removal",
        "passed": ghost_points_in_source > 0 and leaked == 0,
        "details": {
            "ghost_points_in_source_frames": ghost_points_in_source,
            "ghost_points_after_transform": leaked,
        },
    }


def wall_scene_config() -> SceneConfig:
    """A thin wall translating 1 m/frame past a static sensor. Geometry is
    chosen so every surface-hit voxel's center lies inside the wall."""
    return SceneConfig(
        num_frames=11,
        ego=EgoTrajectory(speed=0.0),
        objects=(
            ObjectSpec("obj-wall", dims=(3.8, 0.2, 1.4),
                       center=(-5.0, 3.125, 1.2), velocity=(1.0, 0.0, 0.0)),
        ),
        lidar=LidarConfig(num_azimuth=512, num_elevation=96, max_range=40.0,
                          elev_min=-0.28, elev_max=0.05, height=1.8),
        ground=False,
        rng_seed=0,
    )


def suite_occupancy_completion(n_pre: int = 5, n_post: int = 5) -> dict:
    """Labels of a moving box: (a) aggregation strictly beats a single-frame
    ray cast, (b) IoU >= 0.95 vs analytic occupancy at every label time."""
    cfg = wall_scene_config()
    seq = generate(cfg)
    cur = 5
    spec = GridSpec(range=(-10.0, -10.0, -2.1, 10.0, 10.0, 2.9),
                    voxel_size=(0.25, 0.25, 0.25))
    labels = build_labels(seq, cur, n_pre, n_post, spec)

    single = raycast(seq.frames[cur].sensor_origin, seq.frames[cur].cloud, spec)
    single_count = int(np.sum(single.state == OCCUPIED))
    label_count = int(np.sum(labels[0].state == OCCUPIED))

    ious = []
    for k, grid in enumerate(labels):
        occupied = analytic_occupancy(cfg, cur + k, spec,
                                      ref_pose=seq.frames[cur].pose)
        pred = np.zeros(spec.dims, dtype=bool)
        for idx in occupied:
            pred[idx] = True
        iou_full, _ = iou_metrics(pred, grid)
        ious.append(iou_full)
    passed = label_count > single_count and all(v >= 0.95 for v in ious)
    return {
        "suite": "occupancy_completion",
        "passed": passed,
        "details": {
            "single_frame_occupied": single_count,
            "aggregated_occupied": label_count,
            "iou_per_label_time": ious,
        },
    }


def _masking_scene(seed: int) -> SceneConfig:
    rng = np.random.default_rng(seed)
    objects = []
    for k in range(3):
        objects.append(
            ObjectSpec(
                f"obj-{k}",
                dims=tuple(rng.uniform(1.5, 4.0, 3)),
                center=tuple(np.append(rng.uniform(-12, 12, 2), 1.0)),
                yaw=float(rng.uniform(-np.pi, np.pi)),
                velocity=(float(rng.uniform(-0.5, 0.5)),
                          float(rng.uniform(-0.5, 0.5)), 0.0),
            )
        )
    return SceneConfig(
        num_frames=11,
        ego=EgoTrajectory(speed=1.0, yaw_rate=float(rng.uniform(-0.05, 0.05))),
        objects=tuple(objects),
        lidar=LidarConfig(num_azimuth=120, num_elevation=12, max_range=40.0),
        ground=True,
        rng_seed=seed,
    )


def suite_masking(num_scenes: int = 50, seed: int = 4) -> dict:
    """Anti-leakage: zero context points in masked cells across every frame;
    stratified counts exactly round(ratio * stratum size)."""
    spec = GridSpec(range=(-40.0, -40.0, -2.0, 40.0, 40.0, 4.0),
                    voxel_size=(0.4, 0.4, 0.4))
    bev = BevSpec.from_grid_spec(spec)
    leaks = 0
    count_errors = 0
    for s in range(num_scenes):
        seq = generate(_masking_scene(seed + s))
        cfg = MaskConfig(0.5, 0.5, rng_seed=seed + 1000 + s)
        result = mask_window(seq, cur=5, t_window=5, cfg=cfg, bev=bev)
        mask = result.group_mask
        n_nonempty = int(mask.group_nonempty.sum())
        n_empty = mask.group_nonempty.size - n_nonempty
        got_ne = int((mask.masked & mask.group_nonempty).sum())
        got_e = int((mask.masked & ~mask.group_nonempty).sum())
        if got_ne != round(0.5 * n_nonempty) or got_e != round(0.5 * n_empty):
            count_errors += 1
        for cloud in result.context_clouds.values():
            pts = cloud.points
            if pts.shape[0] == 0:
                continue
            inside = bev.in_range(pts)
            idx = bev.cell_index(pts[inside])
            leaks += int(mask.masked[idx[:, 0], idx[:, 1]].sum())
    return {
        "suite": "masking",
        "passed": leaks == 0 and count_errors == 0,
        "details": {
            "num_scenes": num_scenes,
            "context_points_in_masked_cells": leaks,
            "scenes_with_wrong_stratified_counts": count_errors,
        },
    }


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(fd)), 1e-12)
    return float(np.linalg.norm(analytic - fd)) / denom


def suite_loss_gradients(num_batches: int = 20, n: int = 64, d: int = 32,
                         probes: int = 48, seed: int = 5) -> dict:
    """Analytic gradients vs central finite differences on seeded batches."""
    rng = np.random.default_rng(seed)
    worst = {"cosine": 0.0, "l2": 0.0, "variance": 0.0, "sigreg": 0.0, "bce": 0.0}
    for _ in range(num_batches):
        values = rng.standard_normal((n, d)) * 1.5
        mask = rng.random(n) < 0.7
        mask[:2] = True  # keep >= 2 masked rows
        target = EmbeddingBatch(rng.standard_normal((n, d)) * 1.5, mask)
        pred = EmbeddingBatch(values, mask)
        coords = rng.choice(n * d, size=probes, replace=False)

        def check(name, fn, grads):
            fd = finite_difference_grad(fn, values, coords)
            worst[name] = max(worst[name], _rel_err(grads.ravel()[coords], fd))

        _, g = cosine_prediction_loss(pred, target)
        check("cosine",
              lambda x: cosine_prediction_loss(EmbeddingBatch(x, mask), target)[0], g)
        _, g = l2_prediction_loss(pred, target)
        check("l2",
              lambda x: l2_prediction_loss(EmbeddingBatch(x, mask), target)[0], g)

        # keep away from the hinge kink: probe only dims with |gamma - std| > 1e-3
        gamma = 1.3
        stds = np.sqrt(
            np.sum((values[mask] - values[mask].mean(0)) ** 2, axis=0)
            / (mask.sum() - 1)
            + 1e-4
        )
        safe_dims = np.flatnonzero(np.abs(gamma - stds) > 1e-3)
        var_coords = np.array(
            [c for c in coords if (c % d) in set(safe_dims)], dtype=np.int64
        )
        if var_coords.size:
            _, g = variance_reg(pred, gamma=gamma)
            fd = finite_difference_grad(
                lambda x: variance_reg(EmbeddingBatch(x, mask), gamma=gamma)[0],
                values, var_coords)
            worst["variance"] = max(
                worst["variance"], _rel_err(g.ravel()[var_coords], fd)
            )

        _, g = sigreg(pred, k=16, seed=7)
        check("sigreg",
              lambda x: sigreg(EmbeddingBatch(x, mask), k=16, seed=7)[0], g)

        spec = GridSpec(range=(0, 0, 0, 4, 4, 1), voxel_size=(1, 1, 1))
        state = rng.integers(0, 3, size=spec.dims).astype(np.uint8)
        state.ravel()[0] = OCCUPIED  # at least one valid voxel
        label = OccupancyGrid(spec, state)
        logits = rng.standard_normal(spec.dims)
        _, g = masked_bce(logits, label)
        bce_coords = rng.choice(logits.size, size=min(probes, logits.size),
                                replace=False)
        fd = finite_difference_grad(lambda x: masked_bce(x, label)[0],
                                    logits, bce_coords)
        worst["bce"] = max(worst["bce"], _rel_err(g.ravel()[bce_coords], fd))

    passed = (
        worst["cosine"] < 1e-4
        and worst["l2"] < 1e-4
        and worst["variance"] < 1e-4
        and worst["bce"] < 1e-4
        and worst["sigreg"] < 1e-3
    )
    return {
        "suite": "loss_gradients",
        "passed": passed,
        "details": {"num_batches": num_batches, "worst_relative_error": worst},
    }


def suite_collapse() -> dict:
    """Closed-form values on collapsed batches; near-zero sigreg on Gaussian."""
    rng = np.random.default_rng(6)
    collapsed = EmbeddingBatch(np.tile(rng.standard_normal(16), (32, 1)),
                               np.ones(32, dtype=bool))
    v_var, _ = variance_reg(collapsed, gamma=1.0, eps=1e-4)
    var_ok = abs(v_var - 0.99) < 1e-9

    zero = EmbeddingBatch(np.zeros((32, 16)), np.ones(32, dtype=bool))
    v_sig, _ = sigreg(zero, k=8, beta=1.0, seed=0)
    expected = 1.0 - 2.0 / np.sqrt(2.0) + 1.0 / np.sqrt(3.0)
    sig_collapsed_ok = abs(v_sig - expected) < 1e-9

    gauss = EmbeddingBatch(rng.standard_normal((4096, 16)),
                           np.ones(4096, dtype=bool))
    v_gauss, _ = sigreg(gauss, k=8, beta=1.0, seed=1)
    gauss_ok = v_gauss < 0.01
    return {
        "suite": "collapse",
        "passed": var_ok and sig_collapsed_ok and gauss_ok,
        "details": {
            "variance_collapsed": v_var,
            "sigreg_collapsed": v_sig,
            "sigreg_collapsed_expected": float(expected),
            "sigreg_gaussian_4096": v_gauss,
        },
    }


def suite_iou() -> dict:
    """Hand-enumerated 4x4x1 IoU cases and exact Eq.-style linear arithmetic."""
    spec = GridSpec(range=(0, 0, 0, 4, 4, 1), voxel_size=(1, 1, 1))
    from .core import FREE, INVALID

    state = np.full(spec.dims, FREE, dtype=np.uint8)
    state[0, 0, 0] = OCCUPIED
    state[2, 2, 0] = INVALID
    label = OccupancyGrid(spec, state)
    pred = np.zeros(spec.dims, dtype=bool)
    pred[0, 0, 0] = True
    pred[1, 1, 0] = True
    iou_full, _ = iou_metrics(pred, label)
    case1 = abs(iou_full - 0.5) < 1e-12

    # identical pred and occupancy -> (1, 1)
    pred2 = state == OCCUPIED
    f2, c2 = iou_metrics(pred2, label)
    case2 = abs(f2 - 1.0) < 1e-12 and abs(c2 - 1.0) < 1e-12

    # close region: occupancy error outside the central 2x2 does not affect it
    state3 = np.full(spec.dims, FREE, dtype=np.uint8)
    state3[1, 1, 0] = OCCUPIED
    state3[0, 3, 0] = OCCUPIED
    label3 = OccupancyGrid(spec, state3)
    pred3 = np.zeros(spec.dims, dtype=bool)
    pred3[1, 1, 0] = True
    f3, c3 = iou_metrics(pred3, label3)
    case3 = abs(f3 - 0.5) < 1e-12 and abs(c3 - 1.0) < 1e-12

    g1 = np.ones((2, 2))
    v, g = total_loss((0.5, g1), (0.05, g1), 10.0)
    eq1 = abs(v - 1.0) < 1e-12 and np.allclose(g, 11.0 * np.ones((2, 2)), atol=0)
    v2, _ = total_loss((0.5, g1), (0.05, g1), 0.001)
    eq2 = abs(v2 - 0.50005) < 1e-12
    passed = case1 and case2 and case3 and eq1 and eq2
    return {
        "suite": "iou",
        "passed": passed,
        "details": {
            "case_invalid_exclusion": case1,
            "case_perfect": case2,
            "case_close_region": case3,
            "eq_lambda_10": eq1,
            "eq_lambda_0p001": eq2,
        },
    }


SUITES = {
    "raycast": suite_raycast,
    "procrustes": suite_procrustes,
    "static": suite_static_scene,
    "ghost": suite_ghost_removal,
    "occupancy": suite_occupancy_completion,
    "masking": suite_masking,
    "gradients": suite_loss_gradients,
    "collapse": suite_collapse,
    "iou": suite_iou,
}


def run_suites(names=None) -> list:
    if names is None or names == ["all"]:
        names = list(SUITES)
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite '{name}'; known: {sorted(SUITES)}")
        results.append(SUITES[name]())
    return results
