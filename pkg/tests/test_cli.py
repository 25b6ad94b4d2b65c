import json

import numpy as np
import pytest

from lidarworld.cli import main
from lidarworld.core import GridSpec, OccupancyGrid, OCCUPIED, FREE
from lidarworld.scene_io import write_grid, write_points, write_tensor_file
from lidarworld.core import PointCloud


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_unknown_flag_exits_one(capsys):
    code, _, err = _run(capsys, "raycast", "--bogus")
    assert code == 1
    assert "usage" in err


def test_missing_subcommand_exits_one(capsys):
    code, _, _ = _run(capsys)
    assert code == 1


def test_synth_gen_and_determinism(tmp_path, capsys):
    code, out, _ = _run(capsys, "synth-gen", "--out", str(tmp_path / "a"),
                        "--seed", "7", "--num-frames", "3", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["num_frames"] == 3 and doc["rng_seed"] == 7
    code, _, _ = _run(capsys, "synth-gen", "--out", str(tmp_path / "b"),
                      "--seed", "7", "--num-frames", "3")
    assert code == 0
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_transform_cli(tmp_path, capsys):
    _run(capsys, "synth-gen", "--out", str(tmp_path / "seq"), "--num-frames", "4")
    code, out, _ = _run(capsys, "transform", "--sequence", str(tmp_path / "seq"),
                        "--cur", "2", "--out", str(tmp_path / "tr"), "--json")
    assert code == 0
    doc = json.loads(out)
    assert sorted(doc["points_per_frame"]) == ["0", "1", "2", "3"]
    assert (tmp_path / "tr" / "provenance.json").exists()


def test_raycast_and_eval_iou(tmp_path, capsys):
    pts = PointCloud(np.array([[1.5, 0.5, 0.5]]))
    write_points(pts, tmp_path / "p.pts")
    code, out, _ = _run(capsys, "raycast", "--points", str(tmp_path / "p.pts"),
                        "--origin", "0.5", "0.5", "0.5",
                        "--out", str(tmp_path / "g.lwog"),
                        "--grid-range", "0", "0", "0", "4", "4", "4",
                        "--voxel-size", "1", "1", "1", "--json")
    assert code == 0
    assert json.loads(out)["occupied"] == 1
    # identical grids give perfect IoU
    code, out, _ = _run(capsys, "eval-iou", "--pred", str(tmp_path / "g.lwog"),
                        "--label", str(tmp_path / "g.lwog"), "--json")
    assert code == 0
    assert json.loads(out) == {"iou_full": 1.0, "iou_close": 1.0}


def test_eval_iou_missing_file_exits_two(tmp_path, capsys):
    code, _, err = _run(capsys, "eval-iou", "--pred", str(tmp_path / "x.lwog"),
                        "--label", str(tmp_path / "x.lwog"))
    assert code == 2
    assert "i/o error" in err


def test_eval_iou_shape_mismatch_exits_one(tmp_path, capsys):
    a = GridSpec(range=(0, 0, 0, 2, 2, 2), voxel_size=(1, 1, 1))
    b = GridSpec(range=(0, 0, 0, 4, 4, 4), voxel_size=(1, 1, 1))
    write_grid(OccupancyGrid.all_invalid(a), tmp_path / "a.lwog")
    write_grid(OccupancyGrid.all_invalid(b), tmp_path / "b.lwog")
    code, _, err = _run(capsys, "eval-iou", "--pred", str(tmp_path / "a.lwog"),
                        "--label", str(tmp_path / "b.lwog"))
    assert code == 1
    assert "validation error" in err


def test_loss_check_cli(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_tensor_file(rng.standard_normal((32, 8)), np.ones(32, dtype=bool),
                      tmp_path / "p.lwtb")
    write_tensor_file(rng.standard_normal((32, 8)), np.ones(32, dtype=bool),
                      tmp_path / "t.lwtb")
    code, out, _ = _run(capsys, "loss-check", "--pred", str(tmp_path / "p.lwtb"),
                        "--target", str(tmp_path / "t.lwtb"), "--json")
    assert code == 0
    doc = json.loads(out)
    for key in ("cosine", "l2", "variance", "sigreg"):
        assert doc[key]["grad_rel_err"] < 1e-3


def test_build_ocf_cli_with_config_precedence(tmp_path, capsys):
    _run(capsys, "synth-gen", "--out", str(tmp_path / "c" / "s0"),
         "--num-frames", "6")
    cfg = {"n_pre": 4, "n_post": 1,
           "grid_range": [-20, -20, -2, 20, 20, 4],
           "voxel_size": [0.5, 0.5, 0.5]}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    # flag --n-pre 2 overrides the config's 4; n_post comes from the config
    code, out, _ = _run(capsys, "build-ocf", "--corpus", str(tmp_path / "c"),
                        "--out", str(tmp_path / "o"),
                        "--config", str(tmp_path / "cfg.json"),
                        "--n-pre", "2", "--threads", "1", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["params"]["n_pre"] == 2
    assert doc["params"]["n_post"] == 1
    assert len(doc["samples"]) == 3  # cur in {2, 3, 4}


def test_build_masks_cli(tmp_path, capsys):
    _run(capsys, "synth-gen", "--out", str(tmp_path / "c" / "s0"),
         "--num-frames", "5")
    code, out, _ = _run(capsys, "build-masks", "--corpus", str(tmp_path / "c"),
                        "--out", str(tmp_path / "m"), "--t-window", "2",
                        "--threads", "1", "--json")
    assert code == 0
    doc = json.loads(out)
    assert len(doc["samples"]) == 1  # cur = 2 only
    assert doc["failures"] == []


def test_verify_cli_single_suite(capsys):
    code, out, _ = _run(capsys, "verify", "--suite", "iou", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["passed"] is True
    assert doc["suites"][0]["suite"] == "iou"


def test_json_goes_to_stdout_text_to_stderr(tmp_path, capsys):
    pts = PointCloud(np.array([[1.5, 0.5, 0.5]]))
    write_points(pts, tmp_path / "p.pts")
    code, out, err = _run(capsys, "raycast", "--points", str(tmp_path / "p.pts"),
                          "--out", str(tmp_path / "g.lwog"),
                          "--grid-range", "0", "0", "0", "4", "4", "4",
                          "--voxel-size", "1", "1", "1", "--json")
    assert code == 0
    json.loads(out)  # stdout is exactly one JSON document
    assert "raycast" in err
