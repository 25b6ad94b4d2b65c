import json

import numpy as np
import pytest

from lidarworld import GridSpec, MaskConfig, run_mask_prep, run_ocf_prep
from lidarworld.pipeline import derive_seed, discover_sequences, sample_checksum
from lidarworld.synth import EgoTrajectory, ObjectSpec, SceneConfig, LidarConfig, write_scene

SPEC = GridSpec(range=(-20, -20, -2, 20, 20, 4), voxel_size=(0.5, 0.5, 0.5))


def _corpus(tmp_path, n_seqs=2, frames=7):
    corpus = tmp_path / "corpus"
    for s in range(n_seqs):
        cfg = SceneConfig(
            num_frames=frames,
            ego=EgoTrajectory(speed=0.5),
            objects=(ObjectSpec("a", dims=(2, 2, 1.5), center=(8, 2, 0.75),
                                velocity=(0.3, 0, 0)),),
            lidar=LidarConfig(num_azimuth=60, num_elevation=8),
            rng_seed=s,
        )
        write_scene(cfg, corpus / f"seq_{s}")
    return corpus


def test_discover_sequences_finds_manifest_dirs(tmp_path):
    corpus = _corpus(tmp_path)
    (corpus / "not_a_seq").mkdir()
    found = discover_sequences(corpus)
    assert [p.name for p in found] == ["seq_0", "seq_1"]


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert derive_seed(0, "a", 1) != derive_seed(0, "a", 2)
    assert derive_seed(0, "a", 1) != derive_seed(1, "a", 1)


def test_run_ocf_prep_writes_samples_and_manifest(tmp_path):
    corpus = _corpus(tmp_path)
    out = tmp_path / "out"
    result = run_ocf_prep(corpus, out, n_pre=2, n_post=2, spec=SPEC)
    # eligible cur indices: 2, 3, 4 per sequence
    assert len(result["samples"]) == 6
    assert result["failures"] == []
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["params"]["n_pre"] == 2
    assert len(manifest["samples"]) == 6
    for s in manifest["samples"]:
        assert sample_checksum(out / s["path"]) == s["checksum"]


def test_run_ocf_prep_deterministic_across_runs_and_threads(tmp_path):
    corpus = _corpus(tmp_path, n_seqs=1, frames=6)
    outs = []
    for name, threads in (("o1", 1), ("o2", 1), ("o8", 8)):
        out = tmp_path / name
        run_ocf_prep(corpus, out, n_pre=2, n_post=2, spec=SPEC,
                     threads=threads)
        manifest = json.loads((out / "run_manifest.json").read_text())
        outs.append({s["path"]: s["checksum"] for s in manifest["samples"]})
    assert outs[0] == outs[1] == outs[2]


def test_run_ocf_prep_isolates_bad_sequence(tmp_path):
    corpus = _corpus(tmp_path)
    (corpus / "broken").mkdir()
    (corpus / "broken" / "manifest.json").write_text("{not json")
    result = run_ocf_prep(corpus, tmp_path / "out", n_pre=2, n_post=2,
                          spec=SPEC)
    assert len(result["samples"]) == 6  # good sequences unaffected
    assert len(result["failures"]) == 1
    assert result["failures"][0]["sequence"] == "broken"


def test_run_mask_prep_outputs_and_sidecar(tmp_path):
    corpus = _corpus(tmp_path, n_seqs=1)
    out = tmp_path / "out"
    result = run_mask_prep(corpus, out, t_window=2, cfg=MaskConfig(0.5, 0.5, 3),
                           spec=SPEC)
    assert len(result["samples"]) == 3  # cur in {2, 3, 4}
    sample_dir = out / result["samples"][0]["path"]
    sidecar = json.loads((sample_dir / "mask.json").read_text())
    assert sidecar["num_masked_nonempty"] == round(0.5 * sidecar["num_nonempty"])
    assert sidecar["num_masked_empty"] == round(0.5 * sidecar["num_empty"])
    assert (sample_dir / "group_mask.lwog").exists()
    for i in range(sidecar["cur_index"] - 2, sidecar["cur_index"] + 3):
        assert (sample_dir / f"context_{i}.pts").exists()


def test_run_mask_prep_deterministic_across_threads(tmp_path):
    corpus = _corpus(tmp_path, n_seqs=1, frames=6)
    sums = []
    for name, threads in (("m1", 1), ("m8", 8)):
        out = tmp_path / name
        run_mask_prep(corpus, out, t_window=2, cfg=MaskConfig(0.5, 0.5, 3),
                      spec=SPEC, threads=threads)
        manifest = json.loads((out / "run_manifest.json").read_text())
        sums.append({s["path"]: s["checksum"] for s in manifest["samples"]})
    assert sums[0] == sums[1]


def test_sample_checksum_changes_with_content(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "a.txt").write_text("hello")
    c1 = sample_checksum(d)
    (d / "a.txt").write_text("world")
    assert sample_checksum(d) != c1
