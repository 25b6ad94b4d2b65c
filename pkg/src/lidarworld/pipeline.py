"""Batch execution of transform -> labels -> masks over sequence corpora.

Tasks are independent (one per (sequence, cur index)); per-sequence failures
are isolated and recorded in the run manifest. Artifacts are deterministic,
so reruns and different thread counts produce byte-identical sample files.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .core import BevSpec, DEFAULT_GRID, GridSpec
from .masking import MaskConfig, mask_window
from .raycast import build_ocf_sample
from .scene_io import write_bev_mask, write_ocf_sample, write_points, read_sequence


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def sample_checksum(path) -> str:
    """sha256 over the sorted (name, digest) pairs of a sample directory."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(_file_digest(f).encode())
        h.update(b"\n")
    return h.hexdigest()


def discover_sequences(corpus_dir) -> list:
    corpus_dir = Path(corpus_dir)
    out = [p for p in sorted(corpus_dir.iterdir())
           if p.is_dir() and (p / "manifest.json").exists()]
    return out


def derive_seed(base_seed: int, *parts) -> int:
    """Stable per-task seed from the base seed and task identity."""
    h = hashlib.sha256()
    h.update(str(base_seed).encode())
    for p in parts:
        h.update(b"\0")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little")


def _run_tasks(tasks, worker, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, tasks))
    return [worker(t) for t in tasks]


def _write_manifest(out_dir: Path, params: dict, samples, failures) -> None:
    manifest = {
        "params": params,
        "samples": sorted(samples, key=lambda s: s["path"]),
        "failures": sorted(failures, key=lambda f: f["sequence"]),
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def run_ocf_prep(corpus_dir, out_dir, n_pre: int = 5, n_post: int = 5,
                 spec: GridSpec = DEFAULT_GRID, threads: int = 1) -> dict:
    """Emit an OcfSample directory for every cur index with a full window."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    failures = []

    tasks = []
    for seq_dir in discover_sequences(corpus_dir):
        try:
            seq = read_sequence(seq_dir)
        except Exception as exc:
            failures.append({"sequence": seq_dir.name, "error": str(exc)})
            continue
        for cur in range(n_pre, len(seq) - n_post):
            tasks.append((seq_dir.name, seq, cur))

    def worker(task):
        name, seq, cur = task
        t0 = time.monotonic()
        sample_dir = out_dir / name / f"sample_{cur:04d}"
        try:
            sample = build_ocf_sample(seq, cur, n_pre, n_post, spec)
            write_ocf_sample(sample, sample_dir)
        except Exception as exc:
            return {"sequence": name, "error": f"cur={cur}: {exc}"}
        return {
            "path": sample_dir.relative_to(out_dir).as_posix(),
            "checksum": sample_checksum(sample_dir),
            "wall_ms": (time.monotonic() - t0) * 1000.0,
        }

    for res in _run_tasks(tasks, worker, threads):
        (failures if "error" in res else samples).append(res)

    params = {
        "kind": "ocf_prep",
        "n_pre": n_pre,
        "n_post": n_post,
        "grid": {"range": list(spec.range), "voxel_size": list(spec.voxel_size)},
    }
    _write_manifest(out_dir, params, samples, failures)
    return {"params": params, "samples": samples, "failures": failures}


def run_mask_prep(corpus_dir, out_dir, t_window: int = 5,
                  cfg: MaskConfig = MaskConfig(),
                  spec: GridSpec = DEFAULT_GRID, threads: int = 1) -> dict:
    """Emit group masks, context clouds and target-cell listings per cur."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bev = BevSpec.from_grid_spec(spec)
    samples = []
    failures = []

    tasks = []
    for seq_dir in discover_sequences(corpus_dir):
        try:
            seq = read_sequence(seq_dir)
        except Exception as exc:
            failures.append({"sequence": seq_dir.name, "error": str(exc)})
            continue
        for cur in range(t_window, len(seq) - t_window):
            tasks.append((seq_dir.name, seq, cur))

    def worker(task):
        name, seq, cur = task
        t0 = time.monotonic()
        sample_dir = out_dir / name / f"mask_{cur:04d}"
        try:
            seed = derive_seed(cfg.rng_seed, name, cur)
            local_cfg = MaskConfig(cfg.ratio_nonempty, cfg.ratio_empty, seed)
            result = mask_window(seq, cur, t_window, local_cfg, bev)
            sample_dir.mkdir(parents=True, exist_ok=True)
            write_bev_mask(result.group_mask, sample_dir / "group_mask.lwog")
            targets = {}
            for i in sorted(result.context_clouds):
                write_points(result.context_clouds[i],
                             sample_dir / f"context_{i}.pts")
                targets[str(i)] = [
                    {"cell": [int(c) for c in cell], "kind": kind.value}
                    for cell, kind in result.target_cells[i]
                ]
            mask = result.group_mask
            sidecar = {
                "cur_index": cur,
                "t_window": t_window,
                "seed": seed,
                "ratio_nonempty": cfg.ratio_nonempty,
                "ratio_empty": cfg.ratio_empty,
                "num_nonempty": int(mask.group_nonempty.sum()),
                "num_empty": int((~mask.group_nonempty).sum()),
                "num_masked_nonempty": int((mask.masked & mask.group_nonempty).sum()),
                "num_masked_empty": int((mask.masked & ~mask.group_nonempty).sum()),
                "target_cells": targets,
            }
            with open(sample_dir / "mask.json", "w") as fh:
                json.dump(sidecar, fh, sort_keys=True, indent=1)
        except Exception as exc:
            return {"sequence": name, "error": f"cur={cur}: {exc}"}
        return {
            "path": sample_dir.relative_to(out_dir).as_posix(),
            "checksum": sample_checksum(sample_dir),
            "wall_ms": (time.monotonic() - t0) * 1000.0,
        }

    for res in _run_tasks(tasks, worker, threads):
        (failures if "error" in res else samples).append(res)

    params = {
        "kind": "mask_prep",
        "t_window": t_window,
        "ratio_nonempty": cfg.ratio_nonempty,
        "ratio_empty": cfg.ratio_empty,
        "rng_seed": cfg.rng_seed,
        "grid": {"range": list(spec.range), "voxel_size": list(spec.voxel_size)},
    }
    _write_manifest(out_dir, params, samples, failures)
    return {"params": params, "samples": samples, "failures": failures}
