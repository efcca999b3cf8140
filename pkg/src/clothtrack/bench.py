"""Ablation matrix over synthetic seeds.

Each seed gets its own synthetic trajectory.  Calibration of a segment depends
only on the segment's start state, so every method run on a seed shares one
calibration cache; in particular the first segment is calibrated once.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datagen import ScenarioConfig, evaluate, generate_synthetic_trajectories
from .tracker import (
    ABLATIONS,
    CalibrationGrid,
    PseudoLabelDataset,
    TrackerConfig,
    calibrate,
    calibration_key,
    track_trajectory,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "CLOTHTRACK_WORKERS"
METHODS = ("ours",) + ABLATIONS
# extra cells used by the robustness and collision studies
EXTRA_METHODS = ("ours_median_cal", "no_tto2_median_cal", "ours_beta0")

CSV_FIELDS = (
    "seed", "method", "segments", "visible_chamfer", "final_chamfer", "mesh_error",
    "collisions", "line_search_retries", "calibration", "partial", "runtime_s",
)


def method_config(name: str, base: TrackerConfig = TrackerConfig()) -> TrackerConfig:
    if name == "ours":
        return replace(base, ablation=None)
    if name in ABLATIONS:
        return replace(base, ablation=name)
    if name == "ours_median_cal":
        return replace(base, ablation=None, calibration_pick="median")
    if name == "no_tto2_median_cal":
        return replace(base, ablation="no_tto2", calibration_pick="median")
    if name == "ours_beta0":
        return replace(base, ablation=None, tto1=replace(base.tto1, beta=0.0), tto2=replace(base.tto2, beta=0.0))
    raise ValueError(f"unknown bench method {name!r}")


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


def _prepare_seed(args):
    scenario, grid = args
    mesh, trajs = generate_synthetic_trajectories(scenario)
    cache = {}
    for traj in trajs:
        seg = traj.segments[0] if traj.segments else None
        if seg is not None and len(seg):
            cal = calibrate(mesh, traj.initial_state, seg.actions, seg.observations[-1], grid, scenario.camera)
            cache[calibration_key(traj.trajectory_id, 0, traj.initial_state)] = cal
    return mesh, trajs, cache


def _run_cell(args):
    seed, method, scenario, grid, base_config, mesh, trajs, cache = args
    config = method_config(method, base_config)
    t0 = time.perf_counter()
    records = []
    cache = dict(cache)
    for traj in trajs:
        recs, _ = track_trajectory(mesh, traj, config, scenario.camera, grid, calibration_cache=cache)
        records.extend(recs)
    runtime = time.perf_counter() - t0
    report = evaluate(mesh, PseudoLabelDataset(records), trajs, scenario.camera)
    seg = [r for r in report["records"] if r["segment_index"] >= 0]
    seg_records = [r for r in records if r.segment_index >= 0]

    def mean(key):
        vals = [r[key] for r in seg if key in r and np.isfinite(r[key])]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "seed": seed,
        "method": method,
        "segments": len(seg),
        "visible_chamfer": mean("visible_chamfer"),
        "final_chamfer": mean("final_chamfer"),
        "mesh_error": mean("mesh_error"),
        "collisions": int(sum(r["collisions"] for r in seg)),
        "line_search_retries": int(sum(sum(r.diagnostics.get("line_search_retries", [])) for r in seg_records)),
        "calibration": ";".join(
            "/".join(f"{v:g}" for v in r.diagnostics["calibration"])
            for r in seg_records if r.diagnostics.get("calibration")
        ),
        "partial": int(sum(r["partial"] for r in seg)),
        "runtime_s": runtime,
    }


def run_bench(
    seeds: Sequence[int],
    methods: Sequence[str] = METHODS,
    scenario: ScenarioConfig = ScenarioConfig(),
    grid: CalibrationGrid = CalibrationGrid(),
    config: TrackerConfig = TrackerConfig(),
    workers: Optional[int] = None,
) -> list[dict]:
    """One row per (seed, method), ordered by seed then by ``methods``."""
    for m in methods:
        method_config(m, config)
    workers = worker_count() if workers is None else workers
    seeds = [int(s) for s in seeds]
    scenarios = [replace(scenario, rng_seed=s) for s in seeds]

    def pool_map(fn, items):
        if workers <= 1:
            return [fn(it) for it in items]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))

    prepared = pool_map(_prepare_seed, [(sc, grid) for sc in scenarios])
    cells = [
        (seed, m, sc, grid, config, *prep)
        for seed, sc, prep in zip(seeds, scenarios, prepared)
        for m in methods
    ]
    rows = pool_map(_run_cell, cells)
    return sorted(rows, key=lambda r: (seeds.index(r["seed"]), list(methods).index(r["method"])))


def write_bench_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})


def read_bench_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("seed", "segments", "collisions", "line_search_retries", "partial"):
            r[k] = int(r[k])
        for k in ("visible_chamfer", "final_chamfer", "mesh_error", "runtime_s"):
            r[k] = float(r[k])
    return rows


def summarize(rows: Sequence[dict], key: str = "visible_chamfer") -> dict:
    """Median of ``key`` per method."""
    out = {}
    for m in dict.fromkeys(r["method"] for r in rows):
        vals = [r[key] for r in rows if r["method"] == m and np.isfinite(r[key])]
        out[m] = float(np.median(vals)) if vals else float("nan")
    return out
