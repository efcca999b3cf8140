"""The eleven acceptance criteria, each at its stated tolerance and time budget.

Criteria 8, 9 and 10 share one run of the benchmark matrix: ten seeds with
off-grid hidden parameters and sensor noise, one pick-and-place segment per
seed, every method plus the median-calibration and beta = 0 cells.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from clothtrack.bench import EXTRA_METHODS, METHODS, run_bench, summarize, worker_count
from clothtrack.datagen import ScenarioConfig, generate_synthetic_trajectories, read_dataset, write_dataset
from clothtrack.dynamics import SimParams, dyn_step, simulate_segment
from clothtrack.mesh import ClothState, LowLevelAction, build_grid_cloth
from clothtrack.optimize import TtoConfig, chamfer_correspondences, rigidity_loss, tto_objective
from clothtrack.sensing import chamfer_bidirectional, chamfer_one_way
from clothtrack.tracker import (
    COLLISION_THRESHOLD,
    CalibrationGrid,
    TrackerConfig,
    calibrate,
    generate_pseudo_dataset,
    track_segment,
)

pytestmark = pytest.mark.filterwarnings("ignore:scene fully occluded")

BENCH_SEEDS = range(10)
BENCH_SCENARIO = ScenarioConfig(segments_per_trajectory=1, substeps_per_action=20)


@pytest.fixture(scope="module")
def bench_rows():
    t0 = time.perf_counter()
    rows = run_bench(BENCH_SEEDS, list(METHODS) + list(EXTRA_METHODS), BENCH_SCENARIO, CalibrationGrid(), TrackerConfig(),
                     workers=worker_count())
    return rows, time.perf_counter() - t0


# ---------------------------------------------------------------------------


def test_constants_fidelity(acceptance):
    c = TrackerConfig()
    g = CalibrationGrid()
    checks = {
        "gamma": c.gamma == 0.7,
        "retries": c.max_line_search_retries == 10,
        "alpha": c.tto1.alpha == 1.0 and c.tto2.alpha == 1.0,
        "beta": c.tto1.beta == 10.0 and c.tto2.beta == 10.0,
        "iterations": c.tto1.iterations == 200 and c.tto2.iterations == 200,
        "grid": (g.stiffness, g.dynamic_friction, g.particle_friction)
        == ((0.2, 0.55, 0.9, 1.25, 1.6), (0.5, 1.4, 2.3, 3.2, 4.1, 5.0), (0.5, 1.4, 2.3, 3.2, 4.1, 5.0)),
        "collision threshold": COLLISION_THRESHOLD == 0.005,
    }
    bad = [k for k, ok in checks.items() if not ok]
    acceptance.record(1, not bad, "all defaults exact" if not bad else f"mismatch: {bad}")
    assert not bad


def test_gradient_correctness(acceptance):
    rng = np.random.default_rng(20240)
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for _ in range(50):
        nv = 20
        pairs = [(i, j) for i in range(nv) for j in range(i + 1, nv)]
        edges = np.array([pairs[k] for k in rng.choice(len(pairs), 30, replace=False)])
        pred = rng.uniform(-0.05, 0.05, (nv, 3))
        vis = np.sort(rng.choice(nv, 12, replace=False))
        obs = rng.uniform(-0.05, 0.05, (15, 3))
        d = rng.normal(0, 0.005, (nv, 3))
        corr = chamfer_correspondences(obs, pred[vis] + d[vis])
        _, grad = tto_objective(pred, d, obs, vis, edges, 1.0, 10.0, corr)
        fd = np.zeros_like(d)
        for idx in np.ndindex(d.shape):
            dp, dm = d.copy(), d.copy()
            dp[idx] += h
            dm[idx] -= h
            fd[idx] = (tto_objective(pred, dp, obs, vis, edges, 1.0, 10.0, corr)[0]
                       - tto_objective(pred, dm, obs, vis, edges, 1.0, 10.0, corr)[0]) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-8)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10
    acceptance.record(2, ok, f"max relative error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 10 s)")
    assert ok


def test_chamfer_oracle_equivalence(acceptance):
    rng = np.random.default_rng(77)
    worst, elapsed = 0.0, 0.0
    for _ in range(100):
        a = rng.normal(size=(int(rng.integers(1, 200)), 3))
        b = rng.normal(size=(int(rng.integers(1, 200)), 3))
        # brute force over every pair; only the library calls count against the budget
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        ab, ba = d2.min(axis=1).mean(), d2.min(axis=0).mean()
        t0 = time.perf_counter()
        got = (chamfer_one_way(a, b), chamfer_one_way(b, a), chamfer_bidirectional(a, b))
        elapsed += time.perf_counter() - t0
        for g, ref in zip(got, (ab, ba, 0.5 * (ab + ba))):
            worst = max(worst, abs(g - ref) / max(abs(ref), 1e-300))
    ok = worst <= 1e-12 and elapsed < 5
    acceptance.record(3, ok, f"max relative deviation {worst:.1e} (<= 1e-12), {elapsed:.2f} s (< 5 s)")
    assert ok


def test_rigidity_properties(acceptance):
    mesh = build_grid_cloth(6, 6, 0.01)
    rng = np.random.default_rng(5)
    d = rng.normal(size=(mesh.num_vertices, 3))
    uniform = rigidity_loss(np.tile(rng.normal(size=3), (mesh.num_vertices, 1)), mesh.edges)
    base = rigidity_loss(d, mesh.edges)
    homog = max(abs(rigidity_loss(c * d, mesh.edges) - c * c * base) / (c * c * base) for c in (0.5, 2.0, -3.0))
    single = rigidity_loss(np.array([[0.0, 0, 0], [1.0, 0, 0]]), [[0, 1]])
    ok = uniform <= 1e-15 and homog <= 1e-12 and single == 1.0
    acceptance.record(4, ok, f"translation {uniform:.1e}, homogeneity rel {homog:.1e}, single edge {single}")
    assert ok


def test_dynamics_invariants(acceptance):
    t0 = time.perf_counter()
    mesh = build_grid_cloth(25, 25, 0.006)
    rng = np.random.default_rng(8)
    grasp_err, ground_min, com_err = 0.0, np.inf, 0.0
    for trial in range(5):
        state = mesh.rest_state()
        v = int(rng.integers(mesh.num_vertices))
        delta = rng.uniform(-0.004, 0.004, 3)
        delta[2] = abs(delta[2])
        for k in range(15):
            a = LowLevelAction(v, delta, True) if k < 10 else None
            nxt = dyn_step(mesh, state, SimParams(), a)
            if a is not None:
                grasp_err = max(grasp_err, float(np.abs(nxt.positions[v] - state.positions[v] - delta).max()))
            free = np.ones(mesh.num_vertices, bool)
            if a is not None:
                free[v] = False
            ground_min = min(ground_min, float(nxt.positions[free, 2].min()))
            state = nxt
    internal = SimParams(gravity=0.0, dynamic_friction=0.0, particle_friction=0.0)
    for trial in range(5):
        pos = mesh.vertices + rng.normal(0, 1e-3, mesh.vertices.shape) + [0.0, 0.0, 0.3]
        s0 = ClothState(pos, np.zeros_like(pos))
        s1 = dyn_step(mesh, s0, internal)
        com_err = max(com_err, float(np.abs(s1.positions.mean(0) - s0.positions.mean(0)).max()))
    acts = [LowLevelAction(0, np.array([0.002, 0.001, 0.003]), True)] * 10 + [LowLevelAction.idle()] * 5
    r1 = simulate_segment(mesh, mesh.rest_state(), SimParams(), acts)[-1]
    r2 = simulate_segment(mesh, mesh.rest_state(), SimParams(), acts)[-1]
    identical = r1.positions.tobytes() == r2.positions.tobytes() and r1.velocities.tobytes() == r2.velocities.tobytes()
    elapsed = time.perf_counter() - t0
    ok = grasp_err <= 1e-12 and ground_min >= -1e-6 and com_err <= 1e-9 and identical and elapsed < 30
    acceptance.record(5, ok, f"grasp {grasp_err:.1e}, min height {ground_min:.1e}, CoM drift {com_err:.1e}, "
                             f"bit-identical {identical}, {elapsed:.1f} s (< 30 s)")
    assert ok


def test_closed_loop_self_consistency(acceptance):
    t0 = time.perf_counter()
    sc = ScenarioConfig(rng_seed=3, segments_per_trajectory=1)
    sc = replace(sc, camera=replace(sc.camera, depth_noise_sigma=0.0, dropout_rate=0.0))
    mesh, trajs = generate_synthetic_trajectories(sc)
    traj = trajs[0]
    seg = traj.segments[0]
    res = track_segment(mesh, traj.initial_state, seg.actions, seg.observations, sc.hidden_params, TrackerConfig(), sc.camera)
    elapsed = time.perf_counter() - t0
    ok = res.final_chamfer < 1e-6 and elapsed < 120
    acceptance.record(6, ok, f"final visible Chamfer {res.final_chamfer:.2e} m^2 (< 1e-6), 25x25 cloth, "
                             f"{len(seg)} steps, {elapsed:.1f} s (< 120 s)")
    assert ok


def test_calibration_plant_and_recover(acceptance):
    t0 = time.perf_counter()
    grid = CalibrationGrid()
    combos = grid.combinations()
    recovered = []
    for seed in range(10):
        planted = combos[np.random.default_rng(1000 + seed).integers(len(combos))]
        sc = ScenarioConfig(rng_seed=seed, segments_per_trajectory=1, policy="drag", substeps_per_action=20,
                            hidden_params=grid.apply(SimParams(), planted))
        mesh, trajs = generate_synthetic_trajectories(sc)
        seg = trajs[0].segments[0]
        cal = calibrate(mesh, trajs[0].initial_state, seg.actions, seg.observations[-1], grid, sc.camera)
        best = cal.objectives[cal.ranked()[0]]
        recovered.append(cal.combo == planted or cal.objective_of(planted) <= 1.05 * best)
    elapsed = time.perf_counter() - t0
    ok = sum(recovered) >= 9 and elapsed < 600
    acceptance.record(7, ok, f"{sum(recovered)}/10 seeds recovered the planted combination "
                             f"(>= 9), {elapsed:.0f} s (< 600 s)")
    assert ok


def test_ablation_ordering(acceptance, bench_rows):
    rows, elapsed = bench_rows
    pre = summarize(rows, "visible_chamfer")
    final = summarize(rows, "final_chamfer")
    mesh_err = summarize(rows, "mesh_error")
    variants = ("ours",) + tuple(m for m in METHODS if m != "ours")
    conds = {
        "ours<no_pseudo_action": pre["ours"] < pre["no_pseudo_action"],
        "ours<no_dyn_init": pre["ours"] < pre["no_dyn_init"],
        "ours<no_tto2(final)": final["ours"] < final["no_tto2"],
        "no_act_cond worst": all(pre["no_act_cond"] > pre[m] for m in variants if m != "no_act_cond"),
    }
    ok = all(conds.values()) and elapsed < 1800
    medians = ", ".join(f"{m} {pre[m]:.2e}" for m in variants)
    acceptance.record(8, ok, f"median pre-TTO2 Chamfer: {medians}; ours final {final['ours']:.2e} vs no_tto2 "
                             f"{final['no_tto2']:.2e} (full-mesh error {mesh_err['ours']:.2e} vs {mesh_err['no_tto2']:.2e}); failed: {[k for k, v in conds.items() if not v]}; "
                             f"bench {elapsed / 60:.1f} min (< 30)")
    assert ok


def _relative_degradation(rows, best_method, median_method):
    best = {r["seed"]: r["final_chamfer"] for r in rows if r["method"] == best_method}
    med = {r["seed"]: r["final_chamfer"] for r in rows if r["method"] == median_method}
    return float(np.mean([(med[s] - best[s]) / best[s] for s in best]))


def test_tto2_robustness(acceptance, bench_rows):
    rows, _ = bench_rows
    with_tto2 = _relative_degradation(rows, "ours", "ours_median_cal")
    without = _relative_degradation(rows, "no_tto2", "no_tto2_median_cal")
    ok = with_tto2 < without
    acceptance.record(9, ok, f"mean relative degradation best->median calibration: with TTO2 {with_tto2:.1%}, "
                             f"without {without:.1%}")
    assert ok


def test_collision_ablation(acceptance, bench_rows):
    rows, _ = bench_rows
    rigid = sum(r["collisions"] for r in rows if r["method"] == "ours")
    loose = sum(r["collisions"] for r in rows if r["method"] == "ours_beta0")
    ok = rigid < loose
    ratio = loose / rigid if rigid else float("inf")
    acceptance.record(10, ok, f"collisions < {COLLISION_THRESHOLD} m summed over seeds: beta=10 {rigid}, "
                              f"beta=0 {loose} ({ratio:.1f}x)")
    assert ok


def test_dataset_bookkeeping(acceptance, tmp_path):
    # full tracking of all 150 segments on a small cloth with a reduced grid and TTO budget
    sc = ScenarioConfig(rng_seed=0, num_trajectories=50, segments_per_trajectory=3, num_x=8, num_y=8, substeps_per_action=20)
    mesh, trajs = generate_synthetic_trajectories(sc)
    cfg = TrackerConfig(tto1=TtoConfig(iterations=10), tto2=TtoConfig(iterations=10))
    ds = generate_pseudo_dataset(mesh, trajs, cfg, sc.camera, CalibrationGrid((0.55, 1.25), (1.4, 3.2), (2.3,)))
    write_dataset(tmp_path, mesh, ds, sc.camera)
    _, back, manifest = read_dataset(tmp_path)
    partial = sum(r.partial for r in back.records)
    ok = len(ds) == 200 and len(back) == 200 and len(manifest["records"]) == 200 and partial == 0
    acceptance.record(11, ok, f"50 trajectories x 3 segments -> {len(back)} records (== 200), {partial} partial")
    assert ok
