"""Synthetic pick-and-place trajectories, dataset persistence and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dynamics import SimParams, dyn_step
from .mesh import (
    ClothMesh,
    ClothState,
    LowLevelAction,
    PickPlaceAction,
    Segment,
    Trajectory,
    build_grid_cloth,
    nearest_vertex,
    read_obj,
    validate_topology,
    write_obj,
)
from .sensing import (
    CameraModel,
    SphereOccluder,
    chamfer_bidirectional,
    read_depth,
    read_ply,
    render_point_cloud,
    visible_vertices,
    write_depth,
    write_ply,
)
from .tracker import COLLISION_THRESHOLD, DatasetRecord, PseudoLabelDataset, collision_count

log = logging.getLogger(__name__)

POLICIES = ("random-edge-pick", "fold-in-half", "drag", "scripted")
HIDDEN_DEFAULT = SimParams(stiffness=0.7, dynamic_friction=1.85, particle_friction=2.75, damping=0.04)


@dataclass(frozen=True)
class ScenarioConfig:
    rng_seed: int = 0
    num_trajectories: int = 1
    segments_per_trajectory: int = 3
    hidden_params: SimParams = HIDDEN_DEFAULT
    policy: str = "random-edge-pick"
    scripted: tuple = ()  # ((pick_xyz, place_xyz), ...) for the scripted policy
    num_x: int = 25
    num_y: int = 25
    spacing: float = 0.006
    substeps_per_action: int = 40
    lift_height: float = 0.08
    place_height: float = 0.01
    settle_steps: int = 4
    tweezer_radius: float = 0.02
    camera: CameraModel = CameraModel(depth_noise_sigma=0.001, dropout_rate=0.05)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown pick policy {self.policy!r}; choose from {POLICIES}")
        if self.segments_per_trajectory < 0 or self.num_trajectories < 0:
            raise ValueError("segment and trajectory counts must be non-negative")
        if self.policy == "scripted" and len(self.scripted) < self.segments_per_trajectory:
            raise ValueError("scripted policy needs one (pick, place) pair per segment")
        if self.substeps_per_action < 4:
            raise ValueError("substeps_per_action must be >= 4")

    def build_mesh(self) -> ClothMesh:
        return build_grid_cloth(self.num_x, self.num_y, self.spacing)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_params"] = self.hidden_params.to_dict()
        d["camera"] = self.camera.to_dict()
        d["scripted"] = [[list(p), list(q)] for p, q in self.scripted]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "hidden_params" in d:
            hp = d["hidden_params"]
            d["hidden_params"] = hp if isinstance(hp, SimParams) else SimParams.from_dict(hp)
        if "camera" in d:
            cam = d["camera"]
            d["camera"] = cam if isinstance(cam, CameraModel) else CameraModel.from_dict(cam)
        if "scripted" in d:
            d["scripted"] = tuple((tuple(p), tuple(q)) for p, q in d["scripted"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# pick-and-place decomposition


def decompose(pick_place: PickPlaceAction, picked_vertex: int, settle_steps: int = 4) -> list[LowLevelAction]:
    """Grasp, lift, translate, lower and release as ``num_substeps`` picker substeps.

    The last ``settle_steps`` substeps have the grasp released so the
    recorded segment ends with the cloth close to rest.
    """
    T = pick_place.num_substeps
    moving = max(T - settle_steps, 3)
    n_lift = max(1, moving // 5)
    n_lower = max(1, moving // 5)
    n_move = moving - n_lift - n_lower
    pick = np.asarray(pick_place.pick_point)
    place = np.asarray(pick_place.place_point)
    lift = pick_place.lift_height
    apex = pick[2] + lift
    plan = (
        [np.array([0.0, 0.0, lift / n_lift])] * n_lift
        + [np.array([(place[0] - pick[0]) / n_move, (place[1] - pick[1]) / n_move, 0.0])] * n_move
        + [np.array([0.0, 0.0, (place[2] - apex) / n_lower])] * n_lower
    )
    actions = [LowLevelAction(picked_vertex, d, True) for d in plan]
    actions += [LowLevelAction.idle() for _ in range(T - len(actions))]
    return actions


def _boundary_vertices(mesh: ClothMesh) -> np.ndarray:
    i = np.arange(mesh.num_vertices) % mesh.num_x
    j = np.arange(mesh.num_vertices) // mesh.num_x
    return np.flatnonzero((i == 0) | (j == 0) | (i == mesh.num_x - 1) | (j == mesh.num_y - 1))


def _sample_pick_place(scenario, mesh, state, seg_index, rng, camera) -> PickPlaceAction:
    pos = state.positions
    vis = visible_vertices(mesh, pos, camera)
    xb, yb = camera.x_bounds, camera.y_bounds
    margin = 0.03
    kw = dict(lift_height=scenario.lift_height, num_substeps=scenario.substeps_per_action)
    if scenario.policy == "scripted":
        pick, place = scenario.scripted[seg_index]
        return PickPlaceAction(pick, place, **kw)
    if scenario.policy == "fold-in-half":
        # corner to the diagonally opposite corner of the current cloth footprint
        corners = [0, mesh.num_x - 1, mesh.num_vertices - mesh.num_x, mesh.num_vertices - 1]
        c = corners[int(rng.integers(4))]
        opposite = {corners[0]: corners[3], corners[3]: corners[0], corners[1]: corners[2], corners[2]: corners[1]}[c]
        target = pos[opposite].copy()
        target[2] = scenario.place_height
        return PickPlaceAction(pos[c], target, **kw)

    for _ in range(100):
        if scenario.policy == "random-edge-pick":
            cand = np.intersect1d(_boundary_vertices(mesh), vis)
            if len(cand) == 0:
                cand = vis
            dist = rng.uniform(0.06, 0.15)
        else:  # drag
            cand = vis
            dist = rng.uniform(0.08, 0.14)
        if len(cand) == 0:
            break
        v = int(cand[rng.integers(len(cand))])
        ang = rng.uniform(0, 2 * np.pi)
        target = pos[v] + dist * np.array([np.cos(ang), np.sin(ang), 0.0])
        target[2] = scenario.place_height
        if xb[0] + margin <= target[0] <= xb[1] - margin and yb[0] + margin <= target[1] <= yb[1] - margin:
            lift = scenario.lift_height if scenario.policy == "random-edge-pick" else min(scenario.lift_height, 0.02)
            return PickPlaceAction(pos[v], target, lift_height=lift, num_substeps=scenario.substeps_per_action)
    raise ValueError("could not sample a pick target on the cloth inside the workspace")


def _rest(state: ClothState) -> ClothState:
    return ClothState(state.positions, np.zeros_like(state.velocities), state.time_index)


def generate_synthetic_trajectories(scenario: ScenarioConfig) -> tuple[ClothMesh, list[Trajectory]]:
    """Simulate the hidden-parameter world and record noisy, occluded observations."""
    mesh = scenario.build_mesh()
    cam = scenario.camera
    params = scenario.hidden_params
    trajectories = []
    for tid in range(scenario.num_trajectories):
        rng = np.random.default_rng([scenario.rng_seed, tid])
        state = mesh.rest_state()
        for _ in range(scenario.settle_steps):
            state = dyn_step(mesh, state, params)
        state = ClothState(state.positions, np.zeros_like(state.velocities), 0)
        initial = state
        init_obs = render_point_cloud(mesh, initial, replace(cam, dropout_rate=0.0), (), int(rng.integers(2**31))).points
        segments, gt = [], []
        for s in range(scenario.segments_per_trajectory):
            pp = _sample_pick_place(scenario, mesh, state, s, rng, cam)
            picked = nearest_vertex(state, pp.pick_point)
            pp = replace(pp, pick_point=tuple(state.positions[picked]))
            actions = decompose(pp, picked, scenario.settle_steps)
            states, clouds = [], []
            for a in actions:
                state = dyn_step(mesh, state, params, a)
                occ = ()
                if a.grasp_active:
                    tip = state.positions[a.picked_vertex] + np.array([0.0, 0.0, scenario.tweezer_radius * 0.5])
                    occ = (SphereOccluder(tuple(tip), scenario.tweezer_radius),)
                cloud = render_point_cloud(mesh, state, cam, occ, int(rng.integers(2**31)))
                states.append(state)
                clouds.append(cloud.points)
            state = _rest(state)
            states[-1] = state
            segments.append(Segment(actions, clouds, pp))
            gt.append(states)
        trajectories.append(Trajectory(initial, segments, gt, init_obs, tid))
    return mesh, trajectories


# ---------------------------------------------------------------------------
# trajectory files


def save_trajectories(out_dir: str | Path, scenario: ScenarioConfig, trajectories: Sequence[Trajectory]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n")
    for traj in trajectories:
        d = out / f"traj_{traj.trajectory_id:04d}"
        d.mkdir(exist_ok=True)
        meta = {
            "trajectory_id": traj.trajectory_id,
            "segments": [
                {
                    "actions": [a.to_dict() for a in seg.actions],
                    "observation_sizes": [len(p) for p in seg.observations],
                    "pick_place": asdict(seg.pick_place) if seg.pick_place else None,
                }
                for seg in traj.segments
            ],
            "has_ground_truth": traj.ground_truth_states is not None,
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        np.save(d / "initial_state.npy", np.stack([traj.initial_state.positions, traj.initial_state.velocities]))
        if traj.initial_observation is not None:
            np.save(d / "initial_observation.npy", np.asarray(traj.initial_observation))
        clouds = [p for seg in traj.segments for p in seg.observations]
        np.save(d / "observations.npy", np.concatenate(clouds) if clouds else np.zeros((0, 3)))
        if traj.ground_truth_states is not None:
            gt = [np.stack([s.positions, s.velocities]) for seq in traj.ground_truth_states for s in seq]
            np.save(d / "ground_truth.npy", np.stack(gt) if gt else np.zeros((0, 2, traj.initial_state.num_vertices, 3)))


def load_trajectories(in_dir: str | Path) -> tuple[ScenarioConfig, ClothMesh, list[Trajectory]]:
    src = Path(in_dir)
    scenario = ScenarioConfig.from_dict(json.loads((src / "scenario.json").read_text()))
    mesh = scenario.build_mesh()
    trajectories = []
    for d in sorted(src.glob("traj_*")):
        meta = json.loads((d / "meta.json").read_text())
        init = np.load(d / "initial_state.npy")
        clouds = np.load(d / "observations.npy")
        gt = np.load(d / "ground_truth.npy") if (d / "ground_truth.npy").exists() else None
        init_obs = np.load(d / "initial_observation.npy") if (d / "initial_observation.npy").exists() else None
        segments, gt_states, c0, g0 = [], [], 0, 0
        for s in meta["segments"]:
            obs = []
            for n in s["observation_sizes"]:
                obs.append(clouds[c0 : c0 + n])
                c0 += n
            acts = [LowLevelAction.from_dict(a) for a in s["actions"]]
            pp = PickPlaceAction(**s["pick_place"]) if s["pick_place"] else None
            segments.append(Segment(acts, obs, pp))
            if gt is not None:
                T = len(acts)
                gt_states.append([ClothState(g[0], g[1], k + 1) for k, g in enumerate(gt[g0 : g0 + T])])
                g0 += T
        state0 = ClothState(init[0], init[1], 0)
        state0.check_matches(mesh)
        trajectories.append(
            Trajectory(state0, segments, gt_states if gt is not None else None, init_obs, meta["trajectory_id"])
        )
    return scenario, mesh, trajectories


# ---------------------------------------------------------------------------
# dataset files


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_dataset(out_dir: str | Path, mesh: ClothMesh, dataset: PseudoLabelDataset, camera: Optional[CameraModel] = None) -> dict:
    """Write records as PLY/OBJ/depth files plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    rec_dir = out / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    header = {"num_x": mesh.num_x, "num_y": mesh.num_y, "spacing": repr(mesh.spacing)}
    entries = []
    for r in sorted(dataset.records, key=lambda r: (r.trajectory_id, r.segment_index)):
        stem = f"traj{r.trajectory_id:04d}_seg{r.segment_index + 1:02d}"
        files = {
            "point_cloud": f"records/{stem}_cloud.ply",
            "depth": f"records/{stem}_depth.npy",
            "mesh": f"records/{stem}_mesh.obj",
            "diagnostics": f"records/{stem}_diag.json",
        }
        write_ply(out / files["point_cloud"], r.observation)
        write_depth(out / files["depth"], r.depth, camera)
        write_obj(out / files["mesh"], r.mesh_positions, mesh.edges, header)
        if r.pre_tto2_positions is not None:
            files["mesh_pre_tto2"] = f"records/{stem}_mesh_pre_tto2.obj"
            write_obj(out / files["mesh_pre_tto2"], r.pre_tto2_positions, mesh.edges, header)
        (out / files["diagnostics"]).write_text(json.dumps(r.diagnostics, indent=1, sort_keys=True, default=float) + "\n")
        entries.append(
            {"trajectory_id": r.trajectory_id, "segment_index": r.segment_index, "partial": r.partial, "files": files}
        )
    manifest = {
        "records": entries,
        "record_hash": _digest(entries),
        "provenance": {**dataset.provenance, "code_version": __version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def read_dataset(in_dir: str | Path) -> tuple[ClothMesh, PseudoLabelDataset, dict]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if _digest(manifest["records"]) != manifest["record_hash"]:
        raise ValueError(f"{src}: manifest record hash mismatch")
    mesh = None
    records = []
    for e in manifest["records"]:
        f = e["files"]
        for ref in f.values():
            if not (src / ref).exists():
                raise FileNotFoundError(f"{src / ref} referenced by manifest is missing")
        pos, edges, header = read_obj(src / f["mesh"])
        if mesh is None:
            mesh = build_grid_cloth(int(header["num_x"]), int(header["num_y"]), float(header["spacing"]))
        validate_topology(len(pos), edges)
        if not np.array_equal(edges, mesh.edges):
            raise ValueError(f"{f['mesh']}: topology differs from the dataset mesh")
        pre = read_obj(src / f["mesh_pre_tto2"])[0] if "mesh_pre_tto2" in f else None
        depth, _ = read_depth(src / f["depth"])
        records.append(
            DatasetRecord(
                e["trajectory_id"], e["segment_index"], read_ply(src / f["point_cloud"]), depth, pos,
                json.loads((src / f["diagnostics"]).read_text()), e["partial"], pre,
            )
        )
    return mesh, PseudoLabelDataset(records, manifest.get("provenance", {})), manifest


# ---------------------------------------------------------------------------
# evaluation


def _summary(values) -> dict:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if len(v) == 0:
        return {"mean": float("nan"), "std": float("nan"), "median": float("nan"), "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v)), "n": int(len(v))}


def format_table_entry(summary: dict, unit: float = 1e-4) -> str:
    """``mean ± std`` in multiples of ``unit``, the way result tables print Chamfer values."""
    return f"{summary['mean'] / unit:.2f} ± {summary['std'] / unit:.2f}"


def evaluate(
    mesh: ClothMesh,
    dataset: PseudoLabelDataset,
    trajectories: Optional[Sequence[Trajectory]] = None,
    camera: CameraModel = CameraModel(),
    squared: bool = True,
) -> dict:
    """Per-record and aggregate quality metrics.

    ``visible_chamfer`` is measured on the pre-TTO2 mesh against the final
    observed cloud.  ``mesh_error`` (mean per-vertex distance to the synthetic
    ground truth) is reported only when ground truth is available.
    """
    gt_lookup = {}
    for traj in trajectories or ():
        gt_lookup[(traj.trajectory_id, -1)] = traj.initial_state.positions
        for i, seq in enumerate(traj.ground_truth_states or ()):
            gt_lookup[(traj.trajectory_id, i)] = seq[-1].positions
    rows = []
    for r in sorted(dataset.records, key=lambda r: (r.trajectory_id, r.segment_index)):
        row = {"trajectory_id": r.trajectory_id, "segment_index": r.segment_index, "partial": r.partial}
        if r.segment_index >= 0:
            pre = r.pre_tto2_positions if r.pre_tto2_positions is not None else r.mesh_positions
            for name, pos in (("visible_chamfer", pre), ("final_chamfer", r.mesh_positions)):
                vis = visible_vertices(mesh, pos, camera)
                row[name] = (
                    chamfer_bidirectional(pos[vis], r.observation, squared)
                    if len(vis) and len(r.observation) else float("nan")
                )
        gt = gt_lookup.get((r.trajectory_id, r.segment_index))
        if gt is not None:
            row["mesh_error"] = float(np.mean(np.linalg.norm(r.mesh_positions - gt, axis=1)))
        row["collisions"] = collision_count(r.mesh_positions, COLLISION_THRESHOLD, mesh)
        rows.append(row)
    seg_rows = [r for r in rows if r["segment_index"] >= 0]
    aggregate = {
        "visible_chamfer": _summary(r.get("visible_chamfer") for r in seg_rows),
        "final_chamfer": _summary(r.get("final_chamfer") for r in seg_rows),
        "collisions": _summary(r["collisions"] for r in rows),
        "collisions_total": int(sum(r["collisions"] for r in rows)),
        "num_records": len(rows),
        "num_partial": int(sum(r["partial"] for r in rows)),
    }
    if any("mesh_error" in r for r in rows):
        aggregate["mesh_error"] = _summary(r.get("mesh_error") for r in seg_rows)
    aggregate["table_entry"] = format_table_entry(aggregate["visible_chamfer"])
    return {"records": rows, "aggregate": aggregate, "squared": squared}
