"""Action-conditioned cloth tracking and pseudo-label generation.

Per low-level action the tracker rolls the dynamics model forward, aligns the
prediction with the next observed cloud (TTO1), and re-simulates with a
per-vertex pseudo-action on the visible vertices under a backtracking line
search.  After the last action of a pick-and-place segment a second
optimization (TTO2) deforms the mesh directly.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import time
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import (
    DEFAULT_EXPLOSION_THRESHOLD,
    SimParams,
    SimulationError,
    explosion_check,
    simulate_segment,
    step_arrays,
)
from .mesh import ClothMesh, ClothState, LowLevelAction, Trajectory
from .optimize import TtoConfig, run_tto
from .sensing import (
    CameraModel,
    chamfer_bidirectional,
    chamfer_one_way,
    depth_image,
    visible_vertices,
)

log = logging.getLogger(__name__)

ABLATIONS = ("no_pseudo_action", "no_dyn_init", "no_act_cond", "no_tto2")
COLLISION_THRESHOLD = 0.005


class TrackingError(RuntimeError):
    """A segment could not be tracked; ``partial`` holds what was computed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class LineSearchFailure(SimulationError):
    pass


@dataclass(frozen=True)
class CalibrationGrid:
    stiffness: tuple = (0.2, 0.55, 0.9, 1.25, 1.6)
    dynamic_friction: tuple = (0.5, 1.4, 2.3, 3.2, 4.1, 5.0)
    particle_friction: tuple = (0.5, 1.4, 2.3, 3.2, 4.1, 5.0)

    def __post_init__(self):
        for name in ("stiffness", "dynamic_friction", "particle_friction"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"calibration grid axis {name!r} is empty")
            object.__setattr__(self, name, vals)
        if any(not 0.0 <= s <= 2.0 for s in self.stiffness):
            raise ValueError("stiffness values must lie in [0, 2]")
        if any(f < 0 for f in self.dynamic_friction + self.particle_friction):
            raise ValueError("friction values must be non-negative")

    @classmethod
    def grid_125(cls) -> "CalibrationGrid":
        g = cls()
        return cls(g.stiffness, g.dynamic_friction[:5], g.particle_friction[:5])

    @classmethod
    def single(cls, params: SimParams) -> "CalibrationGrid":
        return cls((params.stiffness,), (params.dynamic_friction,), (params.particle_friction,))

    def __len__(self):
        return len(self.stiffness) * len(self.dynamic_friction) * len(self.particle_friction)

    def combinations(self) -> list[tuple[float, float, float]]:
        """Stiffness-major ordering; this order breaks ties."""
        return list(itertools.product(self.stiffness, self.dynamic_friction, self.particle_friction))

    def midpoint(self) -> tuple[float, float, float]:
        return tuple(axis[len(axis) // 2] for axis in (self.stiffness, self.dynamic_friction, self.particle_friction))

    def apply(self, base: SimParams, combo) -> SimParams:
        s, df, pf = combo
        return replace(base, stiffness=s, dynamic_friction=df, particle_friction=pf)


@dataclass(frozen=True)
class TrackerConfig:
    gamma: float = 0.7
    max_line_search_retries: int = 10
    explosion_threshold: float = DEFAULT_EXPLOSION_THRESHOLD
    tto1: TtoConfig = TtoConfig()
    tto2: TtoConfig = TtoConfig()
    calibration_mode: str = "online"
    calibration_pick: str = "best"
    ablation: Optional[str] = None
    # whether the correction part of the pseudo-action also sets velocity
    correction_velocity: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.max_line_search_retries < 1:
            raise ValueError("max_line_search_retries must be >= 1")
        if self.explosion_threshold <= 0:
            raise ValueError("explosion_threshold must be positive")
        if self.calibration_mode not in ("online", "offline"):
            raise ValueError(f"unknown calibration mode {self.calibration_mode!r}")
        if self.calibration_pick not in ("best", "median"):
            raise ValueError(f"unknown calibration pick {self.calibration_pick!r}")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    @property
    def method_name(self) -> str:
        return self.ablation or "ours"

    @property
    def use_pseudo_action(self) -> bool:
        return self.ablation != "no_pseudo_action"

    @property
    def use_dyn_init(self) -> bool:
        return self.ablation not in ("no_dyn_init", "no_act_cond")

    @property
    def use_picker_action(self) -> bool:
        return self.ablation != "no_act_cond"

    @property
    def use_tto2(self) -> bool:
        return self.ablation != "no_tto2"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CalibrationResult:
    params: SimParams
    combo: tuple
    objectives: list[float]
    combos: list[tuple]
    fallback: bool = False

    def ranked(self) -> list[int]:
        """Grid indices sorted by objective (stable: grid order breaks ties)."""
        return sorted(range(len(self.objectives)), key=lambda k: self.objectives[k])

    def objective_of(self, combo) -> float:
        return self.objectives[self.combos.index(tuple(combo))]

    def pick(self, which: str, base: SimParams, grid: CalibrationGrid) -> tuple[SimParams, tuple]:
        order = self.ranked()
        k = order[0] if which == "best" else order[len(order) // 2]
        return grid.apply(base, self.combos[k]), self.combos[k]


@dataclass
class LineSearchResult:
    state: ClothState
    retries: int
    scale: float


@dataclass
class TrackResult:
    states: list[ClothState]
    pre_tto2_state: ClothState
    final_state: ClothState
    step_chamfer: list[float] = field(default_factory=list)
    retries: list[int] = field(default_factory=list)
    scales: list[float] = field(default_factory=list)
    pre_tto2_chamfer: float = float("nan")
    final_chamfer: float = float("nan")
    calibration: Optional[tuple] = None
    wall_time: float = 0.0

    def diagnostics(self) -> dict:
        return {
            "pre_tto2_chamfer": self.pre_tto2_chamfer,
            "final_chamfer": self.final_chamfer,
            "step_chamfer": self.step_chamfer,
            "line_search_retries": self.retries,
            "pseudo_action_scales": self.scales,
            "calibration": list(self.calibration) if self.calibration else None,
            "wall_time": self.wall_time,
        }


# ---------------------------------------------------------------------------


def _rollout_objective(mesh, state, params, actions, observation, camera, threshold) -> float:
    x, v = state.positions, state.velocities
    duration = params.action_duration
    for a in actions:
        nx, nv = step_arrays(mesh, x, v, params, a)
        if explosion_check(x, nx, duration, threshold):
            return float("inf")
        x, v = nx, nv
    vis = visible_vertices(mesh, x, camera)
    if len(vis) == 0:
        return float("inf")
    return chamfer_one_way(observation, x[vis])


def calibrate(
    mesh: ClothMesh,
    state: ClothState,
    actions: Sequence[LowLevelAction],
    final_observation,
    grid: CalibrationGrid,
    camera: CameraModel,
    base_params: SimParams = SimParams(),
    explosion_threshold: float = DEFAULT_EXPLOSION_THRESHOLD,
) -> CalibrationResult:
    """Grid search for the parameters whose plain rollout best explains ``final_observation``."""
    if len(actions) == 0:
        raise ValueError("calibration needs at least one action")
    obs = np.asarray(getattr(final_observation, "points", final_observation), float).reshape(-1, 3)
    combos = grid.combinations()
    objectives = [
        _rollout_objective(mesh, state, grid.apply(base_params, c), actions, obs, camera, explosion_threshold)
        for c in combos
    ]
    if not np.any(np.isfinite(objectives)):
        warnings.warn("every calibration combination exploded; using grid midpoint", RuntimeWarning, stacklevel=2)
        mid = grid.midpoint()
        return CalibrationResult(grid.apply(base_params, mid), mid, objectives, combos, fallback=True)
    k = int(np.argmin(objectives))
    return CalibrationResult(grid.apply(base_params, combos[k]), combos[k], objectives, combos)


def line_search_step(
    mesh: ClothMesh,
    state: ClothState,
    params: SimParams,
    action: Optional[LowLevelAction],
    base_displacement: np.ndarray,
    correction: np.ndarray,
    mask: np.ndarray,
    config: TrackerConfig = TrackerConfig(),
    natural_positions: Optional[np.ndarray] = None,
) -> LineSearchResult:
    """Re-simulate with pseudo-action ``base + scale * correction`` on ``mask``.

    The scale starts at 1 and decays by ``gamma`` on every exploded attempt;
    after ``max_line_search_retries`` rejections the pseudo-action is dropped.
    ``natural_positions`` is the plain step result, recomputed if omitted.
    """
    duration = params.action_duration
    x, v = state.positions, state.velocities
    if natural_positions is None:
        natural_positions, _ = step_arrays(mesh, x, v, params, action)
    natural_disp = natural_positions - x
    scale = 1.0
    for retries in range(config.max_line_search_retries + 1):
        if retries == config.max_line_search_retries:
            scale = 0.0
            nx, nv = step_arrays(mesh, x, v, params, action)
        else:
            offset = base_displacement + scale * correction - natural_disp
            nx, nv = step_arrays(
                mesh, x, v, params, action, offset, mask, config.correction_velocity
            )
        ok = np.all(np.isfinite(nv)) and not explosion_check(x, nx, duration, config.explosion_threshold)
        if ok:
            return LineSearchResult(ClothState(nx, nv, state.time_index + 1), retries, scale)
        if retries < config.max_line_search_retries:
            scale *= config.gamma
    raise LineSearchFailure("dynamics exploded even without a pseudo-action")


def _obs_points(p) -> np.ndarray:
    return np.asarray(getattr(p, "points", p), dtype=np.float64).reshape(-1, 3)


def visible_chamfer(mesh, state: ClothState, observation, camera: CameraModel, squared: bool = True) -> float:
    """Bidirectional Chamfer between the visible mesh surface and the observed cloud."""
    pos = state.positions
    vis = visible_vertices(mesh, pos, camera)
    if len(vis) == 0:
        return float("inf")
    return chamfer_bidirectional(pos[vis], _obs_points(observation), squared)


def tto2(mesh: ClothMesh, state: ClothState, observation, camera: CameraModel, config: TtoConfig) -> ClothState:
    """Deform the whole mesh so its visible part matches ``observation``."""
    vis = visible_vertices(mesh, state.positions, camera)
    if len(vis) == 0:
        raise TrackingError("empty visible set before TTO2")
    corr = run_tto(state.positions, _obs_points(observation), vis, mesh.edges, config)
    return ClothState(state.positions + corr.deltas, np.zeros_like(state.velocities), state.time_index)


def track_segment(
    mesh: ClothMesh,
    initial_state: ClothState,
    actions: Sequence[LowLevelAction],
    observations: Sequence,
    params: SimParams,
    config: TrackerConfig = TrackerConfig(),
    camera: CameraModel = CameraModel(),
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrackResult:
    if len(actions) != len(observations):
        raise ValueError("actions and observations must be aligned")
    if len(actions) == 0:
        raise ValueError("segment has no actions")
    initial_state.check_matches(mesh)
    t0 = time.perf_counter()
    state = initial_state
    res = TrackResult([], initial_state, initial_state)

    for t, (action, obs) in enumerate(zip(actions, observations)):
        obs = _obs_points(obs)
        act = action if config.use_picker_action else None
        # a fully occluded frame gives TTO1 nothing to fit, so the step is a plain rollout
        if not config.use_pseudo_action or len(obs) == 0:
            nx, nv = step_arrays(mesh, state.positions, state.velocities, params, act)
            if not (np.all(np.isfinite(nx)) and np.all(np.isfinite(nv))):
                raise TrackingError(f"rollout diverged at step {t}", res)
            state = ClothState(nx, nv, state.time_index + 1)
            retries, scale = 0, 0.0
        else:
            natural, _ = step_arrays(mesh, state.positions, state.velocities, params, act)
            init = natural if config.use_dyn_init else state.positions
            base = init - state.positions
            vis = visible_vertices(mesh, init, camera)
            if len(vis) == 0:
                raise TrackingError(f"lost the cloth at step {t}", res)
            corr = run_tto(init, obs, vis, mesh.edges, config.tto1)
            mask = np.zeros(mesh.num_vertices, dtype=bool)
            mask[vis] = True
            try:
                ls = line_search_step(mesh, state, params, act, base, corr.deltas, mask, config, natural)
            except LineSearchFailure as exc:
                raise TrackingError(f"step {t}: {exc}", res) from exc
            state, retries, scale = ls.state, ls.retries, ls.scale
        res.states.append(state)
        res.retries.append(retries)
        res.scales.append(scale)
        cd = visible_chamfer(mesh, state, obs, camera) if len(obs) else float("nan")
        res.step_chamfer.append(cd)
        if on_step is not None:
            on_step({"step": t, "chamfer": cd, "retries": retries, "scale": scale})

    final_obs = _obs_points(observations[-1])
    res.pre_tto2_state = ClothState(state.positions, np.zeros_like(state.velocities), state.time_index)
    if len(final_obs) == 0:
        # nothing observed at the end of the segment: keep the rollout as is
        res.final_state = res.pre_tto2_state
        res.wall_time = time.perf_counter() - t0
        return res
    res.pre_tto2_chamfer = visible_chamfer(mesh, state, final_obs, camera)
    if config.use_tto2:
        res.final_state = tto2(mesh, res.pre_tto2_state, final_obs, camera, config.tto2)
    else:
        res.final_state = res.pre_tto2_state
    res.final_chamfer = visible_chamfer(mesh, res.final_state, final_obs, camera)
    res.wall_time = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class DatasetRecord:
    trajectory_id: int
    segment_index: int  # -1 for the initial flat state
    observation: np.ndarray
    depth: np.ndarray
    mesh_positions: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    partial: bool = False
    pre_tto2_positions: Optional[np.ndarray] = None


@dataclass
class PseudoLabelDataset:
    records: list[DatasetRecord]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)


def offline_parameters(
    mesh: ClothMesh,
    trajectories: Sequence[Trajectory],
    grid: CalibrationGrid,
    camera: CameraModel,
    base_params: SimParams,
    explosion_threshold: float = DEFAULT_EXPLOSION_THRESHOLD,
) -> tuple[SimParams, tuple, list[tuple]]:
    """Mode of per-segment calibration winners over a whole dataset.

    Segment start states are chained through the calibrated plain rollouts, so
    no tracking is needed to produce them.
    """
    winners = []
    for traj in trajectories:
        state = traj.initial_state
        for seg in traj.segments:
            if len(seg) == 0:
                continue
            cal = calibrate(mesh, state, seg.actions, seg.observations[-1], grid, camera, base_params, explosion_threshold)
            winners.append(cal.combo)
            try:
                state = simulate_segment(mesh, state, cal.params, seg.actions)[-1]
                state = ClothState(state.positions, np.zeros_like(state.velocities), state.time_index)
            except SimulationError:
                state = traj.initial_state
    if not winners:
        mid = grid.midpoint()
        return grid.apply(base_params, mid), mid, []
    counts = Counter(winners)
    top = max(counts.values())
    mode = next(c for c in grid.combinations() if counts.get(c, 0) == top)
    return grid.apply(base_params, mode), mode, winners


def calibration_key(trajectory_id: int, segment_index: int, state: ClothState) -> tuple:
    digest = hashlib.sha1(np.ascontiguousarray(state.positions).tobytes())
    digest.update(np.ascontiguousarray(state.velocities).tobytes())
    return (trajectory_id, segment_index, digest.hexdigest())


def track_trajectory(
    mesh: ClothMesh,
    traj: Trajectory,
    config: TrackerConfig,
    camera: CameraModel,
    grid: CalibrationGrid,
    base_params: SimParams = SimParams(),
    fixed_params: Optional[SimParams] = None,
    on_event: Optional[Callable[[dict], None]] = None,
    calibration_cache: Optional[dict] = None,
    on_result: Optional[Callable[[int, int, TrackResult], None]] = None,
) -> tuple[list[DatasetRecord], list[TrackResult]]:
    """Algorithm-level loop over the segments of one trajectory.

    Returns ``num_segments + 1`` records unless a segment fails, in which case
    the failing segment is recorded with ``partial=True`` and the rest skipped.
    ``calibration_cache`` lets several runs over the same trajectory share
    grid searches whose start states coincide.
    """
    init_obs = traj.initial_observation
    if init_obs is None:
        vis = visible_vertices(mesh, traj.initial_state.positions, camera)
        init_obs = traj.initial_state.positions[vis]
    records = [
        DatasetRecord(
            traj.trajectory_id, -1, np.asarray(init_obs), depth_image(init_obs, camera),
            traj.initial_state.positions.copy(), {"kind": "initial"},
        )
    ]
    results = []
    state = traj.initial_state
    for i, seg in enumerate(traj.segments):
        t_cal = time.perf_counter()
        if fixed_params is not None:
            params, combo = fixed_params, (fixed_params.stiffness, fixed_params.dynamic_friction, fixed_params.particle_friction)
        else:
            key = calibration_key(traj.trajectory_id, i, state)
            cal = None if calibration_cache is None else calibration_cache.get(key)
            if cal is None:
                cal = calibrate(mesh, state, seg.actions, seg.observations[-1], grid, camera, base_params, config.explosion_threshold)
                if calibration_cache is not None:
                    calibration_cache[key] = cal
            params, combo = cal.pick(config.calibration_pick, base_params, grid)
        t_cal = time.perf_counter() - t_cal
        final_obs = seg.observations[-1]
        try:
            res = track_segment(mesh, state, seg.actions, seg.observations, params, config, camera)
        except TrackingError as exc:
            log.warning("trajectory %s segment %d failed: %s", traj.trajectory_id, i, exc)
            partial = exc.partial
            mesh_pos = partial.states[-1].positions if partial and partial.states else state.positions
            records.append(
                DatasetRecord(
                    traj.trajectory_id, i, np.asarray(final_obs), depth_image(final_obs, camera),
                    mesh_pos.copy(), {"error": str(exc), "calibration": list(combo)}, partial=True,
                )
            )
            if on_event:
                on_event({"trajectory": traj.trajectory_id, "segment": i, "error": str(exc)})
            break
        res.calibration = combo
        diag = res.diagnostics()
        diag["calibration_time"] = t_cal
        diag["method"] = config.method_name
        records.append(
            DatasetRecord(
                traj.trajectory_id, i, np.asarray(final_obs), depth_image(final_obs, camera),
                res.final_state.positions.copy(), diag, False, res.pre_tto2_state.positions.copy(),
            )
        )
        results.append(res)
        if on_result:
            on_result(traj.trajectory_id, i, res)
        if on_event:
            on_event({"trajectory": traj.trajectory_id, "segment": i, **{k: v for k, v in diag.items() if k != "step_chamfer"}})
        state = res.final_state
    return records, results


def generate_pseudo_dataset(
    mesh: ClothMesh,
    trajectories: Sequence[Trajectory],
    config: TrackerConfig = TrackerConfig(),
    camera: CameraModel = CameraModel(),
    grid: CalibrationGrid = CalibrationGrid(),
    base_params: SimParams = SimParams(),
    on_event: Optional[Callable[[dict], None]] = None,
    on_result: Optional[Callable[[int, int, TrackResult], None]] = None,
) -> PseudoLabelDataset:
    fixed = None
    provenance = {"tracker": config.to_dict(), "grid": asdict(grid), "base_params": base_params.to_dict()}
    if config.calibration_mode == "offline":
        fixed, mode, winners = offline_parameters(mesh, trajectories, grid, camera, base_params, config.explosion_threshold)
        provenance["offline_mode"] = list(mode)
        provenance["offline_winners"] = [list(w) for w in winners]
    records: list[DatasetRecord] = []
    for traj in sorted(trajectories, key=lambda t: t.trajectory_id):
        recs, _ = track_trajectory(mesh, traj, config, camera, grid, base_params, fixed, on_event, None, on_result)
        records.extend(recs)
    return PseudoLabelDataset(records, provenance)


# ---------------------------------------------------------------------------


def collision_count(state, threshold: float = COLLISION_THRESHOLD, mesh: Optional[ClothMesh] = None) -> int:
    """Unordered vertex pairs closer than ``threshold``, excluding mesh edges."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pos = state.positions if isinstance(state, ClothState) else np.asarray(state, float)
    pairs = cKDTree(pos).query_pairs(threshold, output_type="ndarray")
    if len(pairs) == 0:
        return 0
    diff = pos[pairs[:, 0]] - pos[pairs[:, 1]]
    pairs = pairs[np.einsum("ij,ij->i", diff, diff) < threshold * threshold]
    if mesh is not None and len(pairs):
        n = len(pos)
        e = np.sort(mesh.edges, axis=1)
        keys = pairs.min(axis=1) * n + pairs.max(axis=1)
        pairs = pairs[~np.isin(keys, e[:, 0] * n + e[:, 1])]
    return int(len(pairs))
