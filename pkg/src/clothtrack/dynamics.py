"""Position-based cloth dynamics with a kinematic picker.

One call to :func:`dyn_step` advances the cloth through one recorded picker
action, split into ``params.substeps`` integration substeps of ``params.dt``
seconds.  Each substep is semi-implicit Euler prediction followed by
``solver_iterations`` Gauss-Seidel sweeps over distance constraints, particle
separation and the ground plane.  The hot loop is compiled with numba.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

from .mesh import ClothMesh, ClothState, LowLevelAction

STIFFNESS_RANGE = (0.2, 1.6)
DEFAULT_EXPLOSION_THRESHOLD = 2.5  # m/s
# particles are separated to slightly more than their radius so that resting
# contacts settle at or above the radius despite solver compliance
CONTACT_SKIN = 0.1


class SimulationError(RuntimeError):
    """The integrator produced a non-finite state."""


@dataclass(frozen=True)
class SimParams:
    stiffness: float = 0.9
    dynamic_friction: float = 2.3
    particle_friction: float = 2.3
    gravity: float = 9.81
    dt: float = 0.01
    substeps: int = 4
    solver_iterations: int = 8
    particle_radius: float = 0.005
    damping: float = 0.02
    self_collision: bool = True

    def __post_init__(self):
        if not 0.0 <= self.stiffness <= 2.0:
            raise ValueError(f"stiffness must lie in [0, 2], got {self.stiffness}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1 or self.solver_iterations < 1:
            raise ValueError("substeps and solver_iterations must be >= 1")
        if self.particle_radius <= 0:
            raise ValueError("particle_radius must be positive")
        if self.dynamic_friction < 0 or self.particle_friction < 0:
            raise ValueError("friction coefficients must be non-negative")
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError("damping must lie in [0, 1]")

    @property
    def action_duration(self) -> float:
        """Seconds covered by one low-level action."""
        return self.dt * self.substeps

    @property
    def correction_factor(self) -> float:
        """Per-iteration constraint correction scale derived from stiffness."""
        return min(max(self.stiffness / STIFFNESS_RANGE[1], 0.0), 1.0)

    def with_values(self, **kw) -> "SimParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown SimParams keys: {sorted(unknown)}")
        kw = {}
        for name, value in d.items():
            default = getattr(cls, name)
            if isinstance(default, bool):
                kw[name] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[name] = int(value)
            else:
                kw[name] = float(value)
        return cls(**kw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SimParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _cell_coord(v, cell):
    return np.int64(np.floor(v / cell))


@numba.njit(cache=True)
def _cell_hash(ix, iy, iz, table_size):
    h = (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791)
    return h & (table_size - 1)


@numba.njit(cache=True)
def _find_close_pairs(p, radius):
    """All pairs (i < j) closer than ``radius``, via a hashed uniform grid."""
    n = p.shape[0]
    table_size = 1
    while table_size < 2 * n:
        table_size *= 2
    cells = np.empty((n, 3), np.int64)
    keys = np.empty(n, np.int64)
    for i in range(n):
        cells[i, 0] = _cell_coord(p[i, 0], radius)
        cells[i, 1] = _cell_coord(p[i, 1], radius)
        cells[i, 2] = _cell_coord(p[i, 2], radius)
        keys[i] = _cell_hash(cells[i, 0], cells[i, 1], cells[i, 2], table_size)
    start = np.zeros(table_size + 1, np.int64)
    for i in range(n):
        start[keys[i] + 1] += 1
    for b in range(table_size):
        start[b + 1] += start[b]
    fill = start[:-1].copy()
    order = np.empty(n, np.int64)
    for i in range(n):
        order[fill[keys[i]]] = i
        fill[keys[i]] += 1

    r2 = radius * radius
    cap = 8 * n + 16
    out = np.empty((cap, 2), np.int64)
    count = 0
    for i in range(n):
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    cx = cells[i, 0] + dx
                    cy = cells[i, 1] + dy
                    cz = cells[i, 2] + dz
                    b = _cell_hash(cx, cy, cz, table_size)
                    for s in range(start[b], start[b + 1]):
                        j = order[s]
                        if j <= i:
                            continue
                        if cells[j, 0] != cx or cells[j, 1] != cy or cells[j, 2] != cz:
                            continue
                        d0 = p[i, 0] - p[j, 0]
                        d1 = p[i, 1] - p[j, 1]
                        d2 = p[i, 2] - p[j, 2]
                        if d0 * d0 + d1 * d1 + d2 * d2 < r2:
                            if count == cap:
                                grown = np.empty((2 * cap, 2), np.int64)
                                grown[:cap] = out
                                out = grown
                                cap *= 2
                            out[count, 0] = i
                            out[count, 1] = j
                            count += 1
    return out[:count]


@numba.njit(cache=True)
def _step_kernel(
    x0, v0, edges, rest, k_corr, gravity, dt, n_sub, iters, radius,
    mu_ground, mu_particle, damping, self_collide,
    picked, pick_delta, pseudo_mask, pseudo_offset, offset_velocity,
):
    n = x0.shape[0]
    x = x0.copy()
    v = v0.copy()
    p = np.empty_like(x)
    inv_m = np.ones(n)
    if picked >= 0:
        inv_m[picked] = 0.0
    ground_pen = np.zeros(n)
    n_edges = edges.shape[0]

    for k in range(1, n_sub + 1):
        frac = k / n_sub
        for i in range(n):
            v[i, 2] -= gravity * dt
            if pseudo_mask[i] and not offset_velocity:
                # pure position correction: shift the reference position too,
                # so neither friction nor the velocity update sees it
                for c in range(3):
                    x[i, c] += pseudo_offset[i, c] / n_sub
            for c in range(3):
                p[i, c] = x[i, c] + v[i, c] * dt
            if pseudo_mask[i] and offset_velocity:
                for c in range(3):
                    p[i, c] += pseudo_offset[i, c] / n_sub
            ground_pen[i] = 0.0
        if picked >= 0:
            for c in range(3):
                p[picked, c] = x0[picked, c] + pick_delta[c] * frac

        if self_collide:
            pairs = _find_close_pairs(p, 2.0 * radius)
        else:
            pairs = np.empty((0, 2), np.int64)
        pair_pen = np.zeros(pairs.shape[0])

        for _ in range(iters):
            for e in range(n_edges):
                a = edges[e, 0]
                b = edges[e, 1]
                wa = inv_m[a]
                wb = inv_m[b]
                w = wa + wb
                if w == 0.0:
                    continue
                d0 = p[a, 0] - p[b, 0]
                d1 = p[a, 1] - p[b, 1]
                d2 = p[a, 2] - p[b, 2]
                length = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                if length < 1e-12:
                    continue
                s = k_corr * (length - rest[e]) / (w * length)
                p[a, 0] -= wa * s * d0
                p[a, 1] -= wa * s * d1
                p[a, 2] -= wa * s * d2
                p[b, 0] += wb * s * d0
                p[b, 1] += wb * s * d1
                p[b, 2] += wb * s * d2

            for q in range(pairs.shape[0]):
                a = pairs[q, 0]
                b = pairs[q, 1]
                wa = inv_m[a]
                wb = inv_m[b]
                # shock propagation: a particle resting on the ground does not
                # yield to one stacked above it
                if p[a, 2] <= 0.0 and p[b, 2] > 0.0:
                    wa = 0.0
                elif p[b, 2] <= 0.0 and p[a, 2] > 0.0:
                    wb = 0.0
                w = wa + wb
                if w == 0.0:
                    continue
                d0 = p[a, 0] - p[b, 0]
                d1 = p[a, 1] - p[b, 1]
                d2 = p[a, 2] - p[b, 2]
                length = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                if length >= radius or length < 1e-12:
                    continue
                pen = radius - length
                if pen > pair_pen[q]:
                    pair_pen[q] = pen
                s = (length - radius) / (w * length)
                p[a, 0] -= wa * s * d0
                p[a, 1] -= wa * s * d1
                p[a, 2] -= wa * s * d2
                p[b, 0] += wb * s * d0
                p[b, 1] += wb * s * d1
                p[b, 2] += wb * s * d2

            for i in range(n):
                if inv_m[i] > 0.0 and p[i, 2] < 0.0:
                    ground_pen[i] += -p[i, 2]
                    p[i, 2] = 0.0

        # Coulomb-style friction: tangential motion removed up to mu * penetration
        if mu_particle > 0.0:
            for q in range(pairs.shape[0]):
                if pair_pen[q] <= 0.0:
                    continue
                a = pairs[q, 0]
                b = pairs[q, 1]
                wa = inv_m[a]
                wb = inv_m[b]
                w = wa + wb
                if w == 0.0:
                    continue
                nx = p[a, 0] - p[b, 0]
                ny = p[a, 1] - p[b, 1]
                nz = p[a, 2] - p[b, 2]
                nl = np.sqrt(nx * nx + ny * ny + nz * nz)
                if nl < 1e-12:
                    continue
                nx /= nl
                ny /= nl
                nz /= nl
                r0 = (p[a, 0] - x[a, 0]) - (p[b, 0] - x[b, 0])
                r1 = (p[a, 1] - x[a, 1]) - (p[b, 1] - x[b, 1])
                r2 = (p[a, 2] - x[a, 2]) - (p[b, 2] - x[b, 2])
                dn = r0 * nx + r1 * ny + r2 * nz
                t0 = r0 - dn * nx
                t1 = r1 - dn * ny
                t2 = r2 - dn * nz
                tl = np.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
                if tl < 1e-15:
                    continue
                f = min(1.0, mu_particle * pair_pen[q] / tl)
                p[a, 0] -= wa / w * f * t0
                p[a, 1] -= wa / w * f * t1
                p[a, 2] -= wa / w * f * t2
                p[b, 0] += wb / w * f * t0
                p[b, 1] += wb / w * f * t1
                p[b, 2] += wb / w * f * t2
            for i in range(n):
                if inv_m[i] > 0.0 and p[i, 2] < 0.0:
                    p[i, 2] = 0.0

        if mu_ground > 0.0:
            for i in range(n):
                if ground_pen[i] <= 0.0 or inv_m[i] == 0.0:
                    continue
                t0 = p[i, 0] - x[i, 0]
                t1 = p[i, 1] - x[i, 1]
                tl = np.sqrt(t0 * t0 + t1 * t1)
                if tl < 1e-15:
                    continue
                f = min(1.0, mu_ground * ground_pen[i] / tl)
                p[i, 0] -= f * t0
                p[i, 1] -= f * t1

        for i in range(n):
            for c in range(3):
                v[i, c] = (p[i, c] - x[i, c]) / dt * (1.0 - damping)
                x[i, c] = p[i, c]
        if picked >= 0:
            for c in range(3):
                x[picked, c] = x0[picked, c] + pick_delta[c]
    return x, v


# ---------------------------------------------------------------------------


def step_arrays(
    mesh: ClothMesh,
    positions: np.ndarray,
    velocities: np.ndarray,
    params: SimParams,
    action: Optional[LowLevelAction] = None,
    pseudo_offset: Optional[np.ndarray] = None,
    pseudo_mask: Optional[np.ndarray] = None,
    offset_velocity: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw-array form of :func:`dyn_step`; does not reject non-finite output.

    ``pseudo_offset`` is added to the predicted positions of masked vertices
    in equal parts over the substeps, on top of their inertial prediction.
    Unless ``offset_velocity`` is set the offset is a pure position
    correction and does not feed into the velocity update.
    """
    n = mesh.num_vertices
    if positions.shape != (n, 3) or velocities.shape != (n, 3):
        raise ValueError(f"state shape {positions.shape} does not match mesh with {n} vertices")
    picked, delta = -1, np.zeros(3)
    if action is not None and action.grasp_active:
        if not 0 <= action.picked_vertex < n:
            raise ValueError(f"picked vertex {action.picked_vertex} out of range")
        picked, delta = action.picked_vertex, np.asarray(action.picker_delta, float)
    if pseudo_offset is None:
        mask = np.zeros(n, dtype=np.bool_)
        offset = np.zeros((n, 3))
    else:
        offset = np.ascontiguousarray(pseudo_offset, dtype=np.float64)
        if offset.shape != (n, 3):
            raise ValueError(f"pseudo offset shape {offset.shape} does not match ({n}, 3)")
        mask = np.ones(n, dtype=np.bool_) if pseudo_mask is None else np.array(pseudo_mask, dtype=np.bool_)
        if mask.shape != (n,):
            raise ValueError("pseudo_mask must have one flag per vertex")
        if picked >= 0:
            mask[picked] = False
    return _step_kernel(
        np.ascontiguousarray(positions, dtype=np.float64),
        np.ascontiguousarray(velocities, dtype=np.float64),
        mesh.edges, mesh.rest_lengths,
        params.correction_factor, params.gravity, params.dt, params.substeps,
        params.solver_iterations, params.particle_radius * (1.0 + CONTACT_SKIN),
        params.dynamic_friction, params.particle_friction, params.damping,
        params.self_collision, picked, delta, mask, offset, bool(offset_velocity),
    )


def dyn_step(
    mesh: ClothMesh,
    state: ClothState,
    params: SimParams,
    action: Optional[LowLevelAction] = None,
    pseudo_action: Optional[np.ndarray] = None,
    pseudo_mask: Optional[np.ndarray] = None,
    natural_positions: Optional[np.ndarray] = None,
) -> ClothState:
    """Advance the cloth through one low-level action.

    The picked vertex is moved kinematically by ``action.picker_delta`` and
    has infinite mass during the solve.

    ``pseudo_action`` is a target displacement for the vertices selected by
    ``pseudo_mask`` (all vertices if omitted).  It is realised as an offset
    from the step's own unforced motion: the plain step is run first (or
    ``natural_positions`` is used if the caller already has it) and the
    difference ``pseudo_action - natural_displacement`` is spread over the
    substeps.  Masked vertices keep finite mass, so constraint projection
    drags their occluded neighbours along.  A pseudo-action equal to the
    natural displacement reproduces the plain step exactly.
    """
    state.check_matches(mesh)
    offset = None
    if pseudo_action is not None:
        pa = np.asarray(pseudo_action, dtype=np.float64)
        if pa.shape != state.positions.shape:
            raise ValueError(f"pseudo_action shape {pa.shape} does not match {state.positions.shape}")
        if natural_positions is None:
            natural_positions, _ = step_arrays(mesh, state.positions, state.velocities, params, action)
        offset = pa - (np.asarray(natural_positions, dtype=np.float64) - state.positions)
    x, v = step_arrays(mesh, state.positions, state.velocities, params, action, offset, pseudo_mask)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise SimulationError("non-finite state after dynamics step")
    return ClothState(x, v, state.time_index + 1)


def simulate_segment(
    mesh: ClothMesh,
    state: ClothState,
    params: SimParams,
    actions: Sequence[LowLevelAction],
) -> list[ClothState]:
    if len(actions) == 0:
        raise ValueError("simulate_segment needs at least one action")
    out = []
    for a in actions:
        state = dyn_step(mesh, state, params, a)
        out.append(state)
    return out


def explosion_check(prev, next, dt: float, threshold: float = DEFAULT_EXPLOSION_THRESHOLD) -> bool:
    """True if any vertex moved faster than ``threshold`` or any coordinate is non-finite."""
    a = prev.positions if isinstance(prev, ClothState) else np.asarray(prev, float)
    b = next.positions if isinstance(next, ClothState) else np.asarray(next, float)
    if a.shape != b.shape:
        raise ValueError("state shapes differ")
    if not np.all(np.isfinite(b)):
        return True
    speed = np.linalg.norm(b - a, axis=1) / dt
    return bool(np.any(speed > threshold))
