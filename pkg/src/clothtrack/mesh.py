"""Cloth topology, per-step state, actions and trajectory containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

STRUCTURAL, SHEAR, BENDING = 0, 1, 2
EDGE_KIND_NAMES = ("structural", "shear", "bending")

REST_LENGTH_TOL = 1e-9


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ClothMesh:
    """Rectangular cloth grid with distance-constraint connectivity.

    Vertices are stored row-major: vertex ``j * num_x + i`` sits in column ``i``
    and row ``j``.  ``edges`` holds every undirected pair once, ordered
    structural, then shear, then bending.
    """

    num_x: int
    num_y: int
    spacing: float
    vertices: np.ndarray
    edges: np.ndarray
    rest_lengths: np.ndarray
    edge_kinds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices))
        object.__setattr__(self, "edges", _frozen(self.edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "rest_lengths", _frozen(self.rest_lengths))
        object.__setattr__(self, "edge_kinds", _frozen(self.edge_kinds, np.int8))
        validate_topology(len(self.vertices), self.edges)
        if len(self.rest_lengths) != len(self.edges):
            raise ValueError("rest_lengths must have one entry per edge")
        measured = np.linalg.norm(
            self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]], axis=1
        )
        if len(measured) and np.max(np.abs(measured - self.rest_lengths)) > REST_LENGTH_TOL:
            raise ValueError("rest lengths disagree with rest positions")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edges_of_kind(self, kind: int) -> np.ndarray:
        return self.edges[self.edge_kinds == kind]

    def adjacency_pairs(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) if a < b else (int(b), int(a)) for a, b in self.edges}

    def rest_state(self) -> "ClothState":
        return ClothState(self.vertices, np.zeros_like(self.vertices), 0)

    def __eq__(self, other):
        if not isinstance(other, ClothMesh):
            return NotImplemented
        return (
            (self.num_x, self.num_y, self.spacing) == (other.num_x, other.num_y, other.spacing)
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.rest_lengths, other.rest_lengths)
        )

    __hash__ = None


def validate_topology(num_vertices: int, edges: np.ndarray) -> None:
    """Raise ``ValueError`` if ``edges`` has bad indices, self-edges or duplicates."""
    edges = np.asarray(edges).reshape(-1, 2)
    if len(edges) == 0:
        return
    if edges.min() < 0 or edges.max() >= num_vertices:
        raise ValueError("edge index out of range")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValueError("self-edge in edge list")
    canon = np.sort(edges, axis=1)
    if len(np.unique(canon, axis=0)) != len(canon):
        raise ValueError("duplicate edge in edge list")


def build_grid_cloth(num_x: int, num_y: int, spacing: float) -> ClothMesh:
    """Flat ``num_x`` by ``num_y`` grid at z = 0, centred on the xy origin.

    Connectivity: 4-neighbour structural edges, both diagonals of every cell as
    shear edges, and 2-apart same-row/same-column bending edges.
    """
    if int(num_x) != num_x or int(num_y) != num_y or num_x < 2 or num_y < 2:
        raise ValueError(f"grid dimensions must be integers >= 2, got {num_x}x{num_y}")
    if not np.isfinite(spacing) or spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    num_x, num_y, spacing = int(num_x), int(num_y), float(spacing)

    ii, jj = np.meshgrid(np.arange(num_x), np.arange(num_y))
    verts = np.zeros((num_x * num_y, 3))
    verts[:, 0] = (ii.ravel() - (num_x - 1) / 2.0) * spacing
    verts[:, 1] = (jj.ravel() - (num_y - 1) / 2.0) * spacing

    def vid(i, j):
        return j * num_x + i

    groups: list[list[tuple[int, int]]] = [[], [], []]
    for j in range(num_y):
        for i in range(num_x):
            if i + 1 < num_x:
                groups[STRUCTURAL].append((vid(i, j), vid(i + 1, j)))
            if j + 1 < num_y:
                groups[STRUCTURAL].append((vid(i, j), vid(i, j + 1)))
    for j in range(num_y - 1):
        for i in range(num_x - 1):
            groups[SHEAR].append((vid(i, j), vid(i + 1, j + 1)))
            groups[SHEAR].append((vid(i + 1, j), vid(i, j + 1)))
    for j in range(num_y):
        for i in range(num_x):
            if i + 2 < num_x:
                groups[BENDING].append((vid(i, j), vid(i + 2, j)))
            if j + 2 < num_y:
                groups[BENDING].append((vid(i, j), vid(i, j + 2)))

    edges = np.array([e for g in groups for e in g], dtype=np.int64).reshape(-1, 2)
    kinds = np.concatenate([np.full(len(g), k, dtype=np.int8) for k, g in enumerate(groups)])
    rest = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
    return ClothMesh(num_x, num_y, spacing, verts, edges, rest, kinds)


@dataclass(frozen=True, eq=False)
class ClothState:
    positions: np.ndarray
    velocities: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        pos = _frozen(self.positions).reshape(-1, 3)
        vel = _frozen(self.velocities).reshape(-1, 3)
        if pos.shape != vel.shape:
            raise ValueError(f"positions {pos.shape} and velocities {vel.shape} differ in shape")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValueError("non-finite values in cloth state")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(self, "time_index", int(self.time_index))

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    def check_matches(self, mesh: ClothMesh) -> None:
        if self.num_vertices != mesh.num_vertices:
            raise ValueError(
                f"state has {self.num_vertices} vertices, mesh has {mesh.num_vertices}"
            )

    def with_positions(self, positions, velocities=None, time_index=None) -> "ClothState":
        return ClothState(
            positions,
            self.velocities if velocities is None else velocities,
            self.time_index if time_index is None else time_index,
        )

    def __eq__(self, other):
        if not isinstance(other, ClothState):
            return NotImplemented
        return (
            self.time_index == other.time_index
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.velocities, other.velocities)
        )

    __hash__ = None


@dataclass(frozen=True)
class PickPlaceAction:
    pick_point: tuple
    place_point: tuple
    lift_height: float = 0.08
    num_substeps: int = 40

    def __post_init__(self):
        object.__setattr__(self, "pick_point", tuple(float(v) for v in self.pick_point))
        object.__setattr__(self, "place_point", tuple(float(v) for v in self.place_point))
        if len(self.pick_point) != 3 or len(self.place_point) != 3:
            raise ValueError("pick and place points must be 3-D")
        if self.num_substeps < 1:
            raise ValueError("num_substeps must be >= 1")
        if not self.lift_height > 0:
            raise ValueError("lift_height must be positive")


@dataclass(frozen=True, eq=False)
class LowLevelAction:
    """One picker substep: displacement of the grasped vertex, if any."""

    picked_vertex: Optional[int] = None
    picker_delta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grasp_active: bool = False

    def __post_init__(self):
        delta = _frozen(self.picker_delta).reshape(3)
        object.__setattr__(self, "picker_delta", delta)
        if self.grasp_active:
            if self.picked_vertex is None or self.picked_vertex < 0:
                raise ValueError("active grasp requires a picked vertex")
            object.__setattr__(self, "picked_vertex", int(self.picked_vertex))
        elif np.any(delta != 0):
            raise ValueError("picker_delta must be zero when no grasp is active")

    @classmethod
    def idle(cls) -> "LowLevelAction":
        return cls()

    def __eq__(self, other):
        if not isinstance(other, LowLevelAction):
            return NotImplemented
        return (
            self.picked_vertex == other.picked_vertex
            and self.grasp_active == other.grasp_active
            and np.array_equal(self.picker_delta, other.picker_delta)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "picked_vertex": self.picked_vertex,
            "picker_delta": [float(v) for v in self.picker_delta],
            "grasp_active": bool(self.grasp_active),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LowLevelAction":
        return cls(d["picked_vertex"], np.asarray(d["picker_delta"], float), bool(d["grasp_active"]))


@dataclass
class Segment:
    """One pick-and-place action: ``T`` low-level actions and the ``T`` clouds observed after them."""

    actions: list[LowLevelAction]
    observations: list[np.ndarray]
    pick_place: Optional[PickPlaceAction] = None

    def __post_init__(self):
        if len(self.actions) != len(self.observations):
            raise ValueError(
                f"segment has {len(self.actions)} actions but {len(self.observations)} observations"
            )
        self.observations = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in self.observations]

    def __len__(self):
        return len(self.actions)


@dataclass
class Trajectory:
    initial_state: ClothState
    segments: list[Segment]
    ground_truth_states: Optional[list[list[ClothState]]] = None
    initial_observation: Optional[np.ndarray] = None
    trajectory_id: int = 0

    def __post_init__(self):
        if self.ground_truth_states is not None and len(self.ground_truth_states) != len(self.segments):
            raise ValueError("ground truth must provide one state sequence per segment")

    @property
    def num_segments(self) -> int:
        return len(self.segments)


def nearest_vertex(state: ClothState | np.ndarray, point: Sequence[float]) -> int:
    """Index of the position closest to ``point``; ties go to the lowest index."""
    pos = state.positions if isinstance(state, ClothState) else np.asarray(state, float)
    if len(pos) == 0:
        raise ValueError("empty state")
    d2 = np.sum((pos - np.asarray(point, float)) ** 2, axis=1)
    return int(np.argmin(d2))  # argmin returns the first minimum


def write_obj(path: str | Path, positions: np.ndarray, edges: np.ndarray, header: Optional[dict] = None) -> None:
    """Write vertices and edges (as ``l`` elements) in row-major vertex order."""
    lines = []
    for k, v in (header or {}).items():
        lines.append(f"# {k} {v}")
    lines.extend(f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in np.asarray(positions, float))
    lines.extend(f"l {a + 1} {b + 1}" for a, b in np.asarray(edges, int))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    verts, edges, header = [], [], {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#" and len(parts) >= 3:
            header[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "l":
            edges.append([int(t) - 1 for t in parts[1:3]])
    positions = np.array(verts, dtype=np.float64).reshape(-1, 3)
    edges_arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
    validate_topology(len(positions), edges_arr)
    if not np.all(np.isfinite(positions)):
        raise ValueError(f"{path}: non-finite vertex coordinates")
    return positions, edges_arr, header


def save_mesh_obj(path: str | Path, mesh: ClothMesh, state: Optional[ClothState] = None) -> None:
    pos = mesh.vertices if state is None else state.positions
    header = {"num_x": mesh.num_x, "num_y": mesh.num_y, "spacing": repr(mesh.spacing)}
    write_obj(path, pos, mesh.edges, header)


def load_mesh_obj(path: str | Path) -> tuple[ClothMesh, ClothState]:
    """Load a mesh written by :func:`save_mesh_obj`; rebuilds the rest grid from the header."""
    positions, edges, header = read_obj(path)
    mesh = build_grid_cloth(int(header["num_x"]), int(header["num_y"]), float(header["spacing"]))
    if not np.array_equal(edges, mesh.edges):
        raise ValueError(f"{path}: edge list does not match a {mesh.num_x}x{mesh.num_y} grid")
    return mesh, ClothState(positions, np.zeros_like(positions))
