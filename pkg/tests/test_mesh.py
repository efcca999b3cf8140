import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clothtrack.mesh import (
    BENDING,
    SHEAR,
    STRUCTURAL,
    ClothMesh,
    ClothState,
    LowLevelAction,
    PickPlaceAction,
    Segment,
    Trajectory,
    build_grid_cloth,
    load_mesh_obj,
    nearest_vertex,
    read_obj,
    save_mesh_obj,
    validate_topology,
    write_obj,
)


def enumerate_grid_edges(nx, ny, spacing):
    """Oracle: classify every vertex pair of the grid by its index offset."""
    coords = [(i, j) for j in range(ny) for i in range(nx)]
    kinds = {STRUCTURAL: set(), SHEAR: set(), BENDING: set()}
    for a, b in itertools.combinations(range(len(coords)), 2):
        (i0, j0), (i1, j1) = coords[a], coords[b]
        di, dj = abs(i0 - i1), abs(j0 - j1)
        if (di, dj) in ((1, 0), (0, 1)):
            kinds[STRUCTURAL].add((a, b))
        elif (di, dj) == (1, 1):
            kinds[SHEAR].add((a, b))
        elif (di, dj) in ((2, 0), (0, 2)):
            kinds[BENDING].add((a, b))
    return kinds


def test_two_by_two_edge_counts():
    m = build_grid_cloth(2, 2, 0.01)
    assert m.num_vertices == 4
    assert len(m.edges_of_kind(STRUCTURAL)) == 4
    assert len(m.edges_of_kind(SHEAR)) == 2
    assert len(m.edges_of_kind(BENDING)) == 0
    assert m.num_edges == 6


def test_two_by_two_rest_lengths():
    m = build_grid_cloth(2, 2, 0.01)
    np.testing.assert_allclose(m.rest_lengths[m.edge_kinds == STRUCTURAL], 0.01, rtol=0, atol=1e-15)
    np.testing.assert_allclose(m.rest_lengths[m.edge_kinds == SHEAR], 0.01 * np.sqrt(2), rtol=0, atol=1e-15)


def test_three_by_three_edge_counts():
    m = build_grid_cloth(3, 3, 0.01)
    assert m.num_vertices == 9
    counts = [len(m.edges_of_kind(k)) for k in (STRUCTURAL, SHEAR, BENDING)]
    assert counts == [12, 8, 6]
    assert m.num_edges == 26


@pytest.mark.parametrize("nx,ny", [(2, 2), (3, 3), (4, 7), (6, 5)])
def test_edges_match_exhaustive_enumeration(nx, ny):
    m = build_grid_cloth(nx, ny, 0.02)
    oracle = enumerate_grid_edges(nx, ny, 0.02)
    for kind, pairs in oracle.items():
        got = {tuple(sorted(map(int, e))) for e in m.edges_of_kind(kind)}
        assert got == pairs


def test_vertex_layout_row_major_and_flat():
    m = build_grid_cloth(4, 3, 0.5)
    assert np.all(m.vertices[:, 2] == 0)
    # vertex j * num_x + i sits at column i, row j
    assert m.vertices[1, 0] - m.vertices[0, 0] == pytest.approx(0.5)
    assert m.vertices[4, 1] - m.vertices[0, 1] == pytest.approx(0.5)
    np.testing.assert_allclose(m.vertices[:, :2].mean(axis=0), 0.0, atol=1e-15)


@pytest.mark.parametrize("args", [(1, 3, 0.01), (3, 1, 0.01), (3, 3, 0.0), (3, 3, -0.1), (2.5, 3, 0.01)])
def test_build_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_grid_cloth(*args)


def test_build_is_deterministic():
    a, b = build_grid_cloth(7, 5, 0.013), build_grid_cloth(7, 5, 0.013)
    assert a == b
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert a.edges.tobytes() == b.edges.tobytes()


def test_interior_degree():
    m = build_grid_cloth(7, 7, 0.01)
    deg = {k: np.bincount(m.edges_of_kind(k).ravel(), minlength=m.num_vertices) for k in (STRUCTURAL, SHEAR, BENDING)}
    center = 3 * 7 + 3
    assert deg[STRUCTURAL][center] == 4
    assert deg[SHEAR][center] == 4
    assert deg[BENDING][center] == 4
    assert deg[BENDING].max() <= 4


@given(st.integers(2, 9), st.integers(2, 9), st.floats(1e-3, 1.0))
def test_rest_length_consistency(nx, ny, spacing):
    m = build_grid_cloth(nx, ny, spacing)
    measured = np.linalg.norm(m.vertices[m.edges[:, 0]] - m.vertices[m.edges[:, 1]], axis=1)
    assert np.max(np.abs(measured - m.rest_lengths)) <= 1e-9
    validate_topology(m.num_vertices, m.edges)
    canon = {tuple(sorted(e)) for e in m.edges.tolist()}
    assert len(canon) == m.num_edges


def test_mesh_arrays_are_read_only():
    m = build_grid_cloth(3, 3, 0.01)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


@pytest.mark.parametrize(
    "edges", [[[0, 4]], [[1, 1]], [[0, 1], [1, 0]], [[-1, 2]]]
)
def test_validate_topology_rejects(edges):
    with pytest.raises(ValueError):
        validate_topology(4, np.array(edges))


def test_mesh_rejects_inconsistent_rest_length():
    m = build_grid_cloth(2, 2, 0.01)
    with pytest.raises(ValueError):
        ClothMesh(2, 2, 0.01, m.vertices, m.edges, m.rest_lengths + 1e-6, m.edge_kinds)


def test_state_invariants():
    with pytest.raises(ValueError):
        ClothState(np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ClothState(np.array([[0.0, np.nan, 0.0]]), np.zeros((1, 3)))
    s = ClothState(np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        s.check_matches(build_grid_cloth(3, 3, 0.01))


def test_nearest_vertex_examples():
    single = ClothState(np.array([[0.3, 0.2, 0.1]]), np.zeros((1, 3)))
    assert nearest_vertex(single, (5.0, -2.0, 1.0)) == 0
    two = ClothState(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.zeros((2, 3)))
    assert nearest_vertex(two, (0.4, 0, 0)) == 0
    same = ClothState(np.array([[0.5, 0.5, 0], [0.5, 0.5, 0]]), np.zeros((2, 3)))
    assert nearest_vertex(same, (0.0, 3.0, 1.0)) == 0


@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=1, max_size=12), st.tuples(st.integers(-4, 4), st.integers(-4, 4)))
def test_nearest_vertex_matches_scan(points, query):
    # integer lattice makes exact ties common
    pos = np.array([[x, y, 0.0] for x, y in points])
    q = np.array([query[0], query[1], 0.0])
    d = [float(np.sum((p - q) ** 2)) for p in pos]
    assert nearest_vertex(pos, q) == d.index(min(d))


def test_low_level_action_invariants():
    with pytest.raises(ValueError):
        LowLevelAction(None, np.array([0.0, 0.0, 0.01]), False)
    with pytest.raises(ValueError):
        LowLevelAction(None, np.zeros(3), True)
    a = LowLevelAction(3, np.array([0.0, 0.0, 0.01]), True)
    assert LowLevelAction.from_dict(a.to_dict()) == a
    assert LowLevelAction.idle() == LowLevelAction()


def test_pick_place_invariants():
    with pytest.raises(ValueError):
        PickPlaceAction((0, 0, 0), (1, 0, 0), lift_height=0.0)
    with pytest.raises(ValueError):
        PickPlaceAction((0, 0, 0), (1, 0, 0), num_substeps=0)


def test_segment_and_trajectory_invariants():
    with pytest.raises(ValueError):
        Segment([LowLevelAction()], [])
    s0 = ClothState(np.zeros((1, 3)), np.zeros((1, 3)))
    seg = Segment([LowLevelAction()], [np.zeros((1, 3))])
    with pytest.raises(ValueError):
        Trajectory(s0, [seg], ground_truth_states=[])
    assert Trajectory(s0, [seg]).num_segments == 1


def test_obj_round_trip(tmp_path):
    m = build_grid_cloth(4, 3, 0.007)
    state = ClothState(m.vertices + np.random.default_rng(0).normal(0, 1e-3, m.vertices.shape), np.zeros_like(m.vertices))
    path = tmp_path / "m.obj"
    save_mesh_obj(path, m, state)
    mesh2, loaded = load_mesh_obj(path)
    assert mesh2 == m
    pos = loaded.positions
    assert np.array_equal(pos, state.positions)
    write_obj(tmp_path / "bare.obj", pos, m.edges)
    p2, e2, header = read_obj(tmp_path / "bare.obj")
    assert header == {} and np.array_equal(e2, m.edges) and np.array_equal(p2, pos)
