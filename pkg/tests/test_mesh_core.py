import numpy as np
import pytest
from hypothesis import given, strategies as st

from meshpref import primitives
from meshpref.errors import InvalidMeshError, IsolatedVertexError, ParseError
from meshpref.mesh_core import (
    TriangleMesh,
    face_adjacency,
    parse_obj,
    validate,
    vertex_normals,
    write_obj,
)
from oracles import random_rotation

TRI = b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3"


def test_parse_minimal():
    m = parse_obj(TRI)
    assert m.n_vertices == 3
    assert m.faces.tolist() == [[0, 1, 2]]


def test_parse_quad_fans_from_first_vertex():
    m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_parse_slash_syntax_and_negative_indices():
    m = parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf -3/1/1 -2/1/1 -1/1/1\n# note\n")
    assert m.faces.tolist() == [[0, 1, 2]]


def test_parse_index_out_of_range():
    with pytest.raises(ParseError) as e:
        parse_obj(b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    assert e.value.line == 4


def test_parse_non_numeric_token_reports_line():
    with pytest.raises(ParseError) as e:
        parse_obj(b"v 0 0 0\nv 1 x 0\n")
    assert e.value.line == 2


def test_repeated_index_rejected():
    with pytest.raises(InvalidMeshError):
        TriangleMesh(np.zeros((3, 3)), [[0, 0, 1]])


def test_write_single_triangle():
    lines = write_obj(parse_obj(TRI)).decode().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 3
    assert sum(l.startswith("f ") for l in lines) == 1


@given(st.integers(0, 2**31 - 1), st.integers(4, 30), st.integers(1, 40))
def test_round_trip_is_identity(seed, nv, nf):
    rng = np.random.default_rng(seed)
    verts = rng.standard_normal((nv, 3)) * 10 ** rng.uniform(-6, 6)
    faces = np.array([rng.choice(nv, 3, replace=False) for _ in range(nf)])
    m = TriangleMesh(verts, faces)
    back = parse_obj(write_obj(m))
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_empty_face_mesh_serialises_and_is_flagged():
    m = TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int))
    assert write_obj(m).count(b"\nv ") + 1 == 3
    rep = validate(m)
    assert rep.face_count == 0 and rep.unreferenced_vertex_count == 3


def test_validate_box():
    rep = validate(primitives.box(1))
    assert rep.euler_characteristic == 2
    assert rep.non_manifold_edge_count == 0
    assert rep.defect_count == 0
    assert rep.to_dict()["bounding_box"] == {"min": [-1.0, -1.0, -1.0], "max": [1.0, 1.0, 1.0]}


def test_validate_collinear_face_is_degenerate():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    assert validate(m).degenerate_face_count == 1


def test_validate_three_faces_on_one_edge():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
    m = TriangleMesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    assert validate(m).non_manifold_edge_count == 1


def test_validate_duplicate_faces():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2], [1, 2, 0]])
    assert validate(m).duplicate_face_count == 1


def test_vertex_normals_flat_grid():
    n = vertex_normals(primitives.grid(5, 4))
    assert np.allclose(n, [0, 0, 1], atol=1e-12)


def test_vertex_normals_octahedron_radial():
    m = primitives.octahedron()
    n = vertex_normals(m)
    radial = m.vertices - m.vertices.mean(0)
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    assert np.allclose(n, radial, atol=1e-12)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)


def test_vertex_normals_isolated_vertex():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])
    with pytest.raises(IsolatedVertexError) as e:
        vertex_normals(m)
    assert e.value.vertex == 3


def test_vertex_normals_face_order_and_rotation():
    rng = np.random.default_rng(3)
    m = primitives.torus()
    n = vertex_normals(m)
    perm = rng.permutation(m.n_faces)
    assert np.allclose(vertex_normals(TriangleMesh(m.vertices, m.faces[perm])), n, atol=1e-12)
    R = random_rotation(rng)
    assert np.allclose(vertex_normals(m.with_vertices(m.vertices @ R.T)), n @ R.T, atol=1e-9)


def test_adjacency_shared_edge_and_shared_vertex():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [-1, -1, 0], [-1, 0, 0]]
    adj = face_adjacency(TriangleMesh(v, [[0, 1, 2], [1, 3, 2], [0, 5, 4]]))
    assert adj.edge_neighbors[0] == (1,) and adj.edge_neighbors[1] == (0,)
    assert 2 in adj.vertex_neighbors[0] and 2 not in adj.edge_neighbors[0]


def test_adjacency_closed_box():
    adj = face_adjacency(primitives.box(1))
    assert all(len(e) == 3 for e in adj.edge_neighbors)
    for e, v in zip(adj.edge_neighbors, adj.vertex_neighbors):
        assert set(e) <= set(v)


@given(st.integers(0, 2**31 - 1))
def test_edge_degree_sum_even(seed):
    rng = np.random.default_rng(seed)
    faces = np.array([rng.choice(8, 3, replace=False) for _ in range(rng.integers(1, 25))])
    adj = face_adjacency(TriangleMesh(rng.standard_normal((8, 3)), faces))
    assert sum(len(e) for e in adj.edge_neighbors) % 2 == 0


@pytest.mark.parametrize("mesh,chi", [
    (primitives.icosphere(2), 2), (primitives.box(4), 2), (primitives.cylinder(), 2), (primitives.torus(), 0),
])
def test_primitives_closed_and_consistent(mesh, chi):
    rep = validate(mesh)
    assert rep.euler_characteristic == chi
    assert rep.defect_count == 0
