"""Triangle mesh container, OBJ I/O, validation and adjacency queries.

Faces are wound counter-clockwise when seen from outside, so the face
normal is ``(p1 - p0) x (p2 - p0)`` normalised.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import InvalidMeshError, IsolatedVertexError, ParseError

DEGENERATE_AREA = 1e-12


class TriangleMesh:
    """Immutable vertex/face arrays.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
    faces : array_like, shape (F, 3)
        0-based vertex indices.

    Raises
    ------
    InvalidMeshError
        If a face references a missing vertex or repeats an index.
    """

    __slots__ = ("vertices", "faces")

    def __init__(self, vertices, faces):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidMeshError("vertex coordinates must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                bad = int(np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))[0])
                raise InvalidMeshError(f"face {bad} references a vertex outside [0, {len(v)})")
            rep = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if rep.any():
                raise InvalidMeshError(f"face {int(np.flatnonzero(rep)[0])} repeats a vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def __setattr__(self, name, value):
        raise AttributeError("TriangleMesh is immutable")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(self.faces, other.faces)

    def __hash__(self):
        return hash((self.vertices.tobytes(), self.faces.tobytes()))

    def __repr__(self):
        return f"TriangleMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces)

    def compact(self) -> tuple["TriangleMesh", np.ndarray]:
        """Drop unreferenced vertices.

        Returns the new mesh and ``kept``, the original index of every
        surviving vertex.
        """
        kept = np.unique(self.faces)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[kept] = np.arange(len(kept))
        return TriangleMesh(self.vertices[kept], remap[self.faces]), kept


@dataclass(frozen=True)
class ValidationReport:
    degenerate_face_count: int
    non_manifold_edge_count: int
    duplicate_face_count: int
    euler_characteristic: int
    bounding_box: Optional[tuple]
    vertex_count: int = 0
    face_count: int = 0
    boundary_edge_count: int = 0
    inconsistent_edge_count: int = 0
    unreferenced_vertex_count: int = 0

    @property
    def defect_count(self) -> int:
        return (
            self.degenerate_face_count
            + self.non_manifold_edge_count
            + self.duplicate_face_count
            + self.boundary_edge_count
            + self.inconsistent_edge_count
            + self.unreferenced_vertex_count
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.bounding_box is not None:
            lo, hi = self.bounding_box
            d["bounding_box"] = {"min": list(lo), "max": list(hi)}
        return d


# ---------------------------------------------------------------------------
# OBJ


def _face_index(token: str, n_so_far: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ParseError(f"non-numeric face index {token!r}", lineno) from None
    if idx == 0:
        raise ParseError("face index 0 is invalid in OBJ", lineno)
    return idx - 1 if idx > 0 else n_so_far + idx


def parse_obj(data: bytes) -> TriangleMesh:
    """Parse ASCII Wavefront OBJ.

    Only ``v`` and ``f`` records are read. Polygons are fan-triangulated
    from their first vertex and indices are converted to 0-based.
    """
    if isinstance(data, str):
        data = data.encode()
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(f"input is not ASCII (byte offset {exc.start})") from None

    vertices = []
    faces = []
    face_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError("vertex needs three coordinates", lineno)
            try:
                vertices.append([float(t) for t in parts[1:4]])
            except ValueError:
                raise ParseError(f"non-numeric vertex coordinate in {raw.strip()!r}", lineno) from None
        elif tag == "f":
            if len(parts) < 4:
                raise ParseError("face needs at least three vertices", lineno)
            idx = [_face_index(t, len(vertices), lineno) for t in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
                face_lines.append(lineno)

    nv = len(vertices)
    for (a, b, c), lineno in zip(faces, face_lines):
        for i in (a, b, c):
            if i < 0 or i >= nv:
                raise ParseError(f"face index {i + 1} out of range (have {nv} vertices)", lineno)
        if a == b or b == c or a == c:
            raise ParseError("face repeats a vertex index", lineno)
    return TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: TriangleMesh) -> bytes:
    # .17g round-trips every float64 exactly
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return ("\n".join(lines) + "\n").encode("ascii")


def read_obj(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        return parse_obj(fh.read())


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_obj(mesh))


# ---------------------------------------------------------------------------
# geometry helpers


def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalised face normals ``(p1 - p0) x (p2 - p0)``; norm is twice the area."""
    p0 = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - p0, vertices[faces[:, 2]] - p0)


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh.vertices, mesh.faces), axis=1)


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit face normals; degenerate faces get a zero vector."""
    c = face_cross(mesh.vertices, mesh.faces)
    n = np.linalg.norm(c, axis=1)
    out = np.zeros_like(c)
    ok = 0.5 * n >= DEGENERATE_AREA
    out[ok] = c[ok] / n[ok, None]
    return out


def _undirected_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.sort(e, axis=1)


def validate(mesh: TriangleMesh, degenerate_area: float = DEGENERATE_AREA) -> ValidationReport:
    """Count structural defects. Never raises."""
    faces = mesh.faces
    nv, nf = mesh.n_vertices, mesh.n_faces
    if nf:
        areas = face_areas(mesh)
        degenerate = int(np.count_nonzero(areas < degenerate_area))
        und = _undirected_edges(faces)
        uniq, counts = np.unique(und, axis=0, return_counts=True)
        n_edges = len(uniq)
        non_manifold = int(np.count_nonzero(counts > 2))
        boundary = int(np.count_nonzero(counts == 1))
        directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        inconsistent = int(np.count_nonzero(dcounts > 1))
        duplicate = nf - len(np.unique(np.sort(faces, axis=1), axis=0))
        unreferenced = nv - len(np.unique(faces))
    else:
        degenerate = non_manifold = boundary = inconsistent = duplicate = n_edges = 0
        unreferenced = nv
    bbox = None
    if nv:
        bbox = (tuple(mesh.vertices.min(0).tolist()), tuple(mesh.vertices.max(0).tolist()))
    return ValidationReport(
        degenerate_face_count=degenerate,
        non_manifold_edge_count=non_manifold,
        duplicate_face_count=duplicate,
        euler_characteristic=nv - n_edges + nf,
        bounding_box=bbox,
        vertex_count=nv,
        face_count=nf,
        boundary_edge_count=boundary,
        inconsistent_edge_count=inconsistent,
        unreferenced_vertex_count=unreferenced,
    )


def vertex_normal_sums(vertices: np.ndarray, faces: np.ndarray, cross: Optional[np.ndarray] = None) -> np.ndarray:
    """Area-weighted normal sums, i.e. half the sum of incident face cross products."""
    if cross is None:
        cross = face_cross(vertices, faces)
    s = np.zeros((len(vertices), 3))
    for k in range(3):
        np.add.at(s, faces[:, k], 0.5 * cross)
    return s


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit per-vertex normals from area-weighted incident face normals.

    Raises
    ------
    IsolatedVertexError
        For the first vertex that no non-degenerate face uses.
    """
    cross = face_cross(mesh.vertices, mesh.faces)
    ok = 0.5 * np.linalg.norm(cross, axis=1) >= DEGENERATE_AREA
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces[ok].ravel()] = True
    if not used.all():
        raise IsolatedVertexError(int(np.flatnonzero(~used)[0]))
    s = vertex_normal_sums(mesh.vertices, mesh.faces[ok], cross[ok])
    norm = np.linalg.norm(s, axis=1)
    if np.any(norm == 0.0):
        bad = int(np.flatnonzero(norm == 0.0)[0])
        raise InvalidMeshError(f"incident face normals of vertex {bad} cancel out")
    return s / norm[:, None]


# ---------------------------------------------------------------------------
# adjacency


@dataclass(frozen=True)
class FaceAdjacency:
    """Dual graph. Neighbour tuples are sorted by face index."""

    edge_neighbors: tuple
    vertex_neighbors: tuple

    def edge_degree(self) -> np.ndarray:
        return np.array([len(n) for n in self.edge_neighbors], dtype=np.int64)


def face_adjacency(mesh: TriangleMesh) -> FaceAdjacency:
    faces = mesh.faces.tolist()
    by_edge = defaultdict(list)
    by_vertex = defaultdict(list)
    for fi, (a, b, c) in enumerate(faces):
        for e in ((a, b), (b, c), (c, a)):
            by_edge[(min(e), max(e))].append(fi)
        for v in (a, b, c):
            by_vertex[v].append(fi)
    edge_nb = [set() for _ in faces]
    vert_nb = [set() for _ in faces]
    for group in by_edge.values():
        for f in group:
            edge_nb[f].update(group)
    for group in by_vertex.values():
        for f in group:
            vert_nb[f].update(group)
    for fi in range(len(faces)):
        edge_nb[fi].discard(fi)
        vert_nb[fi].discard(fi)
    return FaceAdjacency(
        edge_neighbors=tuple(tuple(sorted(s)) for s in edge_nb),
        vertex_neighbors=tuple(tuple(sorted(s)) for s in vert_nb),
    )
