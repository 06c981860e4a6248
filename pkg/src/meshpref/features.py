"""Per-face 10-dimensional geometric descriptors.

Column layout: ``area, angle0..2, nx, ny, nz, dot0..2``. Angles are sorted
ascending and the face-normal/vertex-normal dots follow the same vertex
order, which makes the row independent of how the face's vertex triple is
rotated.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFaceError, FormatError
from .mesh_core import DEGENERATE_AREA, TriangleMesh, face_cross, vertex_normal_sums, vertex_normals

FEATURE_DIM = 10
COLUMNS = ("area", "angle0", "angle1", "angle2", "nx", "ny", "nz", "dot0", "dot1", "dot2")
MAGIC = b"MPF1"


@dataclass(frozen=True)
class FaceFeature:
    area: float
    interior_angles: tuple
    face_normal: tuple
    normal_dots: tuple

    def as_array(self) -> np.ndarray:
        return np.array([self.area, *self.interior_angles, *self.face_normal, *self.normal_dots])


def _angles(p: np.ndarray) -> np.ndarray:
    """Interior angles of triangles ``p`` (F, 3, 3) by the law of cosines."""
    side = np.linalg.norm(p[:, [1, 2, 0]] - p[:, [2, 0, 1]], axis=2)  # side opposite vertex k
    u = side[:, [2, 0, 1]]  # |p_{k+1} - p_k|
    w = side[:, [1, 2, 0]]  # |p_{k+2} - p_k|
    cos = (u ** 2 + w ** 2 - side ** 2) / (2.0 * u * w)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def face_feature(mesh: TriangleMesh, vertex_normals: np.ndarray, face_index: int) -> FaceFeature:
    """Descriptor of a single face."""
    face = mesh.faces[face_index]
    p = mesh.vertices[face]
    c = np.cross(p[1] - p[0], p[2] - p[0])
    norm = float(np.linalg.norm(c))
    area = 0.5 * norm
    if area < DEGENERATE_AREA:
        raise DegenerateFaceError(face_index)
    n = c / norm
    ang = _angles(p[None])[0]
    order = np.argsort(ang, kind="stable")
    dots = np.clip(np.asarray(vertex_normals)[face] @ n, -1.0, 1.0)
    return FaceFeature(
        area=area,
        interior_angles=tuple(ang[order].tolist()),
        face_normal=tuple(n.tolist()),
        normal_dots=tuple(dots[order].tolist()),
    )


class FeatureTape:
    """Forward pass of :func:`featurize` keeping what the vertex VJP needs."""

    def __init__(self, mesh: TriangleMesh):
        v, f = mesh.vertices, mesh.faces
        self.mesh = mesh
        cross = face_cross(v, f)
        cnorm = np.linalg.norm(cross, axis=1)
        bad = np.flatnonzero(0.5 * cnorm < DEGENERATE_AREA)
        if len(bad):
            raise DegenerateFaceError(int(bad[0]))
        n = cross / cnorm[:, None]
        vn = vertex_normals(mesh)
        s = vertex_normal_sums(v, f, cross)
        p = v[f]
        ang = _angles(p)
        order = np.argsort(ang, axis=1, kind="stable")
        raw_dots = np.einsum("fkj,fj->fk", vn[f], n)
        dots = np.clip(raw_dots, -1.0, 1.0)
        rows = np.arange(len(f))[:, None]
        self.features = np.concatenate(
            [0.5 * cnorm[:, None], ang[rows, order], n, dots[rows, order]], axis=1
        )
        self._cross, self._cnorm, self._n = cross, cnorm, n
        self._vn, self._snorm = vn, np.linalg.norm(s, axis=1)
        self._order, self._ang = order, ang
        self._dot_live = np.abs(raw_dots) <= 1.0

    def vjp(self, grad: np.ndarray) -> np.ndarray:
        """Pull a (F, 10) feature gradient back to a (V, 3) vertex gradient."""
        v, f = self.mesh.vertices, self.mesh.faces
        grad = np.asarray(grad, dtype=np.float64)
        nf = len(f)
        rows = np.arange(nf)[:, None]
        g_area = grad[:, 0]
        g_ang = np.zeros((nf, 3))
        g_ang[rows, self._order] = grad[:, 1:4]
        g_n = grad[:, 4:7].copy()
        g_dot = np.zeros((nf, 3))
        g_dot[rows, self._order] = grad[:, 7:10]
        g_dot *= self._dot_live

        n, vn = self._n, self._vn
        g_n += np.einsum("fk,fkj->fj", g_dot, vn[f])
        g_vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(g_vn, f[:, k], g_dot[:, k, None] * n)
        g_s = (g_vn - vn * np.einsum("ij,ij->i", vn, g_vn)[:, None]) / self._snorm[:, None]

        g_c = 0.5 * n * g_area[:, None]
        g_c += (g_n - n * np.einsum("ij,ij->i", n, g_n)[:, None]) / self._cnorm[:, None]
        g_c += 0.5 * (g_s[f[:, 0]] + g_s[f[:, 1]] + g_s[f[:, 2]])

        p = v[f]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        g_e1 = np.cross(e2, g_c)
        g_e2 = np.cross(g_c, e1)
        g_p = np.zeros((nf, 3, 3))
        g_p[:, 0] = -(g_e1 + g_e2)
        g_p[:, 1] = g_e1
        g_p[:, 2] = g_e2

        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            u = p[:, a] - p[:, k]
            w = p[:, b] - p[:, k]
            lu = np.linalg.norm(u, axis=1)
            lw = np.linalg.norm(w, axis=1)
            uh, wh = u / lu[:, None], w / lw[:, None]
            cos = np.cos(self._ang[:, k])[:, None]
            sin = np.linalg.norm(np.cross(uh, wh), axis=1)[:, None]
            du = -(wh - cos * uh) / (lu[:, None] * sin)
            dw = -(uh - cos * wh) / (lw[:, None] * sin)
            gk = g_ang[:, k, None]
            g_p[:, a] += gk * du
            g_p[:, b] += gk * dw
            g_p[:, k] -= gk * (du + dw)

        out = np.zeros_like(v)
        for k in range(3):
            np.add.at(out, f[:, k], g_p[:, k])
        return out


def featurize(mesh: TriangleMesh) -> np.ndarray:
    """(F, 10) feature matrix, row ``i`` describing face ``i``."""
    return FeatureTape(mesh).features


# ---------------------------------------------------------------------------
# serialisation


def write_mpf(matrix: np.ndarray) -> bytes:
    """``MPF1`` + u32 rows + u32 cols + row-major little-endian float64."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise FormatError("MPF1 stores 2-D matrices only")
    return MAGIC + struct.pack("<II", *m.shape) + m.tobytes()


def read_mpf(data: bytes) -> np.ndarray:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("missing MPF1 magic")
    rows, cols = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != rows * cols * 8:
        raise FormatError(f"MPF1 payload holds {len(body)} bytes, expected {rows * cols * 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_csv(matrix: np.ndarray, header=None) -> bytes:
    buf = io.StringIO()
    m = np.asarray(matrix, dtype=np.float64)
    if header is None and m.shape[1] == FEATURE_DIM:
        header = COLUMNS
    if header:
        buf.write(",".join(header) + "\n")
    for row in m.tolist():
        buf.write(",".join(repr(x) for x in row) + "\n")
    return buf.getvalue().encode("ascii")


def read_csv(data: bytes) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(data.decode("ascii").splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            if lineno == 1 and not rows:
                continue  # header
            raise FormatError(f"non-numeric CSV cell on line {lineno}") from None
    if not rows:
        raise FormatError("CSV holds no numeric rows")
    if len({len(r) for r in rows}) != 1:
        raise FormatError("CSV rows have differing lengths")
    return np.array(rows, dtype=np.float64)


def load_matrix(path) -> np.ndarray:
    """Read a matrix from an MPF1 or CSV file, sniffing the magic."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == MAGIC:
        return read_mpf(data)
    return read_csv(data)
