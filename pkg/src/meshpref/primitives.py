"""Closed primitive meshes with outward counter-clockwise winding."""

from __future__ import annotations

import numpy as np

from .mesh_core import TriangleMesh


def _weld(vertices, faces, decimals=12):
    key = np.round(np.asarray(vertices), decimals) + 0.0
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return np.asarray(vertices)[first[order]], rank[inverse.ravel()][np.asarray(faces)]


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron; 20 * 4**subdivisions faces."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return TriangleMesh(radius * np.array(verts), faces)


def grid(nx: int = 8, ny: int = 8, size: float = 1.0) -> TriangleMesh:
    """Flat ``nx`` x ``ny`` cell grid in z = 0, normals +z; 2*nx*ny faces."""
    xs = np.linspace(0.0, size, nx + 1)
    ys = np.linspace(0.0, size, ny + 1)
    verts = [(x, y, 0.0) for y in ys for x in xs]
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, faces)


def box(divisions: int = 1, half_extent: float = 1.0) -> TriangleMesh:
    """Axis-aligned cube; 12 * divisions**2 faces, 8 vertices when divisions == 1."""
    n = divisions
    u = np.linspace(-half_extent, half_extent, n + 1)
    verts, faces = [], []
    # (normal axis, sign): the two in-plane axes are ordered so that a x b = sign * normal
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a_ax, b_ax = (axis + 1) % 3, (axis + 2) % 3
            if sign < 0:
                a_ax, b_ax = b_ax, a_ax
            base = len(verts)
            for j in range(n + 1):
                for i in range(n + 1):
                    p = [0.0, 0.0, 0.0]
                    p[axis] = sign * half_extent
                    p[a_ax] = u[i]
                    p[b_ax] = u[j]
                    verts.append(p)
            for j in range(n):
                for i in range(n):
                    a = base + j * (n + 1) + i
                    b, c, d = a + 1, a + n + 2, a + n + 1
                    faces += [(a, b, c), (a, c, d)]
    v, f = _weld(verts, faces)
    return TriangleMesh(v, f)


def torus(major: float = 1.0, minor: float = 0.35, nu: int = 16, nv: int = 8) -> TriangleMesh:
    verts, faces = [], []
    for i in range(nu):
        th = 2 * np.pi * i / nu
        for j in range(nv):
            ph = 2 * np.pi * j / nv
            r = major + minor * np.cos(ph)
            verts.append((r * np.cos(th), r * np.sin(th), minor * np.sin(ph)))
    for i in range(nu):
        for j in range(nv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, faces)


def cylinder(radius: float = 1.0, height: float = 2.0, segments: int = 16, rings: int = 4) -> TriangleMesh:
    """Capped cylinder along z with fan caps around centre vertices."""
    verts, faces = [], []
    zs = np.linspace(-height / 2, height / 2, rings + 1)
    for z in zs:
        for s in range(segments):
            t = 2 * np.pi * s / segments
            verts.append((radius * np.cos(t), radius * np.sin(t), z))
    for r in range(rings):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = b + segments
            d = a + segments
            faces += [(a, b, c), (a, c, d)]
    bottom = len(verts)
    verts.append((0.0, 0.0, zs[0]))
    top = len(verts)
    verts.append((0.0, 0.0, zs[-1]))
    top_ring = rings * segments
    for s in range(segments):
        faces.append((bottom, (s + 1) % segments, s))
        faces.append((top, top_ring + s, top_ring + (s + 1) % segments))
    return TriangleMesh(verts, faces)


def octahedron(radius: float = 1.0) -> TriangleMesh:
    v = radius * np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)], dtype=float)
    f = [(0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4), (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5)]
    return TriangleMesh(v, f)


def signed_volume(mesh: TriangleMesh) -> float:
    p = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)
