"""Bring meshes into the reward model's input shape.

``qem_simplify`` decimates by quadric-error edge collapse, ``adaptive_fuse``
merges near-coplanar neighbouring faces, and ``patchify`` lays faces out on
the fixed 256 x 64 patch grid.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, InvalidMeshError, InvalidTargetError, ShapeError, SimplificationError
from .mesh_core import DEGENERATE_AREA, TriangleMesh, face_adjacency, face_cross

N_PATCHES = 256
PATCH_SIZE = 64
MAX_FACES = N_PATCHES * PATCH_SIZE
SINGULAR_CONDITION = 1e12


# ---------------------------------------------------------------------------
# QEM


def _plane_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if 0.5 * norm < DEGENERATE_AREA:
        return None
    n = n / norm
    plane = np.append(n, -n @ p0)
    return np.outer(plane, plane)


def _optimal_position(Q, pu, pv):
    A, b = Q[:3, :3], Q[:3, 3]
    if np.linalg.cond(A) <= SINGULAR_CONDITION:
        x = np.linalg.solve(A, -b)
    else:
        x = 0.5 * (pu + pv)
    cost = float(x @ A @ x + 2.0 * b @ x + Q[3, 3])
    return max(cost, 0.0), x


class _Decimator:
    def __init__(self, mesh: TriangleMesh):
        self.pos = mesh.vertices.copy()
        self.faces = [list(f) for f in mesh.faces.tolist()]
        self.alive = [True] * len(self.faces)
        self.n_alive = len(self.faces)
        self.vf = [set() for _ in range(len(self.pos))]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vf[v].add(fi)
        self.Q = np.zeros((len(self.pos), 4, 4))
        for f in self.faces:
            q = _plane_quadric(*self.pos[f])
            if q is not None:
                for v in f:
                    self.Q[v] += q
        self.version = [0] * len(self.pos)
        self.heap = []

    def neighbors(self, v):
        out = set()
        for fi in self.vf[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def push(self, u, v):
        if u > v:
            u, v = v, u
        cost, x = _optimal_position(self.Q[u] + self.Q[v], self.pos[u], self.pos[v])
        heapq.heappush(self.heap, (cost, u, v, self.version[u], self.version[v], x))

    def seed_heap(self):
        self.heap = []
        edges = set()
        for fi, f in enumerate(self.faces):
            if self.alive[fi]:
                for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                    edges.add((min(a, b), max(a, b)))
        for u, v in sorted(edges):
            self.push(u, v)

    def try_collapse(self, u, v, x) -> bool:
        shared = self.vf[u] & self.vf[v]
        if not shared:
            return False
        # link condition: common neighbours are exactly the opposite vertices of the edge's faces
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {u, v}
        if (self.neighbors(u) & self.neighbors(v)) != opposite:
            return False
        keep = (self.vf[u] | self.vf[v]) - shared
        existing = {tuple(sorted(self.faces[fi])) for fi in self.vf[u] - shared}
        for fi in keep:
            f = self.faces[fi]
            p = self.pos[f]
            old = np.cross(p[1] - p[0], p[2] - p[0])
            q = p.copy()
            for k in range(3):
                if f[k] == u or f[k] == v:
                    q[k] = x
            new = np.cross(q[1] - q[0], q[2] - q[0])
            if 0.5 * np.linalg.norm(new) < DEGENERATE_AREA or old @ new <= 0.0:
                return False
            if fi in self.vf[v]:
                key = tuple(sorted(u if w == v else w for w in f))
                if key in existing:
                    return False
        for fi in shared:
            self.alive[fi] = False
            self.n_alive -= 1
            for w in self.faces[fi]:
                self.vf[w].discard(fi)
        for fi in list(self.vf[v]):
            self.faces[fi] = [u if w == v else w for w in self.faces[fi]]
            self.vf[u].add(fi)
        self.vf[v] = set()
        self.pos[u] = x
        self.Q[u] = self.Q[u] + self.Q[v]
        self.version[u] += 1
        self.version[v] += 1
        for w in sorted(self.neighbors(u)):
            self.push(u, w)
        return True

    def run(self, target):
        self.seed_heap()
        while self.n_alive > target:
            progressed = False
            while self.heap and self.n_alive > target:
                cost, u, v, vu, vv, x = heapq.heappop(self.heap)
                if vu != self.version[u] or vv != self.version[v] or not self.vf[u] or not self.vf[v]:
                    continue
                if self.try_collapse(u, v, x):
                    progressed = True
            if self.n_alive <= target:
                break
            if not progressed:
                raise SimplificationError(
                    f"no admissible edge collapse left at {self.n_alive} faces (target {target})"
                )
            self.seed_heap()

    def result(self) -> TriangleMesh:
        faces = np.array([f for f, ok in zip(self.faces, self.alive) if ok], dtype=np.int64)
        mesh, _ = TriangleMesh(self.pos, faces).compact()
        return mesh


def qem_simplify(mesh: TriangleMesh, target_faces: int) -> TriangleMesh:
    """Quadric-error edge-collapse decimation to at most ``target_faces`` faces.

    Each collapse moves the surviving vertex to the quadric minimiser (edge
    midpoint when the 3x3 system has condition number above 1e12). Collapses
    that would flip or degenerate a surviving face, or break the link
    condition, are skipped.
    """
    if int(target_faces) < 4:
        raise InvalidTargetError(f"target_faces must be >= 4, got {target_faces}")
    cross = face_cross(mesh.vertices, mesh.faces)
    if mesh.n_faces == 0 or not np.any(0.5 * np.linalg.norm(cross, axis=1) >= DEGENERATE_AREA):
        raise InvalidMeshError("mesh has no non-degenerate faces")
    if mesh.n_faces <= target_faces:
        return mesh
    dec = _Decimator(mesh)
    dec.run(int(target_faces))
    return dec.result()


# ---------------------------------------------------------------------------
# adaptive fusion


@dataclass(frozen=True)
class FusionConfig:
    normal_similarity_threshold: float = 0.99
    target_faces: int = MAX_FACES
    max_passes: int = 32

    def __post_init__(self):
        t = self.normal_similarity_threshold
        if not (-1.0 < t <= 1.0):
            raise ConfigError(f"normal_similarity_threshold must lie in (-1, 1], got {t}")
        if self.target_faces < 4:
            raise ConfigError(f"target_faces must be >= 4, got {self.target_faces}")
        if self.max_passes < 1:
            raise ConfigError(f"max_passes must be >= 1, got {self.max_passes}")


def _candidate_pairs(faces: np.ndarray):
    """Sorted (f, g) pairs, f < g, sharing at least one vertex."""
    nf = len(faces)
    inc_v = faces.ravel()
    inc_f = np.repeat(np.arange(nf), 3)
    order = np.lexsort((inc_f, inc_v))
    inc_v, inc_f = inc_v[order], inc_f[order]
    bounds = np.flatnonzero(np.diff(inc_v)) + 1
    pairs = set()
    for group in np.split(inc_f, bounds):
        g = group.tolist()
        for i in range(len(g)):
            for j in range(i + 1, len(g)):
                pairs.add((g[i], g[j]))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def _oriented(vertices, tri, ref_normal):
    a, b, c = tri
    n = np.cross(vertices[b] - vertices[a], vertices[c] - vertices[a])
    if 0.5 * np.linalg.norm(n) < DEGENERATE_AREA:
        return None
    return (a, b, c) if n @ ref_normal >= 0.0 else (a, c, b)


def _area(vertices, tri):
    a, b, c = tri
    return 0.5 * np.linalg.norm(np.cross(vertices[b] - vertices[a], vertices[c] - vertices[a]))


def _merge(vertices, f1, f2, n1, n2):
    shared = [v for v in f1 if v in f2]
    ref = n1 + n2
    if len(shared) >= 2:
        a, b = shared[0], shared[1]
        options = [w for w in f1 if w not in (a, b)] + [w for w in f2 if w not in (a, b)]
        best = max(options, key=lambda w: _area(vertices, (a, b, w)))  # first wins ties
        return _oriented(vertices, (a, b, best), ref)
    s = shared[0]

    def farthest(face):
        rest = [w for w in face if w != s]
        d = [np.linalg.norm(vertices[w] - vertices[s]) for w in rest]
        return rest[0] if d[0] >= d[1] else rest[1]

    return _oriented(vertices, (s, farthest(f1), farthest(f2)), ref)


def fuse_faces(vertices: np.ndarray, faces: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """Face-merging core of :func:`adaptive_fuse` on raw arrays.

    The first pass always runs; later passes only while the face count is
    above ``cfg.target_faces``. A pass that starts over budget stops merging
    as soon as the budget is met. Returns the new face array, still indexing
    into ``vertices``.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    for k in range(cfg.max_passes):
        over_budget = len(faces) > cfg.target_faces
        if k and not over_budget:
            break
        cross = face_cross(vertices, faces)
        norm = np.linalg.norm(cross, axis=1)
        unit = np.divide(cross, norm[:, None], out=np.zeros_like(cross), where=norm[:, None] > 0)
        pairs = _candidate_pairs(faces)
        if not len(pairs):
            break
        sim = np.einsum("ij,ij->i", unit[pairs[:, 0]], unit[pairs[:, 1]])
        keep = sim >= cfg.normal_similarity_threshold
        pairs, sim = pairs[keep], sim[keep]
        if not len(pairs):
            break
        order = np.lexsort((pairs[:, 1], pairs[:, 0], -sim))
        current = [tuple(f) for f in faces.tolist()]
        present = {tuple(sorted(f)) for f in current}
        consumed = np.zeros(len(faces), dtype=bool)
        count = len(faces)
        merged = 0
        for f, g in pairs[order].tolist():
            if over_budget and count <= cfg.target_faces:
                break
            if consumed[f] or consumed[g]:
                continue
            new = _merge(vertices, current[f], current[g], unit[f], unit[g])
            if new is None:
                continue
            key = tuple(sorted(new))
            if key in present and key not in (tuple(sorted(current[f])), tuple(sorted(current[g]))):
                continue
            present.discard(tuple(sorted(current[f])))
            present.discard(tuple(sorted(current[g])))
            present.add(key)
            current[f] = new
            current[g] = None
            consumed[f] = consumed[g] = True
            count -= 1
            merged += 1
        faces = np.array([c for c in current if c is not None], dtype=np.int64).reshape(-1, 3)
        if not merged:
            break
    return faces


def adaptive_fuse(mesh: TriangleMesh, cfg: FusionConfig = FusionConfig()) -> TriangleMesh:
    """Merge neighbouring faces with similar normals until the face budget is met.

    Edge-sharing pairs become the shared edge plus whichever third vertex
    gives the larger triangle; vertex-sharing pairs become the shared vertex
    plus the vertex of each face farthest from it. Candidates are visited in
    descending normal similarity, ties by face-index pair. Returns the input
    object itself when nothing merges.
    """
    faces = fuse_faces(mesh.vertices, mesh.faces, cfg)
    if np.array_equal(faces, mesh.faces):
        return mesh
    out, _ = TriangleMesh(mesh.vertices, faces).compact()
    return out


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchAssignment:
    patch_of_face: np.ndarray
    slot_of_face: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class PatchTensor:
    """Face features on the 256 x 64 grid; empty slots are zero and unmasked."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != (N_PATCHES, PATCH_SIZE, 10) or self.mask.shape != (N_PATCHES, PATCH_SIZE):
            raise ShapeError(f"patch tensor must be 256x64x10 with a 256x64 mask, got {self.values.shape}")

    def to_rows(self) -> np.ndarray:
        return self.values.reshape(MAX_FACES, -1)


# distances closer than this fraction of the centroid extent count as ties,
# so round-off from a rigid motion cannot change which face wins
TIE_TOLERANCE = 1e-9


def _extent(centroids: np.ndarray) -> float:
    return float(np.ptp(centroids, axis=0).max()) if len(centroids) else 0.0


def _first_max(a: np.ndarray, tol: float) -> int:
    return int(np.flatnonzero(a >= a.max() - tol)[0])


def _first_min(a: np.ndarray, tol: float) -> int:
    return int(np.flatnonzero(a <= a.min() + tol)[0])


def _farthest_point_seeds(centroids: np.ndarray, k: int) -> list:
    tol = TIE_TOLERANCE * _extent(centroids)
    seeds = [0]
    mind = np.linalg.norm(centroids - centroids[0], axis=1)
    mind[0] = -1.0
    for _ in range(1, k):
        nxt = _first_max(mind, tol)  # lowest index on ties
        seeds.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(centroids - centroids[nxt], axis=1))
        mind[seeds] = -1.0
    return seeds


def assign_patches(mesh: TriangleMesh) -> PatchAssignment:
    """Farthest-point seeds, round-robin BFS growth over edge adjacency, nearest-seed fallback."""
    nf = mesh.n_faces
    if nf > MAX_FACES:
        raise CapacityError(
            f"mesh has {nf} faces but the patch grid holds {MAX_FACES}; simplify or fuse it first"
        )
    if nf == 0:
        raise InvalidMeshError("cannot patchify a mesh without faces")
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    seeds = _farthest_point_seeds(centroids, min(N_PATCHES, nf))
    adj = face_adjacency(mesh).edge_neighbors
    patch = np.full(nf, -1, dtype=np.int64)
    slot = np.full(nf, -1, dtype=np.int64)
    count = np.zeros(N_PATCHES, dtype=np.int64)
    queues = []
    for p, s in enumerate(seeds):
        patch[s], slot[s] = p, 0
        count[p] = 1
        queues.append(deque(adj[s]))
    progress = True
    while progress:
        progress = False
        for p in range(len(seeds)):
            if count[p] >= PATCH_SIZE:
                continue
            q = queues[p]
            while q:
                f = q.popleft()
                if patch[f] < 0:
                    patch[f], slot[f] = p, count[p]
                    count[p] += 1
                    q.extend(adj[f])
                    progress = True
                    break
    seed_centroids = centroids[seeds]
    tol = TIE_TOLERANCE * _extent(centroids)
    for f in np.flatnonzero(patch < 0).tolist():
        d = np.linalg.norm(seed_centroids - centroids[f], axis=1)
        d[count[: len(seeds)] >= PATCH_SIZE] = np.inf
        p = _first_min(d, tol)
        patch[f], slot[f] = p, count[p]
        count[p] += 1
    mask = np.zeros((N_PATCHES, PATCH_SIZE), dtype=bool)
    mask[patch, slot] = True
    return PatchAssignment(patch_of_face=patch, slot_of_face=slot, mask=mask)


def build_patch_tensor(features: np.ndarray, assignment: PatchAssignment) -> PatchTensor:
    values = np.zeros((N_PATCHES, PATCH_SIZE, features.shape[1]))
    values[assignment.patch_of_face, assignment.slot_of_face] = features
    return PatchTensor(values=values, mask=assignment.mask.copy())


def gather_face_grad(grad_values: np.ndarray, assignment: PatchAssignment) -> np.ndarray:
    """Inverse of :func:`build_patch_tensor` for gradients: (256, 64, 10) -> (F, 10)."""
    return grad_values[assignment.patch_of_face, assignment.slot_of_face]


def patchify(mesh: TriangleMesh, features: np.ndarray) -> tuple:
    """Lay the (F, 10) face features out on the patch grid.

    Returns ``(PatchTensor, PatchAssignment)``.
    """
    features = np.asarray(features, dtype=np.float64)
    if mesh.n_faces > MAX_FACES:
        raise CapacityError(
            f"mesh has {mesh.n_faces} faces but the patch grid holds {MAX_FACES}; simplify or fuse it first"
        )
    if features.shape != (mesh.n_faces, 10):
        raise ShapeError(f"features must be ({mesh.n_faces}, 10), got {features.shape}")
    assignment = assign_patches(mesh)
    return build_patch_tensor(features, assignment), assignment
