"""Progressive-mesh hierarchy for multi-resolution pooling.

Meshes are simplified by quadric-error edge collapses with a valence
penalty. A collapse always moves one endpoint onto the other, so each
coarse vertex *is* one of the fine vertices; this makes it trivial to read
per-level positions and masks off the finest mesh.
"""
from __future__ import annotations

import heapq
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import MeshFormatError, SimplificationError
from .io import mesh_from_ply_bytes, ply_bytes
from .mesh import Mesh, _cross3, _dot

LEVEL_RATIO = 0.6
SIDECAR_MAGIC = b"MIHIER\x00\x01"


def valence_penalty(n_val: int) -> float:
    """``|n - 6| + 1`` for valence above 3, infinite otherwise."""
    if n_val > 3:
        return abs(n_val - 6) + 1.0
    return math.inf


@dataclass
class MergeMap:
    """Assignment of fine vertices to the coarse vertex they were merged into.

    ``assign[k]`` is the coarse index of fine vertex ``k``; ``survivor[i]`` is
    the fine index that coarse vertex ``i`` keeps.
    """

    assign: np.ndarray
    survivor: np.ndarray

    def __post_init__(self):
        self.assign = np.asarray(self.assign, dtype=np.int64)
        self.survivor = np.asarray(self.survivor, dtype=np.int64)

    @property
    def n_fine(self) -> int:
        return len(self.assign)

    @property
    def n_coarse(self) -> int:
        return len(self.survivor)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assign, minlength=self.n_coarse)

    def sets(self) -> list[np.ndarray]:
        order = np.argsort(self.assign, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        return np.split(order, bounds)

    @property
    def sum_matrix(self) -> sparse.csr_matrix:
        """(coarse x fine) 0/1 matrix summing each merge set."""
        return sparse.csr_matrix(
            (np.ones(self.n_fine), (self.assign, np.arange(self.n_fine))),
            shape=(self.n_coarse, self.n_fine))

    @classmethod
    def identity(cls, n: int) -> "MergeMap":
        return cls(np.arange(n), np.arange(n))


def pool_avg(features, merge: MergeMap) -> np.ndarray:
    features = np.asarray(features)
    if features.shape[0] != merge.n_fine:
        raise ValueError(f"pool: expected {merge.n_fine} rows, got {features.shape[0]}")
    out = np.zeros((merge.n_coarse,) + features.shape[1:], dtype=features.dtype)
    np.add.at(out, merge.assign, features)
    return out / merge.sizes.reshape((-1,) + (1,) * (features.ndim - 1))


def unpool(features, merge: MergeMap) -> np.ndarray:
    features = np.asarray(features)
    if features.shape[0] != merge.n_coarse:
        raise ValueError(f"unpool: expected {merge.n_coarse} rows, got {features.shape[0]}")
    return features[merge.assign]


def sum_pool(features, merge: MergeMap) -> np.ndarray:
    out = np.zeros((merge.n_coarse,) + np.shape(features)[1:])
    np.add.at(out, merge.assign, features)
    return out


def _plane_quadrics(mesh: Mesh) -> np.ndarray:
    x = mesh.vertices[mesh.faces]
    n = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    plane = np.concatenate([n, -np.einsum("ij,ij->i", n, x[:, 0])[:, None]], axis=1)
    kf = plane[:, :, None] * plane[:, None, :]
    q = np.zeros((mesh.n_vertices, 4, 4))
    for k in range(3):
        np.add.at(q, mesh.faces[:, k], kf)
    return q


class _Collapser:
    def __init__(self, mesh: Mesh):
        self.pt = [tuple(p) for p in mesh.vertices.tolist()]
        self.hpos = np.concatenate([mesh.vertices, np.ones((mesh.n_vertices, 1))], axis=1)
        self.faces = [list(f) for f in mesh.faces.tolist()]
        self.vf = [set() for _ in range(mesh.n_vertices)]
        for j, f in enumerate(self.faces):
            for v in f:
                self.vf[v].add(j)
        self.nb = [set(map(int, nb)) for nb in mesh.neighbors]
        self.q = _plane_quadrics(mesh)
        self.alive = np.ones(mesh.n_vertices, dtype=bool)
        self.members = [[i] for i in range(mesh.n_vertices)]
        self.stamp = {}

    def _normal(self, f, moved=None, to=None):
        p = [self.pt[to] if x == moved else self.pt[x] for x in f]
        return _cross3(p[0], p[1], p[2])

    def legal(self, v, u):
        """Collapse ``v`` into ``u`` keeps a closed manifold with valences >= 4 and no flips."""
        common = self.nb[u] & self.nb[v]
        if len(common) != 2:
            return False
        if len(self.nb[u] | self.nb[v]) - 2 <= 3:
            return False
        for c in common:
            if len(self.nb[c]) - 1 <= 3:
                return False
        shared = self.vf[u] & self.vf[v]
        for j in self.vf[v] - shared:
            f = self.faces[j]
            old = self._normal(f)
            new = self._normal(f, moved=v, to=u)
            if _dot(new, old) <= 0.0 or _dot(new, new) <= 1e-30 * _dot(old, old):
                return False
        return True

    def cost(self, v, u):
        p = self.hpos[u]
        err = float(p @ (self.q[u] + self.q[v]) @ p)
        return max(err, 0.0) + valence_penalty(len(self.nb[u] | self.nb[v]) - 2)

    def best(self, a, b):
        """Cheapest legal direction for edge (a, b) as (cost, victim, survivor)."""
        out = None
        for v, u in ((b, a), (a, b)):  # lower index survives on ties
            if not self.legal(v, u):
                continue
            c = self.cost(v, u)
            if math.isfinite(c) and (out is None or c < out[0]):
                out = (c, v, u)
        return out

    def push(self, heap, a, b):
        key = (a, b) if a < b else (b, a)
        s = self.stamp.get(key, 0) + 1
        self.stamp[key] = s
        entry = self.best(*key)
        if entry is not None:
            heapq.heappush(heap, (entry[0], key, entry[1], entry[2], s))

    def collapse(self, v, u):
        shared = self.vf[u] & self.vf[v]
        for j in shared:
            for x in self.faces[j]:
                self.vf[x].discard(j)
            self.faces[j] = None
        for j in list(self.vf[v]):
            self.faces[j] = [u if x == v else x for x in self.faces[j]]
            self.vf[u].add(j)
        self.vf[v] = set()
        for w in self.nb[v]:
            self.nb[w].discard(v)
            if w != u:
                self.nb[w].add(u)
                self.nb[u].add(w)
        self.nb[u].discard(v)
        self.nb[v] = set()
        self.q[u] += self.q[v]
        self.alive[v] = False
        self.members[u].extend(self.members[v])
        self.members[v] = []


def qem_simplify(mesh: Mesh, target_vertex_count: int):
    """Collapse edges of a closed mesh until ``target_vertex_count`` vertices remain.

    Returns
    -------
    (Mesh, MergeMap)
        The coarse mesh (vertices are a subset of the input vertices, in
        increasing input order) and the fine-to-coarse merge map.

    Raises
    ------
    SimplificationError
        When no legal collapse is left before the target is reached.
    """
    n = mesh.n_vertices
    if target_vertex_count > n:
        raise ValueError("target exceeds vertex count")
    if target_vertex_count == n:
        return mesh, MergeMap.identity(n)
    col = _Collapser(mesh)
    heap = []
    for a, b in mesh.edges.tolist():
        col.push(heap, a, b)
    count = n
    while count > target_vertex_count:
        if not heap:
            raise SimplificationError(
                f"no legal collapse left at {count} vertices (target {target_vertex_count})",
                achieved=count)
        _, key, v, u, s = heapq.heappop(heap)
        if col.stamp.get(key) != s or not (col.alive[v] and col.alive[u]) or v not in col.nb[u]:
            continue
        if not col.legal(v, u):
            continue
        col.collapse(v, u)
        count -= 1
        ring = {u} | col.nb[u]
        touched = set()
        for a in ring:
            for b in col.nb[a]:
                touched.add((a, b) if a < b else (b, a))
        for a, b in sorted(touched):
            col.push(heap, a, b)
    survivor = np.flatnonzero(col.alive)
    remap = np.full(n, -1, dtype=np.int64)
    remap[survivor] = np.arange(len(survivor))
    faces = np.array([f for f in col.faces if f is not None], dtype=np.int64)
    assign = np.empty(n, dtype=np.int64)
    for i in survivor:
        assign[col.members[i]] = remap[i]
    coarse = Mesh(mesh.vertices[survivor], remap[faces])
    return coarse, MergeMap(assign, survivor)


def level_sizes(n: int, levels: int) -> list[int]:
    sizes = [n]
    for _ in range(levels):
        sizes.append(int(round(LEVEL_RATIO * sizes[-1])))
    return sizes


@dataclass
class ProgressiveHierarchy:
    levels: list[Mesh]
    merges: list[MergeMap] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.merges)

    def surviving_index(self, level: int) -> np.ndarray:
        """Finest-level index of each vertex at ``level``."""
        idx = np.arange(self.levels[0].n_vertices)
        for m in self.merges[:level]:
            idx = idx[m.survivor]
        return idx

    def cumulative_assign(self, level: int) -> np.ndarray:
        """Coarse index at ``level`` for every finest-level vertex."""
        a = np.arange(self.levels[0].n_vertices)
        for m in self.merges[:level]:
            a = m.assign[a]
        return a

    def level_positions(self, fine_positions, level: int) -> np.ndarray:
        return np.asarray(fine_positions)[self.surviving_index(level)]

    def level_vertex_mask(self, fine_mask, level: int) -> np.ndarray:
        """Coarse vertex is masked (0) iff any finest vertex merged into it is masked."""
        fine_mask = np.asarray(fine_mask)
        out = np.ones(self.levels[level].n_vertices, dtype=np.int8)
        np.minimum.at(out, self.cumulative_assign(level), fine_mask.astype(np.int8))
        return out


def build_hierarchy(smooth_mesh: Mesh, levels: int = 3) -> ProgressiveHierarchy:
    """Simplify ``levels`` times, keeping round(0.6 N) vertices each time."""
    meshes = [smooth_mesh]
    merges = []
    for target in level_sizes(smooth_mesh.n_vertices, levels)[1:]:
        coarse, merge = qem_simplify(meshes[-1], target)
        meshes.append(coarse)
        merges.append(merge)
    return ProgressiveHierarchy(meshes, merges)


def save_hierarchy(h: ProgressiveHierarchy, path) -> None:
    """Binary sidecar: magic, level count, then per level a PLY block and the merge map."""
    buf = io.BytesIO()
    buf.write(SIDECAR_MAGIC)
    buf.write(struct.pack("<I", len(h.levels)))
    for r, mesh in enumerate(h.levels):
        blob = ply_bytes(mesh)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
        if r < h.depth:
            m = h.merges[r]
            buf.write(struct.pack("<QQ", m.n_fine, m.n_coarse))
            buf.write(m.assign.astype("<i8").tobytes())
            buf.write(m.survivor.astype("<i8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_hierarchy(path) -> ProgressiveHierarchy:
    data = Path(path).read_bytes()
    if not data.startswith(SIDECAR_MAGIC):
        raise MeshFormatError(f"{path}: not a hierarchy sidecar")
    off = len(SIDECAR_MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    levels, merges = [], []
    for r in range(count):
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8
        levels.append(mesh_from_ply_bytes(data[off:off + size], f"{path}[level {r}]"))
        off += size
        if r < count - 1:
            nf, nc = struct.unpack_from("<QQ", data, off)
            off += 16
            assign = np.frombuffer(data, "<i8", nf, off)
            off += 8 * nf
            surv = np.frombuffer(data, "<i8", nc, off)
            off += 8 * nc
            merges.append(MergeMap(assign.copy(), surv.copy()))
    return ProgressiveHierarchy(levels, merges)
