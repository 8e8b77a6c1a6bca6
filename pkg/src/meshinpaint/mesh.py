"""Indexed triangle mesh with the adjacency queries used throughout the package."""
from __future__ import annotations

from collections import defaultdict
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import DegenerateGeometryError, MeshDataError, MeshStructureError

# faces with area below this fraction of bbox_diagonal**2 are rejected
DEGENERATE_AREA_RATIO = 1e-12


class Mesh:
    """Triangle mesh stored as vertex positions and vertex-index triples.

    Instances are treated as immutable: derived adjacency is computed lazily
    and cached, so positions must not be edited in place. Use
    :meth:`with_vertices` to get a mesh with new positions and the same faces.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
    faces : array_like of int, shape (m, 3)
    """

    def __init__(self, vertices, faces):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshDataError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshDataError(f"faces must have shape (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshDataError("face index out of range")
        bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if bad.any():
            raise MeshDataError(f"face {int(np.flatnonzero(bad)[0])} repeats a vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f

    def __repr__(self):
        return f"Mesh(|V|={self.n_vertices}, |F|={self.n_faces})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        out = Mesh(vertices, self.faces)
        if len(out.vertices) != self.n_vertices:
            raise MeshDataError("vertex count changed")
        # connectivity caches only depend on faces
        for name in ("edges", "_edge_faces", "adjacency", "neighbors",
                     "vertex_faces", "face_adjacency"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    # ------------------------------------------------------------------
    # connectivity
    @cached_property
    def _edge_faces(self):
        """Sorted unique edges, inverse map from face-edge slots, per-edge face count."""
        f = self.faces
        he = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        key = np.sort(he, axis=1)
        edges, inverse, counts = np.unique(key, axis=0, return_inverse=True,
                                           return_counts=True)
        return edges, inverse.reshape(-1), counts

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted pairs, shape (E, 2)."""
        return self._edge_faces[0]

    @property
    def edge_face_counts(self) -> np.ndarray:
        return self._edge_faces[2]

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        n = self.n_vertices
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        a = self.adjacency
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.n_vertices)]

    @cached_property
    def vertex_faces(self) -> list[np.ndarray]:
        out = [[] for _ in range(self.n_vertices)]
        for j, tri in enumerate(self.faces.tolist()):
            for v in tri:
                out[v].append(j)
        return [np.asarray(x, dtype=np.int64) for x in out]

    @cached_property
    def face_adjacency(self) -> np.ndarray:
        """Pairs of faces sharing an edge, shape (P, 2), each pair listed once."""
        _, inverse, _ = self._edge_faces
        m = self.n_faces
        face_of_slot = np.tile(np.arange(m), 3)
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        same = inv_sorted[1:] == inv_sorted[:-1]
        first = face_of_slot[order[:-1][same]]
        second = face_of_slot[order[1:][same]]
        return np.stack([first, second], axis=1)

    def valences(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    # ------------------------------------------------------------------
    # geometry
    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def face_areas(self) -> np.ndarray:
        x = self.vertices[self.faces]
        c = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        return 0.5 * np.linalg.norm(c, axis=1)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def is_watertight(self) -> bool:
        return bool(self.n_faces) and bool(np.all(self.edge_face_counts == 2))


def triangle_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (b - a) x (c - a)."""
    x = vertices[faces]
    return np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])


def _cross3(a, b, c):
    """(b - a) x (c - a) on plain 3-tuples; avoids numpy overhead in inner loops."""
    ux, uy, uz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    vx, vy, vz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    return (uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx)


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def face_normals(mesh: Mesh) -> np.ndarray:
    """Unit normal of every face, oriented by the face winding.

    Raises
    ------
    DegenerateGeometryError
        If a face has (numerically) zero area.
    """
    c = triangle_cross(mesh.vertices, mesh.faces)
    norm = np.linalg.norm(c, axis=1)
    limit = 2.0 * DEGENERATE_AREA_RATIO * max(bbox_diagonal(mesh), 1e-300) ** 2
    bad = norm <= limit
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise DegenerateGeometryError(f"face {j} has zero area", face=j)
    return c / norm[:, None]


def uniform_laplacian(mesh: Mesh) -> sparse.csr_matrix:
    """Combinatorial Laplacian ``I - D^-1 A``."""
    a = mesh.adjacency
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg == 0):
        i = int(np.flatnonzero(deg == 0)[0])
        raise MeshStructureError(f"vertex {i} is isolated")
    lap = sparse.identity(mesh.n_vertices, format="csr") - sparse.diags(1.0 / deg) @ a
    return lap.tocsr()


def bbox_diagonal(mesh_or_points) -> float:
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, Mesh) else np.asarray(mesh_or_points)
    if len(pts) == 0:
        return 0.0
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def dilate(mesh: Mesh, mask: np.ndarray, rings: int) -> np.ndarray:
    """Grow a boolean vertex set by ``rings`` graph steps."""
    out = np.asarray(mask, dtype=bool).copy()
    a = mesh.adjacency
    for _ in range(rings):
        grown = out | (a @ out.astype(np.float64) > 0)
        if np.array_equal(grown, out):
            break
        out = grown
    return out


def k_ring(mesh: Mesh, seed: int, k: int) -> set[int]:
    """Vertices within graph distance ``k`` of ``seed``, seed included."""
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[seed] = True
    return set(np.flatnonzero(dilate(mesh, mask, k)).tolist())


def boundary_loops(mesh: Mesh) -> list[list[int]]:
    """Closed cycles of boundary edges, each following the face winding.

    Raises
    ------
    MeshStructureError
        If any edge has more than two incident faces.
    """
    edges, inverse, counts = mesh._edge_faces
    if np.any(counts > 2):
        e = edges[np.flatnonzero(counts > 2)[0]]
        raise MeshStructureError(f"non-manifold edge ({e[0]}, {e[1]})")
    f = mesh.faces
    he = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    boundary = he[counts[inverse] == 1]
    nxt = defaultdict(list)
    for a, b in boundary.tolist():
        nxt[a].append(b)
    loops = []
    for start in sorted(nxt):
        while nxt[start]:
            loop = [start]
            cur = nxt[start].pop()
            while cur != start:
                loop.append(cur)
                if not nxt[cur]:
                    raise MeshStructureError(f"boundary chain breaks at vertex {cur}")
                cur = nxt[cur].pop()
            loops.append(loop)
    return loops


def connected_components(mesh: Mesh) -> np.ndarray:
    """Per-face component label (faces connected through shared edges)."""
    pairs = mesh.face_adjacency
    m = mesh.n_faces
    g = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, m))
    _, labels = csgraph.connected_components(g, directed=False)
    return labels


def remove_unreferenced(vertices, faces):
    """Drop vertices that no face uses; returns (vertices, faces, old index per new vertex)."""
    faces = np.asarray(faces, dtype=np.int64)
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return np.asarray(vertices)[used], remap[faces], used
