"""Initial mesh generation: watertight fill, remeshing, masks, oversmoothing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import MeshStructureError
from .mesh import Mesh, boundary_loops, connected_components, remove_unreferenced
from .remesh import RemeshConfig, isotropic_remesh


@dataclass
class HoleMask:
    """Binary masks (1 = known, 0 = hole) plus the origin of each hole flag.

    ``vertex_fake`` marks vertices whose 0 comes only from a fake hole; the
    real-only mask used by the losses is ``vertex | vertex_fake``.
    """

    vertex: np.ndarray
    face: np.ndarray
    vertex_fake: np.ndarray = None

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=np.int8)
        self.face = np.asarray(self.face, dtype=np.int8)
        if self.vertex_fake is None:
            self.vertex_fake = np.zeros(len(self.vertex), dtype=bool)

    @classmethod
    def from_vertex_mask(cls, mesh: Mesh, vertex, vertex_fake=None) -> "HoleMask":
        vertex = np.asarray(vertex, dtype=np.int8)
        face = vertex[mesh.faces].min(axis=1)
        return cls(vertex, face, vertex_fake)

    def real_only(self, mesh: Mesh) -> "HoleMask":
        vtx = np.where(self.vertex_fake, 1, self.vertex).astype(np.int8)
        return HoleMask.from_vertex_mask(mesh, vtx)

    @property
    def n_masked(self) -> int:
        return int(np.sum(self.vertex == 0))


@dataclass
class SmoothConfig:
    steps: int = 30


@dataclass
class PreprocessConfig:
    remesh: RemeshConfig = field(default_factory=RemeshConfig)
    smooth: SmoothConfig = field(default_factory=SmoothConfig)


@dataclass
class PreprocessResult:
    init_mesh: Mesh
    smooth_mesh: Mesh
    real_mask: HoleMask
    displacement: np.ndarray
    n_holes: int = 0


def min_area_triangulation(points: np.ndarray, forbidden=None) -> list[tuple[int, int, int]]:
    """Triangulate a closed polygon (loop order) minimizing total triangle area.

    Classical O(n^3) dynamic programme over sub-polygons ``i..j``. Diagonals
    in ``forbidden`` (pairs of loop positions) are never used. Triangles are
    returned as loop-position triples ``(i, k, j)`` with ``i < k < j``.
    """
    n = len(points)
    if n < 3:
        raise MeshStructureError("boundary loop with fewer than 3 vertices")
    forbidden = forbidden or set()
    cost = np.full((n, n), np.inf)
    split = np.full((n, n), -1, dtype=np.int64)
    for i in range(n - 1):
        cost[i, i + 1] = 0.0
    for span in range(2, n):
        for i in range(0, n - span):
            j = i + span
            if (i, j) in forbidden and not (i == 0 and j == n - 1):
                continue
            ks = np.arange(i + 1, j)
            c = np.cross(points[ks] - points[i], points[j] - points[i])
            area = 0.5 * np.linalg.norm(c, axis=1)
            total = cost[i, ks] + cost[ks, j] + area
            best = int(np.argmin(total))
            cost[i, j] = total[best]
            split[i, j] = ks[best]
    if not np.isfinite(cost[0, n - 1]):
        raise MeshStructureError("loop cannot be triangulated without duplicating an existing edge")
    tris = []
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        k = int(split[i, j])
        tris.append((i, k, j))
        stack.append((i, k))
        stack.append((k, j))
    return tris


def largest_component(mesh: Mesh) -> Mesh:
    if mesh.n_faces == 0:
        raise MeshStructureError("mesh has no faces")
    labels = connected_components(mesh)
    counts = np.bincount(labels)
    keep = labels == int(np.argmax(counts))
    if keep.all() and len(np.unique(mesh.faces)) == mesh.n_vertices:
        return mesh
    v, f, _ = remove_unreferenced(mesh.vertices, mesh.faces[keep])
    return Mesh(v, f)


def fill_holes_watertight(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    """Keep the largest component and close every boundary loop with a min-area patch.

    Returns the closed mesh and a per-face flag that is True for inserted faces.
    """
    mesh = largest_component(mesh)
    loops = boundary_loops(mesh)
    if not loops:
        return mesh, np.zeros(mesh.n_faces, dtype=bool)
    existing = {tuple(e) for e in mesh.edges.tolist()}
    new_faces = []
    for loop in loops:
        pos = {v: i for i, v in enumerate(loop)}
        forbidden = set()
        for v in loop:
            for w in mesh.neighbors[v]:
                if w in pos and v < w:
                    i, j = sorted((pos[v], pos[int(w)]))
                    if j - i > 1 and not (i == 0 and j == len(loop) - 1):
                        forbidden.add((i, j))
        for i, k, j in min_area_triangulation(mesh.vertices[loop], forbidden):
            # reversed loop order gives the winding consistent with the surrounding faces
            tri = (loop[j], loop[k], loop[i])
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                existing.add((min(a, b), max(a, b)))
            new_faces.append(tri)
    faces = np.concatenate([mesh.faces, np.asarray(new_faces, dtype=np.int64)])
    flags = np.zeros(len(faces), dtype=bool)
    flags[mesh.n_faces:] = True
    return Mesh(mesh.vertices, faces), flags


def oversmooth(mesh: Mesh, steps: int = 30, history: bool = False):
    """Apply ``steps`` rounds of uniform neighbour averaging ``x <- D^-1 A x``."""
    a = mesh.adjacency
    deg = np.asarray(a.sum(axis=1)).ravel()
    avg = (sparse.diags(1.0 / deg) @ a).tocsr()
    x = mesh.vertices.copy()
    trace = [x.copy()]
    for _ in range(steps):
        x = avg @ x
        if history:
            trace.append(x.copy())
    out = mesh.with_vertices(x)
    return (out, trace) if history else out


def vertex_hole_mask(mesh: Mesh, inserted) -> np.ndarray:
    """1 for known vertices; 0 for vertices whose incident faces are all inserted."""
    inserted = np.asarray(inserted, dtype=bool)
    has_original = np.zeros(mesh.n_vertices, dtype=bool)
    orig = mesh.faces[~inserted]
    for k in range(3):
        has_original[orig[:, k]] = True
    return has_original.astype(np.int8)


def preprocess(mesh: Mesh, config: PreprocessConfig | None = None) -> PreprocessResult:
    """Fill, remesh, derive the real-hole mask, oversmooth and take displacements."""
    config = config or PreprocessConfig()
    n_holes = len(boundary_loops(largest_component(mesh)))
    filled, inserted = fill_holes_watertight(mesh)
    rc = config.remesh
    if rc.iterations > 0:
        init, inserted = isotropic_remesh(
            filled, inserted, rc.target_edge_length, rc.iterations,
            rc.feature_angle, rc.relax_steps)
    else:
        init = filled
    mask = HoleMask.from_vertex_mask(init, vertex_hole_mask(init, inserted))
    smooth = oversmooth(init, config.smooth.steps)
    displacement = init.vertices - smooth.vertices
    return PreprocessResult(init, smooth, mask, displacement, n_holes)
