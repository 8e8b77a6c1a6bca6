"""Synthetic meshes used by tests, the acceptance suite and ``gradcheck``."""
from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import Mesh, dilate, remove_unreferenced


def icosahedron() -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return Mesh(v, f)


def icosphere(subdivisions: int, radius: float = 1.0) -> Mesh:
    """Loop-style 4:1 subdivided icosahedron projected onto a sphere.

    ``subdivisions=4`` gives 2562 vertices, ``5`` gives 10242.
    """
    mesh = icosahedron()
    v, f = mesh.vertices.copy(), mesh.faces.copy()
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mids = v[uniq].mean(axis=1)
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        base = len(v)
        v = np.concatenate([v, mids])
        m = len(f)
        ab, bc, ca = (inv[:m] + base, inv[m:2 * m] + base, inv[2 * m:] + base)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    return Mesh(v * radius, f)


def _oriented_hull(points) -> Mesh:
    hull = ConvexHull(points)
    f = hull.simplices.copy()
    c = points[f].mean(axis=1) - points.mean(axis=0)
    n = np.cross(points[f[:, 1]] - points[f[:, 0]], points[f[:, 2]] - points[f[:, 0]])
    flip = np.einsum("ij,ij->i", n, c) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return Mesh(points, f)


def fibonacci_sphere(n: int, radius: float = 1.0) -> Mesh:
    """Sphere with exactly ``n`` near-uniform vertices (convex hull of a Fibonacci lattice)."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    return _oriented_hull(pts * radius)


def plane_grid(nx: int, ny: int, spacing: float = 1.0) -> Mesh:
    """Regular grid in the z=0 plane with the valence-6 diagonal pattern."""
    xs, ys = np.meshgrid(np.arange(nx + 1) * spacing, np.arange(ny + 1) * spacing, indexing="ij")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], 1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(v, f)


def cube_grid(n: int, size: float = 1.0) -> Mesh:
    """Axis-aligned closed cube with each face split into an ``n`` x ``n`` grid."""
    u = np.linspace(-0.5, 0.5, n + 1) * size
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a1, a2 = [k for k in range(3) if k != axis]
            g1, g2 = np.meshgrid(u, u, indexing="ij")
            p = np.zeros((g1.size, 3))
            p[:, axis] = sign * size / 2
            p[:, a1] = g1.ravel()
            p[:, a2] = g2.ravel()
            base = sum(len(x) for x in verts)
            idx = np.arange(g1.size).reshape(n + 1, n + 1) + base
            q0, q1 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            q2, q3 = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            tri = np.concatenate([np.stack([q0, q1, q2], 1), np.stack([q0, q2, q3], 1)])
            # orient outward
            nrm = np.cross(p[q1 - base] - p[q0 - base], p[q2 - base] - p[q0 - base])
            if nrm[0, axis] * sign < 0:
                tri = tri[:, [0, 2, 1]]
            verts.append(p)
            faces.append(tri)
    v = np.concatenate(verts)
    f = np.concatenate(faces)
    # weld duplicated seam vertices
    key = np.round(v / size * n * 4).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    v = v[first[order]]
    f = rank[inv.reshape(-1)][f]
    return Mesh(v, f)


def remove_vertex_set(mesh: Mesh, removed: np.ndarray) -> tuple[Mesh, np.ndarray]:
    """Delete every face touching a removed vertex and drop unreferenced vertices.

    Returns the holed mesh and, for each of its vertices, the index in ``mesh``.
    """
    removed = np.asarray(removed, dtype=bool)
    keep = ~removed[mesh.faces].any(axis=1)
    v, f, used = remove_unreferenced(mesh.vertices, mesh.faces[keep])
    return Mesh(v, f), used


def cap_hole(mesh: Mesh, center: int, rings: int) -> tuple[Mesh, np.ndarray]:
    """Remove the ``rings``-ring around ``center`` (the removed patch is a cap)."""
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[center] = True
    return remove_vertex_set(mesh, dilate(mesh, mask, rings))


def sphere_with_cap_hole(subdivisions: int = 4, rings: int = 4):
    """Icosphere with a k-ring cap removed around vertex 0; returns (holed, ground truth)."""
    gt = icosphere(subdivisions)
    holed, _ = cap_hole(gt, 0, rings)
    return holed, gt


def cube_with_edge_hole(n: int = 20, radius: float = 0.3):
    """Cube with the vertices near the midpoint of one edge removed; returns (holed, ground truth)."""
    gt = cube_grid(n)
    centre = np.array([0.5, 0.5, 0.0])
    removed = np.linalg.norm(gt.vertices - centre, axis=1) < radius
    holed, _ = remove_vertex_set(gt, removed)
    return holed, gt


def gradcheck_sphere() -> Mesh:
    """The 50-vertex closed mesh used for gradient checks."""
    return fibonacci_sphere(50)
