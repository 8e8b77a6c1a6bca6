"""Exact closest-point queries from points to a triangle soup."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p, vectorized over rows.

    Region classification follows the Voronoi-region scheme from Ericson,
    *Real-Time Collision Detection*, section 5.1.5.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(mask, value):
        m = mask & ~done
        if m.any():
            out[m] = value(m)
            done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), lambda m: a[m])
        take((d3 >= 0) & (d4 <= d3), lambda m: b[m])
        take((d6 >= 0) & (d5 <= d6), lambda m: c[m])
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0),
             lambda m: a[m] + (d1[m] / (d1[m] - d3[m]))[:, None] * ab[m])
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0),
             lambda m: a[m] + (d2[m] / (d2[m] - d6[m]))[:, None] * ac[m])
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
             lambda m: b[m] + ((d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m])))[:, None] * (c[m] - b[m]))
        rest = ~done
        if rest.any():
            denom = 1.0 / (va[rest] + vb[rest] + vc[rest])
            v = vb[rest] * denom
            w = vc[rest] * denom
            out[rest] = a[rest] + v[:, None] * ab[rest] + w[:, None] * ac[rest]
    return out


class TriangleIndex:
    """Spatial index over a fixed triangle set for exact nearest-surface queries.

    The nearest vertex gives an upper bound ``d`` on the distance to the
    surface; every triangle within ``d`` has its centroid within
    ``d + r_max`` where ``r_max`` is the largest centroid-to-corner radius,
    so all candidates are found by one ball query on centroids.
    """

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        tri = self.vertices[self.faces]
        centroids = tri.mean(axis=1)
        radii = np.max(np.linalg.norm(tri - centroids[:, None], axis=2), axis=1) if len(tri) else np.zeros(0)
        # a few oversized triangles would inflate every ball query; test those exhaustively
        big = radii > 4.0 * np.median(radii) if len(radii) else np.zeros(0, dtype=bool)
        self._big = np.flatnonzero(big)
        self._small = np.flatnonzero(~big)
        self.radius = float(radii[self._small].max()) if len(self._small) else 0.0
        self._vtree = cKDTree(self.vertices[np.unique(self.faces)])
        self._ctree = cKDTree(centroids[self._small]) if len(self._small) else None

    def query(self, points, chunk: int = 4096):
        """Return (distance, closest point, face index) for each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        dist = np.empty(n)
        closest = np.empty((n, 3))
        face = np.empty(n, dtype=np.int64)
        for s in range(0, n, chunk):
            sl = slice(s, min(n, s + chunk))
            dist[sl], closest[sl], face[sl] = self._query_block(points[sl])
        return dist, closest, face

    def _query_block(self, pts):
        dv, _ = self._vtree.query(pts)
        pid_parts, fid_parts = [], []
        if self._ctree is not None:
            lists = self._ctree.query_ball_point(pts, dv * (1 + 1e-9) + self.radius + 1e-12)
            counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
            pid_parts.append(np.repeat(np.arange(len(pts)), counts))
            local = np.fromiter((j for l in lists for j in l), dtype=np.int64, count=int(counts.sum()))
            fid_parts.append(self._small[local])
        if len(self._big):
            pid_parts.append(np.repeat(np.arange(len(pts)), len(self._big)))
            fid_parts.append(np.tile(self._big, len(pts)))
        pid = np.concatenate(pid_parts)
        fid = np.concatenate(fid_parts)
        tri = self.vertices[self.faces[fid]]
        q = closest_point_on_triangles(pts[pid], tri[:, 0], tri[:, 1], tri[:, 2])
        d2 = np.einsum("ij,ij->i", pts[pid] - q, pts[pid] - q)
        # ties resolved toward the lowest face index
        order = np.lexsort((fid, d2, pid))
        first = np.ones(len(order), dtype=bool)
        first[1:] = pid[order][1:] != pid[order][:-1]
        best = order[first]
        return np.sqrt(d2[best]), q[best], fid[best]
