"""Isotropic remeshing (split / collapse / flip / tangential relaxation).

The classical incremental scheme of Botsch and Kobbelt with two kinds of
constrained edges that are never flipped and only collapsed along
themselves: sharp edges of the original surface (dihedral angle above
``feature_angle``) and the border between inserted and original faces.
Keeping that border intact is what lets the inserted flag of every face
survive remeshing unambiguously.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .closest import TriangleIndex
from .mesh import Mesh, _cross3, _dot, triangle_cross


@dataclass
class RemeshConfig:
    iterations: int = 5
    target_edge_length: float | None = None  # None means "auto"
    feature_angle: float = 45.0  # degrees
    relax_steps: int = 1


def auto_target_length(mesh: Mesh, inserted) -> float:
    """Mean length of edges whose incident faces are all original."""
    inserted = np.asarray(inserted, dtype=bool)
    edges, inverse, _ = mesh._edge_faces
    touched = np.zeros(len(edges), dtype=bool)
    face_of_slot = np.tile(np.arange(mesh.n_faces), 3)
    np.logical_or.at(touched, inverse, inserted[face_of_slot])
    lengths = mesh.edge_lengths()
    if np.all(touched):
        return float(lengths.mean())
    return float(lengths[~touched].mean())


def _ekey(a, b):
    return (a, b) if a < b else (b, a)


class _Editable:
    """Face-list mesh with vertex->face incidence sets, supporting local edits."""

    def __init__(self, mesh: Mesh, inserted, feature_angle: float):
        self.pos = [np.array(p) for p in mesh.vertices]
        self.faces = [list(f) for f in mesh.faces.tolist()]
        self.flag = [bool(x) for x in inserted]
        self.vf = [set() for _ in self.pos]
        for j, f in enumerate(self.faces):
            for v in f:
                self.vf[v].add(j)
        self.alive_v = [True] * len(self.pos)
        self.constrained = set()
        normals = triangle_cross(mesh.vertices, mesh.faces)
        normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
        cos_limit = math.cos(math.radians(feature_angle))
        for (j, k) in mesh.face_adjacency.tolist():
            shared = set(self.faces[j]) & set(self.faces[k])
            if len(shared) != 2:
                continue
            a, b = sorted(shared)
            if self.flag[j] != self.flag[k]:
                self.constrained.add((a, b))
            elif not self.flag[j] and float(normals[j] @ normals[k]) < cos_limit:
                self.constrained.add((a, b))
        self.cdeg = [0] * len(self.pos)
        for a, b in self.constrained:
            self.cdeg[a] += 1
            self.cdeg[b] += 1
        self.val = [len(self.neighbors(v)) for v in range(len(self.pos))]

    # -- queries ---------------------------------------------------------
    def edges(self):
        seen = set()
        for f in self.faces:
            if f is None:
                continue
            for i in range(3):
                seen.add(_ekey(f[i], f[(i + 1) % 3]))
        return sorted(seen)

    def edge_lengths(self, edges):
        if not edges:
            return np.zeros(0)
        e = np.asarray(edges)
        p = np.asarray(self.pos)
        return np.linalg.norm(p[e[:, 0]] - p[e[:, 1]], axis=1)

    def edge_faces(self, a, b):
        return [j for j in self.vf[a] & self.vf[b]]

    def neighbors(self, v):
        out = set()
        for j in self.vf[v]:
            out.update(self.faces[j])
        out.discard(v)
        return out

    def valence(self, v):
        return self.val[v]

    def length(self, a, b):
        return math.dist(self.pos[a], self.pos[b])

    @staticmethod
    def _rotate(f, a):
        i = f.index(a)
        return f[i:] + f[:i]

    def _oriented_pair(self, a, b):
        """Faces (a, b, c) and (b, a, d) around edge a-b, or None if not manifold."""
        fs = self.edge_faces(a, b)
        if len(fs) != 2:
            return None
        f0 = self._rotate(self.faces[fs[0]], a)
        if f0[1] == b:
            j1, j2 = fs
        else:
            j1, j2 = fs[1], fs[0]
        c = self._rotate(self.faces[j1], a)[2]
        d = self._rotate(self.faces[j2], b)[2]
        return j1, j2, c, d

    def _add_face(self, f, flag):
        self.faces.append(list(f))
        self.flag.append(flag)
        j = len(self.faces) - 1
        for v in f:
            self.vf[v].add(j)
        return j

    def _set_face(self, j, f):
        for v in self.faces[j]:
            self.vf[v].discard(j)
        self.faces[j] = list(f)
        for v in f:
            self.vf[v].add(j)

    def _kill_face(self, j):
        for v in self.faces[j]:
            self.vf[v].discard(j)
        self.faces[j] = None

    def face_normal(self, f):
        return _cross3(*(self.pos[v] for v in f))

    # -- edits -----------------------------------------------------------
    def split(self, a, b):
        pair = self._oriented_pair(a, b)
        if pair is None:
            return False
        j1, j2, c, d = pair
        m = len(self.pos)
        self.pos.append(0.5 * (self.pos[a] + self.pos[b]))
        self.vf.append(set())
        self.alive_v.append(True)
        self.cdeg.append(0)
        self.val.append(4)
        self.val[c] += 1
        self.val[d] += 1
        self._set_face(j1, (a, m, c))
        self._add_face((m, b, c), self.flag[j1])
        self._set_face(j2, (b, m, d))
        self._add_face((m, a, d), self.flag[j2])
        key = _ekey(a, b)
        if key in self.constrained:
            self.constrained.discard(key)
            self.constrained.add(_ekey(a, m))
            self.constrained.add(_ekey(m, b))
            self.cdeg[m] = 2
        return True

    def collapse(self, v, u, hi):
        """Remove ``v`` by merging it into ``u``; returns False if illegal."""
        key = _ekey(u, v)
        pair = self._oriented_pair(u, v)
        if pair is None:
            return False
        j1, j2, c, d = pair
        if self.cdeg[v]:
            # constrained vertices only slide along their own curve
            if key not in self.constrained or self.cdeg[v] != 2:
                return False
            target = self.pos[u].copy()
        elif self.cdeg[u]:
            target = self.pos[u].copy()
        else:
            target = 0.5 * (self.pos[u] + self.pos[v])
        nu, nv = self.neighbors(u), self.neighbors(v)
        if nu & nv != {c, d}:
            return False
        if len(nu | nv) - 2 < 3 or self.valence(c) <= 3 or self.valence(d) <= 3:
            return False
        for w in (nu | nv) - {u, v}:
            if math.dist(self.pos[w], target) > hi:
                return False
        for j in (self.vf[u] | self.vf[v]) - {j1, j2}:
            f = self.faces[j]
            old = self.face_normal(f)
            new_f = [u if x == v else x for x in f]
            new = _cross3(*(target if x == u else self.pos[x] for x in new_f))
            if _dot(new, old) <= 0 or _dot(new, new) < (1e-14 * hi * hi) ** 2:
                return False
        if self.cdeg[v]:
            w = next(x for x in nv if x != u and _ekey(v, x) in self.constrained)
            if w in nu:
                return False
            self.constrained.discard(key)
            self.constrained.discard(_ekey(v, w))
            self.constrained.add(_ekey(u, w))
            self.cdeg[u] += 0  # u loses (u,v) and gains (u,w)
            self.cdeg[v] = 0
        self._kill_face(j1)
        self._kill_face(j2)
        for j in list(self.vf[v]):
            self._set_face(j, [u if x == v else x for x in self.faces[j]])
        self.pos[u] = target
        self.alive_v[v] = False
        self.val[u] = len(nu | nv) - 2
        self.val[c] -= 1
        self.val[d] -= 1
        self.val[v] = 0
        return True

    def flip(self, a, b):
        if _ekey(a, b) in self.constrained:
            return False
        pair = self._oriented_pair(a, b)
        if pair is None:
            return False
        j1, j2, c, d = pair
        if c == d or d in self.neighbors(c):
            return False
        if self.flag[j1] != self.flag[j2]:
            return False
        va, vb, vc, vd = (self.valence(x) for x in (a, b, c, d))
        if va <= 3 or vb <= 3:
            return False
        before = abs(va - 6) + abs(vb - 6) + abs(vc - 6) + abs(vd - 6)
        after = abs(va - 7) + abs(vb - 7) + abs(vc - 5) + abs(vd - 5)
        if after >= before:
            return False
        n1, n2 = self.face_normal(self.faces[j1]), self.face_normal(self.faces[j2])
        n_old = (n1[0] + n2[0], n1[1] + n2[1], n1[2] + n2[2])
        for f in ((a, d, c), (b, c, d)):
            if _dot(self.face_normal(f), n_old) <= 0:
                return False
        self._set_face(j1, (a, d, c))
        self._set_face(j2, (b, c, d))
        self.val[a] -= 1
        self.val[b] -= 1
        self.val[c] += 1
        self.val[d] += 1
        return True

    # -- export ----------------------------------------------------------
    def compact(self):
        keep_f = [j for j, f in enumerate(self.faces) if f is not None]
        faces = np.array([self.faces[j] for j in keep_f], dtype=np.int64)
        flags = np.array([self.flag[j] for j in keep_f], dtype=bool)
        used = np.unique(faces)
        remap = np.full(len(self.pos), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        verts = np.array([self.pos[i] for i in used])
        cons = np.zeros(len(used), dtype=bool)
        for a, b in self.constrained:
            if remap[a] >= 0:
                cons[remap[a]] = True
            if remap[b] >= 0:
                cons[remap[b]] = True
        return Mesh(verts, remap[faces]), flags, cons


def isotropic_remesh(mesh: Mesh, inserted, target_edge_length=None, iterations: int = 5,
                     feature_angle: float = 45.0, relax_steps: int = 1):
    """Remesh a closed mesh toward edge length ``target_edge_length``.

    Parameters
    ----------
    mesh : Mesh
        Watertight input.
    inserted : array_like of bool
        Per-face flag marking faces created by hole filling.
    target_edge_length : float or None
        ``None`` uses :func:`auto_target_length`.

    Returns
    -------
    (Mesh, ndarray of bool)
        Remeshed surface and the inserted flag of each of its faces.
    """
    inserted = np.asarray(inserted, dtype=bool)
    t = auto_target_length(mesh, inserted) if target_edge_length in (None, "auto") else float(target_edge_length)
    if not t > 0:
        raise ValueError("target_edge_length must be positive")
    hi, lo = 4.0 / 3.0 * t, 0.8 * t
    reference = TriangleIndex(mesh.vertices, mesh.faces)
    ed = _Editable(mesh, inserted, feature_angle)
    for _ in range(iterations):
        for _pass in range(8):
            edges = ed.edges()
            long_edges = [e for e, l in zip(edges, ed.edge_lengths(edges)) if l > hi]
            changed = False
            for a, b in long_edges:
                changed |= ed.split(a, b)
            if not changed:
                break
        edges = ed.edges()
        for a, b in (e for e, l in zip(edges, ed.edge_lengths(edges)) if l < lo):
            if not (ed.alive_v[a] and ed.alive_v[b]):
                continue
            if not (ed.vf[a] & ed.vf[b]) or ed.length(a, b) >= lo:
                continue
            if not ed.collapse(b, a, hi):
                ed.collapse(a, b, hi)
        for a, b in ed.edges():
            ed.flip(a, b)
        compact, flags, cons = ed.compact()
        compact = _relax(compact, cons, reference, relax_steps)
        ed = _rebuild(compact, flags, cons, ed)
    out, flags, _ = ed.compact()
    return out, flags


def _relax(mesh: Mesh, constrained, reference: TriangleIndex, steps: int) -> Mesh:
    x = mesh.vertices.copy()
    free = ~constrained
    a = mesh.adjacency
    deg = np.asarray(a.sum(axis=1)).ravel()
    for _ in range(steps):
        centroid = (a @ x) / deg[:, None]
        fn = triangle_cross(x, mesh.faces)
        vn = np.zeros_like(x)
        for k in range(3):
            np.add.at(vn, mesh.faces[:, k], fn)
        vn /= np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)
        d = centroid - x
        d -= np.einsum("ij,ij->i", d, vn)[:, None] * vn
        x[free] += d[free]
        _, proj, _ = reference.query(x[free])
        x[free] = proj
    return mesh.with_vertices(x)


def _rebuild(mesh: Mesh, flags, cons, old: _Editable) -> _Editable:
    ed = _Editable.__new__(_Editable)
    ed.pos = [np.array(p) for p in mesh.vertices]
    ed.faces = [list(f) for f in mesh.faces.tolist()]
    ed.flag = list(map(bool, flags))
    ed.vf = [set() for _ in ed.pos]
    for j, f in enumerate(ed.faces):
        for v in f:
            ed.vf[v].add(j)
    ed.alive_v = [True] * len(ed.pos)
    # carry constrained edges through the compaction by position identity
    old_index = {}
    live = [i for i, al in enumerate(old.alive_v) if al and old.vf[i]]
    for new_i, old_i in enumerate(live):
        old_index[old_i] = new_i
    ed.constrained = set()
    for a, b in old.constrained:
        if a in old_index and b in old_index:
            ed.constrained.add(_ekey(old_index[a], old_index[b]))
    ed.cdeg = [0] * len(ed.pos)
    for a, b in ed.constrained:
        ed.cdeg[a] += 1
        ed.cdeg[b] += 1
    ed.val = np.diff(mesh.adjacency.indptr).tolist()
    return ed
