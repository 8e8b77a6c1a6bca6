"""OBJ and PLY reading/writing.

Binary little-endian PLY is the lossless interchange format; OBJ is written
with 17 significant digits so that float64 coordinates also round-trip.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, MeshDataError, MeshFormatError
from .mesh import DEGENERATE_AREA_RATIO, Mesh, bbox_diagonal

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path, check_degenerate: bool = True) -> Mesh:
    """Read an OBJ or PLY file; polygons are fan-triangulated from their first vertex."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, polys = _read_obj(path)
    elif suffix == ".ply":
        vertices, polys = _read_ply(path)
    else:
        raise MeshFormatError(f"{path}: unsupported extension {suffix!r}")
    faces = triangulate(polys)
    try:
        mesh = Mesh(vertices, faces)
    except MeshDataError as exc:
        raise MeshDataError(f"{path}: {exc}") from None
    if check_degenerate and mesh.n_faces:
        areas = mesh.face_areas()
        limit = DEGENERATE_AREA_RATIO * bbox_diagonal(mesh) ** 2
        bad = np.flatnonzero(areas < limit)
        if len(bad):
            raise DegenerateGeometryError(
                f"{path}: {len(bad)} degenerate face(s), first is face {bad[0]}; "
                "merge duplicate vertices or remove zero-area faces before inpainting",
                face=int(bad[0]),
            )
    return mesh


def triangulate(polys) -> np.ndarray:
    tris = []
    for poly in polys:
        if len(poly) < 3:
            raise MeshDataError(f"polygon with {len(poly)} vertices cannot be triangulated")
        for i in range(1, len(poly) - 1):
            tris.append((poly[0], poly[i], poly[i + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _read_obj(path: Path):
    vertices, polys = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(t) for t in parts[1:4]])
                    if len(vertices[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(vertices) + k)
                    polys.append(idx)
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), polys


def mesh_from_ply_bytes(data: bytes, name: str = "<bytes>") -> Mesh:
    vertices, polys = _parse_ply(data, name)
    return Mesh(vertices, triangulate(polys))


def _read_ply(path: Path):
    return _parse_ply(path.read_bytes(), path)


def _parse_ply(data: bytes, path):
    if not data.startswith(b"ply"):
        raise MeshFormatError(f"{path}: byte 0: missing 'ply' magic")
    end = data.find(b"end_header")
    if end < 0:
        raise MeshFormatError(f"{path}: no end_header")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None, None))
    if fmt == "ascii":
        return _ply_ascii(path, data[body_start:], elements)
    if fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt == "binary_little_endian" else ">"
        return _ply_binary(path, data, body_start, elements, order)
    raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")


def _vertex_xyz(path, names, columns):
    try:
        return np.stack([columns[names.index(c)] for c in "xyz"], axis=1).astype(np.float64)
    except ValueError:
        raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from None


def _ply_ascii(path, body: bytes, elements):
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    vertices = np.zeros((0, 3))
    polys = []
    for name, count, props in elements:
        rows = lines[pos:pos + count]
        if len(rows) < count:
            raise MeshFormatError(f"{path}: element {name!r} truncated at body line {pos + len(rows)}")
        if name == "vertex":
            try:
                table = np.array([[float(t) for t in r.split()[:len(props)]] for r in rows])
            except ValueError as exc:
                raise MeshFormatError(f"{path}: vertex data: {exc}") from None
            names = [p[0] for p in props]
            if count:
                vertices = _vertex_xyz(path, names, list(table.T))
        elif name == "face":
            for k, r in enumerate(rows):
                tok = r.split()
                try:
                    n = int(tok[0])
                    polys.append([int(t) for t in tok[1:1 + n]])
                except (ValueError, IndexError):
                    raise MeshFormatError(f"{path}: body line {pos + k + 1}: bad face record") from None
        pos += count
    return vertices, polys


def _ply_binary(path, data: bytes, offset: int, elements, order):
    vertices = np.zeros((0, 3))
    polys = []
    for name, count, props in elements:
        if all(p[1] != "list" for p in props):
            dt = np.dtype([(p[0], order + p[1]) for p in props])
            need = dt.itemsize * count
            if offset + need > len(data):
                raise MeshFormatError(f"{path}: byte {offset}: element {name!r} truncated")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            offset += need
            if name == "vertex":
                names = [p[0] for p in props]
                vertices = _vertex_xyz(path, names, [arr[n] for n in names])
            continue
        # element with list properties: fast path for a single list with constant length
        if len(props) == 1 and name == "face":
            _, _, ctype, itype = props[0]
            cdt, idt = np.dtype(order + ctype), np.dtype(order + itype)
            if count and offset < len(data):
                n0 = int(np.frombuffer(data, cdt, 1, offset)[0])
                rec = np.dtype([("n", cdt), ("i", idt, (n0,))])
                if offset + rec.itemsize * count <= len(data):
                    arr = np.frombuffer(data, rec, count, offset)
                    if np.all(arr["n"] == n0):
                        polys.extend(arr["i"].astype(np.int64).tolist())
                        offset += rec.itemsize * count
                        continue
        for _ in range(count):
            rec = []
            for pname, ptype, ctype, itype in props:
                try:
                    if ptype == "list":
                        cdt, idt = np.dtype(order + ctype), np.dtype(order + itype)
                        n = int(np.frombuffer(data, cdt, 1, offset)[0])
                        offset += cdt.itemsize
                        vals = np.frombuffer(data, idt, n, offset)
                        offset += idt.itemsize * n
                        if pname in ("vertex_indices", "vertex_index"):
                            rec = vals.astype(np.int64).tolist()
                    else:
                        offset += np.dtype(ptype).itemsize
                except ValueError:
                    raise MeshFormatError(f"{path}: byte {offset}: element {name!r} truncated") from None
            if name == "face":
                polys.append(rec)
    return vertices, polys


def signed_colormap(values) -> np.ndarray:
    """Blue-white-red RGB (uint8) for a signed scalar, symmetric about zero."""
    values = np.asarray(values, dtype=np.float64)
    vmax = float(np.max(np.abs(values))) if values.size else 0.0
    t = values / vmax if vmax > 0 else np.zeros_like(values)
    rgb = np.ones((len(values), 3))
    pos = t > 0
    neg = t < 0
    rgb[pos, 1] -= t[pos]
    rgb[pos, 2] -= t[pos]
    rgb[neg, 0] += t[neg]
    rgb[neg, 1] += t[neg]
    return np.round(rgb * 255).astype(np.uint8)


def save_mesh(mesh: Mesh, path, scalars=None, ascii: bool = False) -> None:
    """Write OBJ or PLY; ``scalars`` (PLY only) are written as vertex colors."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        lines = ["v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices.tolist()]
        lines += ["f %d %d %d" % tuple(f) for f in (mesh.faces + 1).tolist()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return
    if suffix != ".ply":
        raise MeshFormatError(f"{path}: unsupported extension {suffix!r}")
    path.write_bytes(ply_bytes(mesh, scalars=scalars, ascii=ascii))


def ply_bytes(mesh: Mesh, scalars=None, ascii: bool = False) -> bytes:
    colors = None if scalars is None else signed_colormap(scalars)
    fmt = "ascii" if ascii else "binary_little_endian"
    head = [f"ply", f"format {fmt} 1.0",
            f"element vertex {mesh.n_vertices}",
            "property double x", "property double y", "property double z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(head) + "\n").encode("ascii")
    if ascii:
        rows = []
        for i, v in enumerate(mesh.vertices.tolist()):
            row = "%.17g %.17g %.17g" % tuple(v)
            if colors is not None:
                row += " %d %d %d" % tuple(colors[i])
            rows.append(row)
        rows += ["3 %d %d %d" % tuple(f) for f in mesh.faces.tolist()]
        return header + ("\n".join(rows) + "\n").encode("ascii")
    vfields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if colors is not None:
        vfields += [("r", "u1"), ("g", "u1"), ("b", "u1")]
    vrec = np.zeros(mesh.n_vertices, dtype=vfields)
    for k, c in enumerate("xyz"):
        vrec[c] = mesh.vertices[:, k]
    if colors is not None:
        for k, c in enumerate("rgb"):
            vrec[c] = colors[:, k]
    frec = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    frec["n"] = 3
    frec["i"] = mesh.faces
    return header + vrec.tobytes() + frec.tobytes()


def read_vertex_colors(path) -> np.ndarray:
    """RGB colors of a PLY written by :func:`save_mesh` (binary or ascii)."""
    data = Path(path).read_bytes()
    end = data.index(b"\n", data.find(b"end_header")) + 1
    header = data[:end].decode("ascii")
    n = int(re.search(r"element vertex (\d+)", header).group(1))
    if "format ascii" in header:
        rows = data[end:].decode("ascii").splitlines()[:n]
        return np.array([[int(t) for t in r.split()[3:6]] for r in rows], dtype=np.uint8)
    rec = np.frombuffer(data, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                                     ("r", "u1"), ("g", "u1"), ("b", "u1")], count=n, offset=end)
    return np.stack([rec["r"], rec["g"], rec["b"]], axis=1)

