import numpy as np
import pytest

from meshinpaint import fixtures
from meshinpaint.errors import DegenerateGeometryError, MeshDataError, MeshFormatError
from meshinpaint.io import load_mesh, read_vertex_colors, save_mesh, signed_colormap


def test_minimal_obj(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert (m.n_vertices, m.n_faces) == (3, 1)


def test_obj_quad_is_fan_triangulated(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    m = load_mesh(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_obj_parse_error_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 zero\n")
    with pytest.raises(MeshFormatError, match=":2:"):
        load_mesh(p)


def test_obj_two_vertex_face(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nf 1 2\n")
    with pytest.raises(MeshDataError):
        load_mesh(p)


def test_degenerate_face_rejected(tmp_path):
    p = tmp_path / "deg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 4\nf 1 2 3\n")
    with pytest.raises(DegenerateGeometryError, match="face 1"):
        load_mesh(p)


@pytest.mark.parametrize("suffix,ascii", [(".ply", False), (".ply", True), (".obj", False)])
def test_roundtrip(tmp_path, suffix, ascii):
    m = fixtures.icosphere(2)
    m = m.with_vertices(m.vertices + np.random.default_rng(0).normal(0, 1e-3, m.vertices.shape))
    p = tmp_path / ("m" + suffix)
    save_mesh(m, p, ascii=ascii)
    back = load_mesh(p)
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_array_equal(back.vertices, m.vertices)


def test_binary_ply_is_deterministic(tmp_path):
    m = fixtures.icosphere(2)
    save_mesh(m, tmp_path / "a.ply")
    save_mesh(m, tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_truncated_binary_ply(tmp_path):
    m = fixtures.icosphere(1)
    p = tmp_path / "t.ply"
    save_mesh(m, p)
    p.write_bytes(p.read_bytes()[:-50])
    with pytest.raises(MeshFormatError, match="byte"):
        load_mesh(p)


def test_missing_magic(tmp_path):
    p = tmp_path / "x.ply"
    p.write_bytes(b"not a ply")
    with pytest.raises(MeshFormatError, match="byte 0"):
        load_mesh(p)


def test_colormap_midpoint_and_extremes():
    np.testing.assert_array_equal(signed_colormap(np.zeros(4)), 255)
    c = signed_colormap([-2.0, 0.0, 2.0, 1.0])
    np.testing.assert_array_equal(c[0], [0, 0, 255])
    np.testing.assert_array_equal(c[1], [255, 255, 255])
    np.testing.assert_array_equal(c[2], [255, 0, 0])
    np.testing.assert_array_equal(c[3], [255, 128, 128])


@pytest.mark.parametrize("ascii", [False, True])
def test_scalar_field_written_as_colors(tmp_path, ascii):
    m = fixtures.icosphere(1)
    field = m.vertices[:, 2]
    p = tmp_path / "c.ply"
    save_mesh(m, p, scalars=field, ascii=ascii)
    np.testing.assert_array_equal(read_vertex_colors(p), signed_colormap(field))
    np.testing.assert_array_equal(load_mesh(p).vertices, m.vertices)
