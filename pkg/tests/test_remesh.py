import numpy as np
import pytest

from meshinpaint import fixtures
from meshinpaint.mesh import boundary_loops
from meshinpaint.remesh import auto_target_length, isotropic_remesh


@pytest.fixture(scope="module")
def sphere():
    return fixtures.icosphere(3)


def _check_closed(mesh):
    assert boundary_loops(mesh) == []
    assert np.all(mesh.edge_face_counts == 2)


def test_uniform_sphere_at_own_edge_length_barely_changes(sphere):
    flags = np.zeros(sphere.n_faces, dtype=bool)
    t = sphere.edge_lengths().mean()
    out, _ = isotropic_remesh(sphere, flags, t)
    _check_closed(out)
    assert abs(out.n_vertices - sphere.n_vertices) <= 0.05 * sphere.n_vertices


def test_half_target_quadruples_vertices(sphere):
    flags = np.zeros(sphere.n_faces, dtype=bool)
    t = 0.5 * sphere.edge_lengths().mean()
    out, _ = isotropic_remesh(sphere, flags, t)
    _check_closed(out)
    # vertex count scales with area / t^2
    assert 3.2 <= out.n_vertices / sphere.n_vertices <= 4.8
    lengths = out.edge_lengths()
    assert np.mean((lengths >= 0.5 * t) & (lengths <= 4.0 / 3.0 * t)) >= 0.9


def test_all_inserted_flags_survive(sphere):
    flags = np.ones(sphere.n_faces, dtype=bool)
    out, out_flags = isotropic_remesh(sphere, flags, 0.7 * sphere.edge_lengths().mean(), iterations=2)
    assert out_flags.all()


def test_flags_follow_inserted_region():
    holed, _ = fixtures.sphere_with_cap_hole(3, 2)
    from meshinpaint.preprocess import fill_holes_watertight

    filled, inserted = fill_holes_watertight(holed)
    area_before = filled.face_areas()[inserted].sum()
    out, flags = isotropic_remesh(filled, inserted, iterations=3)
    _check_closed(out)
    assert flags.any() and not flags.all()
    assert out.face_areas()[flags].sum() == pytest.approx(area_before, rel=0.1)


def test_auto_target_ignores_inserted_edges(sphere):
    flags = np.zeros(sphere.n_faces, dtype=bool)
    assert auto_target_length(sphere, flags) == pytest.approx(sphere.edge_lengths().mean())
    scaled = sphere.with_vertices(sphere.vertices * 3)
    assert auto_target_length(scaled, flags) == pytest.approx(3 * sphere.edge_lengths().mean())


def test_feature_edges_of_cube_are_kept():
    cube = fixtures.cube_grid(4)
    out, _ = isotropic_remesh(cube, np.zeros(cube.n_faces, dtype=bool), iterations=3)
    _check_closed(out)
    # vertices stay on the cube surface and the eight corners survive
    assert np.all(np.max(np.abs(out.vertices), axis=1) == pytest.approx(0.5, abs=1e-9))
    corners = np.all(np.isclose(np.abs(out.vertices), 0.5, atol=1e-9), axis=1)
    assert corners.sum() == 8
