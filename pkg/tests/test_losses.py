import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshinpaint import fixtures
from meshinpaint.errors import ConfigError, LossUndefinedError
from meshinpaint.losses import (
    BnfParams,
    LossWeights,
    bilateral_normal_filter,
    e_nrm,
    e_pos,
    e_reg,
    face_normal_backward,
    face_normals_raw,
    total_loss,
)
from meshinpaint.mesh import face_normals


def _angle(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=1), -1, 1)))


def test_e_pos_examples():
    x0 = np.zeros((3, 3))
    assert e_pos(x0, x0, np.ones(3))[0] == 0.0
    x = x0.copy()
    x[0] = [3, 0, 4]
    x[1] = [100, 100, 100]
    assert e_pos(x, x0, [1, 0, 0])[0] == pytest.approx(5.0)
    y = np.zeros((2, 3))
    y[0, 0], y[1, 1] = 1.0, 7.0
    assert e_pos(y, np.zeros((2, 3)), [1, 1])[0] == pytest.approx(5.0)
    with pytest.raises(LossUndefinedError):
        e_pos(x, x0, np.zeros(3))


def test_e_nrm_examples():
    assert e_nrm(np.eye(3), np.eye(3), np.ones(3))[0] == 0.0
    assert e_nrm(np.array([[1.0, 0, 0]]), np.array([[0.0, 1, 0]]), [1])[0] == 2.0
    assert e_nrm(np.array([[0.0, 0, 1]]), np.array([[0.0, 0, -1]]), [1])[0] == 2.0
    with pytest.raises(LossUndefinedError):
        e_nrm(np.eye(3), np.eye(3), np.zeros(3))


def test_e_nrm_kink_subgradient_is_zero():
    _, g = e_nrm(np.eye(3), np.eye(3), np.ones(3))
    assert np.all(g == 0)


def test_masked_entries_do_not_matter(rng):
    x0 = rng.normal(size=(10, 3))
    x = rng.normal(size=(10, 3))
    mask = np.array([1, 0] * 5)
    x2 = x.copy()
    x2[mask == 0] += 100.0
    assert e_pos(x, x0, mask)[0] == e_pos(x2, x0, mask)[0]
    n = rng.normal(size=(10, 3))
    n2 = n.copy()
    n2[mask == 0] = 0.0
    assert e_nrm(n, x0, mask)[0] == e_nrm(n2, x0, mask)[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normal_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mesh = fixtures.icosahedron()
    x = mesh.vertices + rng.normal(0, 0.1, mesh.vertices.shape)
    gn = rng.normal(size=(mesh.n_faces, 3))
    grad = face_normal_backward(x, mesh.faces, gn)
    h = 1e-6
    num = np.zeros_like(x)
    for i in range(x.shape[0]):
        for c in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, c] += h
            xm[i, c] -= h
            num[i, c] = (np.sum(face_normals_raw(xp, mesh.faces)[0] * gn)
                         - np.sum(face_normals_raw(xm, mesh.faces)[0] * gn)) / (2 * h)
    np.testing.assert_allclose(grad, num, atol=1e-7 * np.abs(num).max())


def test_raw_normals_agree_with_mesh_normals(sphere3):
    np.testing.assert_allclose(face_normals_raw(sphere3.vertices, sphere3.faces)[0], face_normals(sphere3),
                               atol=1e-15)


def test_e_pos_gradient(rng):
    x0 = rng.normal(size=(6, 3))
    x = rng.normal(size=(6, 3))
    mask = np.array([1, 1, 0, 1, 0, 1])
    _, g = e_pos(x, x0, mask)
    h = 1e-6
    for idx in [(0, 0), (2, 1), (5, 2)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        assert (e_pos(xp, x0, mask)[0] - e_pos(xm, x0, mask)[0]) / (2 * h) == pytest.approx(g[idx], abs=1e-8)


def test_bnf_planar_fixed_point_and_identity():
    grid = fixtures.plane_grid(5, 5)
    n = face_normals(grid)
    out = bilateral_normal_filter(n, grid.vertices, grid.faces, grid.face_adjacency, BnfParams(7))
    np.testing.assert_allclose(out, n, atol=1e-15)
    noisy = n + np.random.default_rng(0).normal(0, 0.1, n.shape)
    np.testing.assert_array_equal(
        bilateral_normal_filter(noisy, grid.vertices, grid.faces, grid.face_adjacency, BnfParams(0)), noisy)


def test_bnf_unit_length(sphere3):
    n = face_normals(sphere3) + np.random.default_rng(1).normal(0, 0.2, (sphere3.n_faces, 3))
    for t in (1, 2, 5):
        out = bilateral_normal_filter(n, sphere3.vertices, sphere3.faces, sphere3.face_adjacency, BnfParams(t))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_bnf_denoises_cube():
    cube = fixtures.cube_grid(6)
    clean = face_normals(cube)
    noisy = clean + np.random.default_rng(3).normal(0, 0.15, clean.shape)
    noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
    out = bilateral_normal_filter(noisy, cube.vertices, cube.faces, cube.face_adjacency, BnfParams(5))
    assert _angle(out, clean).mean() < 0.5 * _angle(noisy, clean).mean()


def test_e_reg_values(sphere3):
    grid = fixtures.plane_grid(4, 4)
    n = face_normals(grid)
    t = bilateral_normal_filter(n, grid.vertices, grid.faces, grid.face_adjacency)
    assert e_reg(n, t)[0] == pytest.approx(0.0, abs=1e-14)
    cube = fixtures.cube_grid(4)
    n = face_normals(cube)
    t = bilateral_normal_filter(n, cube.vertices, cube.faces, cube.face_adjacency, BnfParams(sigma_s=0.1))
    assert e_reg(n, t)[0] < 1e-12
    n = face_normals(sphere3)
    t = bilateral_normal_filter(n, sphere3.vertices, sphere3.faces, sphere3.face_adjacency)
    assert e_reg(n, t)[0] > 0


def test_weight_presets():
    w = LossWeights.preset("sgcn", "cad")
    assert (w.pos, w.nrm, w.reg) == ((1.0,), 4.0, 4.0)
    w = LossWeights.preset("sgcn", "noncad")
    assert (w.pos, w.nrm, w.reg) == ((1.0,), 1.0, 0.0)
    w = LossWeights.preset("mgcn", "realscan")
    np.testing.assert_allclose(w.pos, (0.35, 0.30, 0.20, 0.15), rtol=1e-12)
    assert sum(w.pos) == pytest.approx(1.0) and w.reg == 0.0
    w = LossWeights.preset("mgcn", "cad", 1)
    assert sum(w.pos) == pytest.approx(1.0) and len(w.pos) == 2
    with pytest.raises(ConfigError):
        LossWeights.preset("sgcn", "wood")
    with pytest.raises(ConfigError):
        LossWeights.preset("unet", "cad")


def _setup(rng, mesh):
    x0 = mesh.vertices
    x = x0 + rng.normal(0, 0.05, x0.shape)
    vm = np.ones(mesh.n_vertices)
    vm[:3] = 0
    fm = vm[mesh.faces].min(axis=1)
    n0 = face_normals(mesh)
    return x, x0, vm, fm, n0


def test_total_without_normal_terms_is_weighted_position_sum(sphere3, rng):
    x, x0, vm, fm, n0 = _setup(rng, sphere3)
    w = LossWeights((0.6, 0.4), 0.0, 0.0)
    res = total_loss([x, x[:10]], [x0, x0[:10]], [vm, vm[:10]], sphere3.faces, n0, fm, w)
    expect = 0.6 * e_pos(x, x0, vm)[0] + 0.4 * e_pos(x[:10], x0[:10], vm[:10])[0]
    assert res.total == expect


def test_noncad_total_ignores_bnf_parameters(sphere3, rng):
    x, x0, vm, fm, n0 = _setup(rng, sphere3)
    w = LossWeights.preset("sgcn", "noncad")
    a = total_loss([x], [x0], [vm], sphere3.faces, n0, fm, w, sphere3.face_adjacency, BnfParams(5, None, 0.3))
    b = total_loss([x], [x0], [vm], sphere3.faces, n0, fm, w, sphere3.face_adjacency, BnfParams(2, 0.1, 0.9))
    assert a.total == b.total


def test_total_nonnegative_and_zero_at_truth(sphere3, rng):
    x, x0, vm, fm, n0 = _setup(rng, sphere3)
    w = LossWeights.preset("sgcn", "cad")
    assert total_loss([x], [x0], [vm], sphere3.faces, n0, fm, w, sphere3.face_adjacency).total > 0
    grid = fixtures.plane_grid(4, 4)
    vm = np.ones(grid.n_vertices)
    res = total_loss([grid.vertices], [grid.vertices], [vm], grid.faces, face_normals(grid),
                     np.ones(grid.n_faces), w, grid.face_adjacency)
    assert res.total == pytest.approx(0.0, abs=1e-14)


def test_total_gradient_matches_finite_differences(sphere3, rng):
    x, x0, vm, fm, n0 = _setup(rng, sphere3)
    w = LossWeights.preset("sgcn", "cad")
    target = bilateral_normal_filter(face_normals_raw(x, sphere3.faces)[0], x, sphere3.faces, sphere3.face_adjacency)
    res = total_loss([x], [x0], [vm], sphere3.faces, n0, fm, w, bnf_target=target)
    h = 1e-7
    for idx in [(0, 0), (17, 1), (300, 2), (641, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (total_loss([xp], [x0], [vm], sphere3.faces, n0, fm, w, bnf_target=target).total
              - total_loss([xm], [x0], [vm], sphere3.faces, n0, fm, w, bnf_target=target).total) / (2 * h)
        assert fd == pytest.approx(res.grads[0][idx], rel=1e-4, abs=1e-7)


def test_level_mismatch(sphere3, rng):
    x, x0, vm, fm, n0 = _setup(rng, sphere3)
    with pytest.raises(ConfigError):
        total_loss([x], [x0], [vm], sphere3.faces, n0, fm, LossWeights.preset("mgcn", "cad"))
