from collections import deque

import numpy as np
import pytest

from meshinpaint import fixtures
from meshinpaint.errors import ConfigError, NumericError
from meshinpaint.mesh import bbox_diagonal, dilate
from meshinpaint.refine import build_hbar, build_xmix, default_mu, refine

from conftest import tetrahedron


def _hole(mesh, center=0, rings=2):
    seed = np.zeros(mesh.n_vertices, dtype=bool)
    seed[center] = True
    return (~dilate(mesh, seed, rings)).astype(np.int8)


def test_xmix_example():
    x_init = np.array([[0.0, 0, 0], [1, 1, 1]])
    x_cmp = np.array([[5.0, 5, 5], [9, 9, 9]])
    np.testing.assert_array_equal(build_xmix(x_init, x_cmp, [1, 0]), [[0, 0, 0], [9, 9, 9]])
    np.testing.assert_array_equal(build_xmix(x_init, x_cmp, [1, 1]), x_init)
    np.testing.assert_array_equal(build_xmix(x_init, x_cmp, [0, 0]), x_cmp)


def test_hbar_matches_breadth_first_oracle(sphere3, rng):
    mask = np.ones(sphere3.n_vertices, dtype=np.int8)
    mask[rng.choice(sphere3.n_vertices, 20, replace=False)] = 0
    nbrs = [set() for _ in range(sphere3.n_vertices)]
    for a, b, c in sphere3.faces:
        nbrs[a] |= {b, c}
        nbrs[b] |= {a, c}
        nbrs[c] |= {a, b}
    expect = set()
    queue = deque((int(v), 0) for v in np.flatnonzero(mask == 0))
    while queue:
        v, d = queue.popleft()
        if v in expect:
            continue
        expect.add(v)
        if d < 1:
            queue.extend((u, d + 1) for u in nbrs[v])
    assert build_hbar(sphere3, mask).tolist() == sorted(expect)
    assert build_hbar(sphere3, np.ones(sphere3.n_vertices)).size == 0


@pytest.mark.parametrize("method", ["cg", "direct"])
def test_fixed_point(sphere3, method):
    x = sphere3.vertices
    res = refine(sphere3, x, x.copy(), _hole(sphere3), 0.1, method=method)
    assert res.residual <= 1e-8
    assert np.abs(res.x_out - x).max() <= 1e-9 * bbox_diagonal(sphere3)


def test_dense_least_squares_oracle(rng):
    mesh = fixtures.icosphere(1)
    mask = _hole(mesh, 3, 1)
    x_init = mesh.vertices
    x_cmp = x_init + rng.normal(0, 0.1, x_init.shape)
    mu = 0.7
    for target in ("mix", "cmp"):
        res = refine(mesh, x_init, x_cmp, mask, mu, method="direct", target=target)
        n = mesh.n_vertices
        adj = mesh.adjacency.toarray()
        lap = np.eye(n) - adj / adj.sum(axis=1, keepdims=True)
        q = np.ones(n)
        q[build_hbar(mesh, mask)] = 0
        x_lap = build_xmix(x_init, x_cmp, mask) if target == "mix" else x_cmp
        a = np.vstack([lap, np.sqrt(mu) * np.diag(q)])
        b = np.vstack([lap @ x_lap, np.sqrt(mu) * q[:, None] * x_init])
        expect = np.linalg.lstsq(a, b, rcond=None)[0]
        np.testing.assert_allclose(res.x_out, expect, atol=1e-10)


def test_known_vertices_follow_init_for_large_mu(sphere3, rng):
    mask = _hole(sphere3)
    x_init = sphere3.vertices
    x_cmp = x_init + rng.normal(0, 0.05, x_init.shape)
    res = refine(sphere3, x_init, x_cmp, mask, 1e8, method="direct", target="cmp")
    outside = np.setdiff1d(np.arange(sphere3.n_vertices), res.hbar)
    assert np.abs(res.x_out[outside] - x_init[outside]).max() < 1e-6


def test_default_objective_returns_xmix(sphere3, rng):
    mask = _hole(sphere3)
    x_init = sphere3.vertices
    x_cmp = x_init + rng.normal(0, 0.05, x_init.shape)
    res = refine(sphere3, x_init, x_cmp, mask, 0.1)
    np.testing.assert_allclose(res.x_out, build_xmix(x_init, x_cmp, mask), atol=1e-9)


def test_cmp_target_removes_a_translated_prediction(sphere3):
    x_init = sphere3.vertices
    x_cmp = x_init + np.array([0.3, -0.2, 0.1])
    res = refine(sphere3, x_init, x_cmp, _hole(sphere3), 1.0, target="cmp")
    np.testing.assert_allclose(res.x_out, x_init, atol=1e-8)


def test_coordinates_are_decoupled(sphere3, rng):
    mask = _hole(sphere3)
    x_init = sphere3.vertices
    x_cmp = x_init + rng.normal(0, 0.05, x_init.shape)
    a = refine(sphere3, x_init, x_cmp, mask, 1.0, method="direct", target="cmp").x_out
    x_cmp2 = x_cmp.copy()
    x_cmp2[:, 2] += rng.normal(0, 1.0, len(x_cmp))
    b = refine(sphere3, x_init, x_cmp2, mask, 1.0, method="direct", target="cmp").x_out
    np.testing.assert_array_equal(a[:, :2], b[:, :2])
    assert not np.allclose(a[:, 2], b[:, 2])


def test_cg_matches_direct(sphere3, rng):
    mask = _hole(sphere3)
    x_init = sphere3.vertices
    x_cmp = x_init + rng.normal(0, 0.05, x_init.shape)
    a = refine(sphere3, x_init, x_cmp, mask, 0.1, method="cg", target="cmp")
    b = refine(sphere3, x_init, x_cmp, mask, 0.1, method="direct", target="cmp")
    assert a.residual <= 1e-8 and b.residual <= 1e-8
    np.testing.assert_allclose(a.x_out, b.x_out, atol=1e-7)


def test_everything_in_dilated_holes_is_an_error():
    tet = tetrahedron()
    with pytest.raises(NumericError):
        refine(tet, tet.vertices, tet.vertices, [0, 1, 1, 1], 1.0)


def test_bad_arguments(sphere3):
    x = sphere3.vertices
    mask = _hole(sphere3)
    with pytest.raises(ConfigError):
        refine(sphere3, x, x, mask, 0.0)
    with pytest.raises(ConfigError):
        refine(sphere3, x, x, mask, -1.0)
    with pytest.raises(ConfigError):
        refine(sphere3, x, x, mask, 1.0, method="qr")
    with pytest.raises(ConfigError):
        refine(sphere3, x, x, mask, 1.0, target="smooth")


@pytest.mark.parametrize("mesh_type,name,mu", [
    ("noncad", "Ankylosaurus", 1.0),
    ("cad", "Fandisk", 0.01),
    ("cad", "sharp_sphere", 0.1),
    ("cad", None, 0.1),
    ("noncad", None, 1.0),
    ("realscan", "unknown-scan", 1.0),
])
def test_default_mu(mesh_type, name, mu):
    assert default_mu(mesh_type, name) == mu


def test_default_mu_unknown_type():
    with pytest.raises(ConfigError):
        default_mu("wood")
