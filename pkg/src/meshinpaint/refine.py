"""Least-squares refinement of the network output.

Known vertices are pulled back to the initial mesh while hole vertices keep
the predicted shape, and the Laplacian term blends the seam:

    X_out = argmin 1/2 |L (X - X_mix)|^2 + mu/2 |Q * (X - X_init)|^2

with ``L = I - D^-1 A`` the uniform Laplacian of the initial mesh. The
normal equations ``(L^T L + mu diag(q)) X = L^T L X_mix + mu q * X_init``
are solved per coordinate.

Because ``X_mix`` equals ``X_init`` wherever ``q`` is nonzero, ``X_mix``
itself zeroes both terms and is the minimizer: this objective snaps known
vertices back and leaves hole vertices at the network prediction. The
``target="cmp"`` variant keeps the Laplacian (differential coordinates)
of ``X_cmp`` instead, so the predicted hole shape is re-fitted to the
anchored surroundings and seam offsets are spread into the hole.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import ConfigError, MeshStructureError, NumericError
from .mesh import Mesh, dilate, uniform_laplacian

# per-mesh values; unknown names fall back to the mesh-type default
KNOWN_MESH_MU = {
    "ankylosaurus": 1.0,
    "fandisk": 0.01,
    "sharp-sphere": 0.1,
    "cg": 0.1,
    "part-lp": 0.01,
    "twelve": 0.1,
}
TYPE_MU = {"cad": 0.1, "noncad": 1.0, "realscan": 1.0}


def default_mu(mesh_type: str, name: str | None = None) -> float:
    """Anchor weight for a mesh type, or for a recognized mesh name."""
    if name is not None:
        key = name.lower().replace("_", "-").replace(" ", "-")
        if key in KNOWN_MESH_MU:
            return KNOWN_MESH_MU[key]
    try:
        return TYPE_MU[mesh_type]
    except KeyError:
        raise ConfigError(f"unknown mesh type {mesh_type!r}") from None


def build_xmix(x_init, x_cmp, vertex_mask) -> np.ndarray:
    """Known rows from ``x_init``, hole rows from ``x_cmp``."""
    x_init = np.asarray(x_init, dtype=np.float64)
    x_cmp = np.asarray(x_cmp, dtype=np.float64)
    if x_init.shape != x_cmp.shape:
        raise ValueError(f"shape mismatch {x_init.shape} vs {x_cmp.shape}")
    keep = np.asarray(vertex_mask).astype(bool)
    return np.where(keep[:, None], x_init, x_cmp)


def build_hbar(mesh: Mesh, vertex_mask) -> np.ndarray:
    """Sorted indices of hole vertices together with their one-ring."""
    hole = np.asarray(vertex_mask) == 0
    return np.flatnonzero(dilate(mesh, hole, 1))


@dataclass
class RefineResult:
    x_out: np.ndarray
    residual: float
    iterations: int
    hbar: np.ndarray


def refine(mesh: Mesh, x_init, x_cmp, vertex_mask, mu: float, tolerance: float = 1e-10,
           max_residual: float = 1e-8, method: str = "cg", target: str = "mix") -> RefineResult:
    """Blend network predictions into the initial mesh.

    Parameters
    ----------
    mesh : Mesh
        Watertight initial mesh; only its connectivity is used.
    x_init, x_cmp : ndarray, shape (n, 3)
    vertex_mask : array_like
        1 for known vertices, 0 for hole vertices.
    mu : float
        Anchor weight on vertices outside the dilated hole set.
    tolerance : float
        Relative residual requested from conjugate gradients.
    max_residual : float
        Relative residual of the normal equations that must be reached,
        checked by an explicit product after solving.
    method : {"cg", "direct"}
    target : {"mix", "cmp"}
        Positions whose Laplacian is preserved: the mixed positions (the
        default objective) or the raw network output.

    Raises
    ------
    NumericError
        If the residual check fails or every vertex lies in the dilated hole set.
    """
    if mu <= 0:
        raise ConfigError("mu must be positive")
    if not mesh.is_watertight():
        raise MeshStructureError("refinement expects a watertight mesh")
    x_init = np.asarray(x_init, dtype=np.float64)
    x_mix = build_xmix(x_init, x_cmp, vertex_mask)
    if target not in ("mix", "cmp"):
        raise ConfigError(f"unknown refinement target {target!r}")
    x_lap = x_mix if target == "mix" else np.asarray(x_cmp, dtype=np.float64)
    hbar = build_hbar(mesh, vertex_mask)
    q = np.ones(mesh.n_vertices)
    q[hbar] = 0.0
    if not q.any():
        raise NumericError("every vertex is a hole vertex or touches one; "
                           "the minimizer is only defined up to a translation", residual=np.inf)
    lap = uniform_laplacian(mesh)
    ltl = (lap.T @ lap).tocsr()
    a = (ltl + sparse.diags(mu * q)).tocsr()
    b = ltl @ x_lap + mu * q[:, None] * x_init

    out = np.empty_like(x_mix)
    iters = 0
    if method == "direct":
        solve = splinalg.factorized(a.tocsc())
        for c in range(3):
            out[:, c] = solve(b[:, c])
    elif method == "cg":
        diag = a.diagonal()
        precond = splinalg.LinearOperator(a.shape, matvec=lambda r: r / diag, dtype=np.float64)
        cap = 10 * mesh.n_vertices

        for c in range(3):
            count = [0]

            def tick(_):
                count[0] += 1

            x, info = splinalg.cg(a, b[:, c], x0=x_mix[:, c].copy(), rtol=tolerance, atol=0.0,
                                  maxiter=cap, M=precond, callback=tick)
            out[:, c] = x
            iters = max(iters, count[0])
    else:
        raise ConfigError(f"unknown solver {method!r}")

    res = _relative_residual(a, out, b)
    if not res <= max_residual:
        raise NumericError(f"refinement solve stopped at relative residual {res:.3e} "
                           f"(limit {max_residual:.1e}) after {iters} iterations", residual=res)
    return RefineResult(out, res, iters, hbar)


def _relative_residual(a, x, b) -> float:
    """Worst per-coordinate ``|Ax - b| / |b|`` (absolute when ``b`` vanishes)."""
    worst = 0.0
    for c in range(b.shape[1]):
        r = np.linalg.norm(a @ x[:, c] - b[:, c])
        nb = np.linalg.norm(b[:, c])
        worst = max(worst, r / nb if nb > 0 else r)
    return float(worst)
