"""Position, normal and regularization losses with their gradients.

Every loss returns its value together with the gradient w.r.t. its first
argument, so the training loop can chain them into the network backward.
Normal-based terms are pulled back to vertex positions with
:func:`face_normal_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, LossUndefinedError

MESH_TYPES = ("cad", "noncad", "realscan")

# (lambda_nrm, lambda_reg) per mesh type; identical for both architectures
_NORMAL_WEIGHTS = {"cad": (4.0, 4.0), "noncad": (1.0, 0.0), "realscan": (1.0, 0.0)}
_MGCN_POS = (0.35, 0.30, 0.20, 0.15)


@dataclass
class LossWeights:
    """Per-level position weights plus the normal and regularizer weights."""

    pos: tuple = (1.0,)
    nrm: float = 1.0
    reg: float = 0.0
    mesh_type: str = "noncad"

    @classmethod
    def preset(cls, arch: str, mesh_type: str, levels: int = 3) -> "LossWeights":
        """Default weights for an architecture and mesh type.

        MGCN with the standard three coarse levels gets 0.35/0.30/0.20/0.15.
        Other depths use the first ``levels + 1`` entries renormalized to sum to 1.
        """
        if mesh_type not in MESH_TYPES:
            raise ConfigError(f"unknown mesh type {mesh_type!r}; expected one of {MESH_TYPES}")
        nrm, reg = _NORMAL_WEIGHTS[mesh_type]
        if arch == "sgcn":
            pos = (1.0,)
        elif arch == "mgcn":
            if not 0 <= levels <= 3:
                raise ConfigError("MGCN weight presets exist for 0 to 3 coarse levels")
            raw = np.asarray(_MGCN_POS[:levels + 1])
            pos = tuple(float(x) for x in raw / raw.sum())
        else:
            raise ConfigError(f"unknown architecture {arch!r}")
        return cls(pos, nrm, reg, mesh_type)


@dataclass
class BnfParams:
    """Bilateral normal filter settings; ``sigma_c=None`` means mean adjacent-centroid distance."""

    iterations: int = 5
    sigma_c: float | None = None
    sigma_s: float = 0.3

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("BNF iteration count must be non-negative")
        if self.sigma_s <= 0 or (self.sigma_c is not None and self.sigma_c <= 0):
            raise ConfigError("BNF kernel widths must be positive")


# ----------------------------------------------------------------------------
# normals


def face_normals_raw(x: np.ndarray, faces: np.ndarray):
    """Unit face normals and the unnormalized cross products they came from.

    Unlike :func:`meshinpaint.mesh.face_normals` this never raises: a zero
    cross product yields a NaN normal, which the training loop treats as
    a non-finite loss.
    """
    p = x[faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    c = np.cross(e1, e2)
    norm = np.linalg.norm(c, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = c / norm[:, None]
    return n, (e1, e2, norm)


def face_normal_backward(x: np.ndarray, faces: np.ndarray, grad_n: np.ndarray, cache=None) -> np.ndarray:
    """Pull a gradient w.r.t. unit face normals back to vertex positions."""
    if cache is None:
        n, cache = face_normals_raw(x, faces)
    else:
        n = None
    e1, e2, norm = cache
    if n is None:
        n = np.cross(e1, e2) / norm[:, None]
    # d(c/|c|) is the tangential projection scaled by 1/|c|
    gc = (grad_n - n * np.sum(n * grad_n, axis=1, keepdims=True)) / norm[:, None]
    g1 = np.cross(e2, gc)
    g2 = np.cross(gc, e1)
    out = np.zeros_like(x, dtype=np.float64)
    np.add.at(out, faces[:, 1], g1)
    np.add.at(out, faces[:, 2], g2)
    np.add.at(out, faces[:, 0], -g1 - g2)
    return out


# ----------------------------------------------------------------------------
# loss terms


def e_pos(x_cmp, x_init, mask):
    """Masked RMS vertex distance and its gradient w.r.t. ``x_cmp``."""
    x_cmp = np.asarray(x_cmp, dtype=np.float64)
    x_init = np.asarray(x_init, dtype=np.float64)
    if x_cmp.shape != x_init.shape:
        raise ValueError(f"position arrays differ in shape: {x_cmp.shape} vs {x_init.shape}")
    m = np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise LossUndefinedError("every vertex is masked; position loss undefined")
    d = x_cmp - x_init
    value = float(np.sqrt(np.sum(m * np.sum(d * d, axis=1)) / total))
    if value == 0.0:
        return 0.0, np.zeros_like(d)
    return value, m[:, None] * d / (total * value)


def e_nrm(n_cmp, n_init, mask):
    """Masked mean L1 normal difference and its (sub)gradient w.r.t. ``n_cmp``."""
    m = np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise LossUndefinedError("every face is masked; normal loss undefined")
    d = np.asarray(n_cmp) - np.asarray(n_init)
    value = float(np.sum(m * np.abs(d).sum(axis=1)) / total)
    return value, m[:, None] * np.sign(d) / total


def bilateral_normal_filter(normals, x, faces, face_pairs, params: BnfParams | None = None) -> np.ndarray:
    """Iterated bilateral filter of face normals.

    Each face is replaced by the normalized, weighted sum of itself and its
    edge-adjacent faces. The weight of neighbour ``k`` is its area times a
    Gaussian of the centroid distance (width ``sigma_c``) times a Gaussian
    of the normal difference (width ``sigma_s``).

    Parameters
    ----------
    normals : ndarray, shape (F, 3)
    x : ndarray, shape (V, 3)
        Vertex positions giving centroids and areas.
    faces : ndarray, shape (F, 3)
    face_pairs : ndarray, shape (P, 2)
        Edge-adjacent face pairs, each listed once.
    """
    params = params or BnfParams()
    n = np.array(normals, dtype=np.float64, copy=True)
    if params.iterations == 0:
        return n
    p = x[faces]
    centroid = p.mean(axis=1)
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    m = len(faces)
    rows = np.concatenate([face_pairs[:, 0], face_pairs[:, 1], np.arange(m)])
    cols = np.concatenate([face_pairs[:, 1], face_pairs[:, 0], np.arange(m)])
    dist = np.linalg.norm(centroid[rows] - centroid[cols], axis=1)
    sigma_c = params.sigma_c
    if sigma_c is None:
        sigma_c = float(dist[:2 * len(face_pairs)].mean()) if len(face_pairs) else 1.0
    static = area[cols] * np.exp(-dist ** 2 / (2 * sigma_c ** 2))
    for _ in range(params.iterations):
        dn = n[rows] - n[cols]
        w = static * np.exp(-np.sum(dn * dn, axis=1) / (2 * params.sigma_s ** 2))
        acc = sparse.csr_matrix((w, (rows, cols)), shape=(m, m)) @ n
        norm = np.linalg.norm(acc, axis=1)
        ok = norm > 0
        n[ok] = acc[ok] / norm[ok, None]
    return n


def e_reg(n_cmp, target):
    """Mean L1 distance to the filtered normals; ``target`` is held constant."""
    d = np.asarray(n_cmp) - np.asarray(target)
    m = len(d)
    return float(np.abs(d).sum() / m), np.sign(d) / m


# ----------------------------------------------------------------------------
# total


@dataclass
class LossResult:
    total: float
    pos: list
    nrm: float
    reg: float
    grads: list = field(repr=False, default_factory=list)


def total_loss(x_levels, x_init_levels, pos_masks, faces, n_init, face_mask, weights: LossWeights,
               face_pairs=None, bnf: BnfParams | None = None, bnf_target=None) -> LossResult:
    """Weighted sum of per-level position losses, the normal loss and the regularizer.

    Normal and regularizer terms use the finest level only. ``bnf_target``
    overrides the filtered normals (used to freeze the target when checking
    gradients); otherwise it is recomputed from the current normals.
    Terms with zero weight are still reported but contribute no gradient.

    Returns
    -------
    LossResult
        ``grads[r]`` is the gradient w.r.t. ``x_levels[r]``.
    """
    if len(x_levels) != len(weights.pos) or len(x_init_levels) != len(x_levels) \
            or len(pos_masks) != len(x_levels):
        raise ConfigError(f"{len(weights.pos)} position weights for {len(x_levels)} levels")
    grads = []
    pos_values = []
    total = 0.0
    for lam, x, x0, m in zip(weights.pos, x_levels, x_init_levels, pos_masks):
        v, g = e_pos(x, x0, m)
        pos_values.append(v)
        total += lam * v
        grads.append(lam * g)
    x = x_levels[0]
    n, cache = face_normals_raw(x, faces)
    nrm_value, g = e_nrm(n, n_init, face_mask)
    gn = weights.nrm * g
    reg_value = 0.0
    if weights.reg != 0 or bnf_target is not None:
        if bnf_target is None:
            if face_pairs is None:
                raise ValueError("face adjacency required for the regularizer")
            bnf_target = bilateral_normal_filter(n, x, faces, face_pairs, bnf)
        reg_value, g = e_reg(n, bnf_target)
        gn = gn + weights.reg * g
    total += weights.nrm * nrm_value + weights.reg * reg_value
    if weights.nrm != 0 or weights.reg != 0:
        grads[0] = grads[0] + face_normal_backward(x, faces, gn, cache)
    return LossResult(float(total), pos_values, nrm_value, reg_value, grads)
