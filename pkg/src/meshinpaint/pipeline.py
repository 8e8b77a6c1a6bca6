"""Self-supervised training, evaluation and metrics.

Training never looks at the real holes: the loss masks mark them as
unknown, while fake holes (random k-rings) are hidden from the input but
still supervised. For training, positions are centered and measured in
units of the mean edge length of the initial mesh, which fixes the balance
between the length-valued position loss and the unitless normal loss
regardless of the absolute size of the input. All public results are in
the input coordinates.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import gcn
from .closest import TriangleIndex
from .errors import ConfigError, NumericError
from .fixtures import gradcheck_sphere
from .hierarchy import ProgressiveHierarchy, build_hierarchy
from .losses import BnfParams, LossWeights, bilateral_normal_filter, face_normals_raw, total_loss
from .mesh import Mesh, bbox_diagonal, dilate, k_ring
from .preprocess import HoleMask, PreprocessResult, oversmooth


@dataclass
class AugmentationConfig:
    p: float = 0.014
    k: int = 4
    mask_sets: int = 40
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError("seed probability p must lie in [0, 1)")
        if self.k < 1 or self.mask_sets < 1:
            raise ConfigError("ring radius and mask-set count must be at least 1")


@dataclass
class TrainConfig:
    steps: int = 100
    arch: str = "sgcn"
    mesh_type: str = "noncad"
    weights: LossWeights | None = None
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    halve_every: int = 50
    bnf: BnfParams = field(default_factory=BnfParams)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")


def gen_fake_holes(mesh: Mesh, real_mask: HoleMask, config: AugmentationConfig) -> list[HoleMask]:
    """Random k-ring holes united with the real holes, one mask per set.

    Every vertex independently becomes a seed with probability ``p``; the
    ``k``-rings around the seeds are hidden. Deterministic in ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    known = np.asarray(real_mask.vertex) == 1
    out = []
    for _ in range(config.mask_sets):
        seeds = rng.random(mesh.n_vertices) < config.p
        fake = dilate(mesh, seeds, config.k)
        vertex = (known & ~fake).astype(np.int8)
        out.append(HoleMask.from_vertex_mask(mesh, vertex, fake & known))
    return out


def build_features(displacement, vertex_mask, scale: float = 1.0) -> np.ndarray:
    """Rows ``(dx, dy, dz, 1) / scale`` for known vertices and zeros for hidden ones.

    Only the displacement channels are divided by ``scale``.
    """
    d = np.asarray(displacement, dtype=np.float64)
    m = (np.asarray(vertex_mask) == 1).astype(np.float64)
    if len(d) != len(m):
        raise ValueError(f"{len(d)} displacements for {len(m)} mask entries")
    return np.concatenate([d / scale, np.ones((len(d), 1))], axis=1) * m[:, None]


# ----------------------------------------------------------------------------
# problem setup


@dataclass
class Problem:
    """Everything the training loop needs, in normalized coordinates."""

    mesh: Mesh
    center: np.ndarray
    unit: float
    x_init: list
    x_smooth: list
    displacement: np.ndarray
    scale: float
    real_mask: HoleMask
    pos_masks: list
    n_init: np.ndarray
    ctx: gcn.GraphContext
    hierarchy: ProgressiveHierarchy | None = None

    @property
    def n_levels(self) -> int:
        return len(self.x_init)

    def to_input_frame(self, x):
        return np.asarray(x) * self.unit + self.center


def build_problem(pre: PreprocessResult, arch: str, levels: int = 3,
                  hierarchy: ProgressiveHierarchy | None = None) -> Problem:
    """Normalize positions and assemble per-level targets, masks and graph operators."""
    mesh = pre.init_mesh
    center = 0.5 * (mesh.vertices.max(axis=0) + mesh.vertices.min(axis=0))
    unit = float(mesh.edge_lengths().mean())
    x0 = (mesh.vertices - center) / unit
    xs = (pre.smooth_mesh.vertices - center) / unit
    disp = x0 - xs
    known = pre.real_mask.vertex == 1
    if not known.any():
        raise ConfigError("no known vertices: the whole mesh is a hole")
    scale = float(np.sqrt(np.mean(np.sum(disp[known] ** 2, axis=1)) / 3.0))
    if scale == 0.0:
        scale = 1.0
    n_init = face_normals_raw(x0, mesh.faces)[0]
    if arch == "sgcn":
        ctx = gcn.GraphContext.from_mesh(pre.smooth_mesh)
        return Problem(mesh, center, unit, [x0], [xs], disp, scale, pre.real_mask,
                       [pre.real_mask.vertex], n_init, ctx)
    if hierarchy is None:
        hierarchy = build_hierarchy(pre.smooth_mesh, levels)
    x_init = [x0] + [hierarchy.level_positions(x0, r) for r in range(1, levels + 1)]
    x_smooth = [xs] + [hierarchy.level_positions(xs, r) for r in range(1, levels + 1)]
    masks = [pre.real_mask.vertex] + [hierarchy.level_vertex_mask(pre.real_mask.vertex, r)
                                      for r in range(1, levels + 1)]
    for r, m in enumerate(masks):
        if not np.any(m == 1):
            raise ConfigError(f"level {r} has no known vertex")
    ctx = gcn.GraphContext.from_hierarchy(hierarchy)
    return Problem(mesh, center, unit, x_init, x_smooth, disp, scale, pre.real_mask,
                   masks, n_init, ctx, hierarchy)


def _predict(problem: Problem, outputs):
    return [xs + problem.scale * o for xs, o in zip(problem.x_smooth, outputs)]


def _loss(problem: Problem, outputs, weights: LossWeights, bnf: BnfParams, bnf_target=None):
    xs = _predict(problem, outputs)
    pairs = problem.mesh.face_adjacency
    res = total_loss(xs, problem.x_init, problem.pos_masks, problem.mesh.faces, problem.n_init,
                     problem.real_mask.face, weights, pairs, bnf, bnf_target)
    return res


# ----------------------------------------------------------------------------
# training


@dataclass
class TraceRow:
    step: int
    lr: float
    pos: list
    nrm: float
    reg: float
    total: float


@dataclass
class TrainResult:
    model: gcn.GcnModel
    trace: list


def make_model(arch: str, seed: int = 0, levels: int = 3, **overrides) -> gcn.GcnModel:
    return gcn.GcnModel(gcn.ModelConfig(arch=arch, levels=levels, seed=seed, **overrides))


def train(problem: Problem, model: gcn.GcnModel, masks: list[HoleMask], config: TrainConfig,
          progress=None) -> TrainResult:
    """Run the optimization loop, cycling through the mask sets in order.

    Raises
    ------
    NumericError
        If the loss or any gradient becomes non-finite; ``step`` is set.
    """
    if model.n_levels != problem.n_levels:
        raise ConfigError(f"model predicts {model.n_levels} levels, problem has {problem.n_levels}")
    weights = config.weights or LossWeights.preset(config.arch, config.mesh_type, problem.n_levels - 1)
    feats = [build_features(problem.displacement, m.vertex, problem.scale) for m in masks]
    trace = []
    for step in range(1, config.steps + 1):
        lr = gcn.learning_rate(step, config.lr, config.halve_every)
        x = feats[(step - 1) % len(feats)]
        model.zero_grad()
        out = model.forward(x, problem.ctx, train=True)
        res = _loss(problem, out, weights, config.bnf)
        if not np.isfinite(res.total):
            raise NumericError(f"non-finite loss at step {step}: {res}", step=step)
        model.backward([problem.scale * g for g in res.grads], problem.ctx)
        for name, g in model.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name} at step {step}", step=step)
        gcn.adam_step(model, lr, config.beta1, config.beta2)
        row = TraceRow(step, lr, list(res.pos), res.nrm, res.reg, res.total)
        trace.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(model, trace)


def write_trace(trace: list, path) -> None:
    levels = len(trace[0].pos) if trace else 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr"] + [f"e_pos_{r}" for r in range(levels)] + ["e_nrm", "e_reg", "total"])
        for row in trace:
            w.writerow([row.step, repr(row.lr)] + [repr(v) for v in row.pos]
                       + [repr(row.nrm), repr(row.reg), repr(row.total)])


def evaluate(model: gcn.GcnModel, problem: Problem) -> Mesh:
    """Predict with the real-hole input only and return the completed mesh in input coordinates."""
    x = build_features(problem.displacement, problem.real_mask.vertex, problem.scale)
    out = model.forward(x, problem.ctx, train=False)
    x_cmp = problem.x_smooth[0] + problem.scale * out[0]
    return problem.mesh.with_vertices(problem.to_input_frame(x_cmp))


# ----------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    """Mean distances to the ground truth, divided by its bbox diagonal, in units of 1e-3."""

    eps_all: float
    eps_hole: float | None
    signed_distance: np.ndarray = field(repr=False)
    eps_all_vertex: float | None = None
    eps_hole_vertex: float | None = None

    def as_dict(self) -> dict:
        out = {"eps_all": self.eps_all, "eps_hole": self.eps_hole, "units": "1e-3 bbox diagonal"}
        if self.eps_all_vertex is not None:
            out["eps_all_vertex"] = self.eps_all_vertex
            out["eps_hole_vertex"] = self.eps_hole_vertex
        return out


def compute_metrics(output: Mesh, gt: Mesh, hole_mask=None, vertex_distance: bool = False) -> MetricsReport:
    """Closest-point distances from every output vertex to the ground-truth surface.

    The sign comes from the ground-truth face normal at the closest point.
    ``hole_mask`` marks hole vertices with 0; without any, ``eps_hole`` is None.
    With ``vertex_distance`` the nearest-vertex variant is reported as well.
    """
    diag = bbox_diagonal(gt)
    if diag == 0:
        raise ConfigError("ground truth has a degenerate bounding box")
    index = TriangleIndex(gt.vertices, gt.faces)
    dist, closest, face = index.query(output.vertices)
    n = face_normals_raw(gt.vertices, gt.faces)[0][face]
    sign = np.where(np.sum((output.vertices - closest) * n, axis=1) < 0, -1.0, 1.0)
    signed = sign * dist / diag
    hole = None if hole_mask is None else np.asarray(hole_mask) == 0

    def summary(d):
        all_ = float(np.mean(d) / diag * 1e3)
        if hole is None or not hole.any():
            return all_, None
        return all_, float(np.mean(d[hole]) / diag * 1e3)

    eps_all, eps_hole = summary(dist)
    report = MetricsReport(eps_all, eps_hole, signed)
    if vertex_distance:
        from scipy.spatial import cKDTree

        vd, _ = cKDTree(gt.vertices).query(output.vertices)
        report.eps_all_vertex, report.eps_hole_vertex = summary(vd)
    return report


# ----------------------------------------------------------------------------
# gradient check harness


def gradcheck_problem(arch: str = "sgcn", width: int = 8, seed: int = 0, smooth_steps: int = 3):
    """Model, problem and CAD weights on the 50-vertex sphere with one real hole.

    A few smoothing steps are used instead of the production 30: on a mesh
    this small, 30 steps shrink the sphere to a few percent of its size.
    """
    mesh = gradcheck_sphere()
    smooth = oversmooth(mesh, smooth_steps)
    real = np.ones(mesh.n_vertices, dtype=np.int8)
    real[sorted(k_ring(mesh, 0, 1))] = 0
    real_mask = HoleMask.from_vertex_mask(mesh, real)
    pre = PreprocessResult(mesh, smooth, real_mask, mesh.vertices - smooth.vertices, 1)
    problem = build_problem(pre, arch, levels=3)
    aug = AugmentationConfig(p=0.05, k=1, mask_sets=1, seed=seed)
    mask = gen_fake_holes(mesh, real_mask, aug)[0]
    model = make_model(arch, seed=seed, width=width)
    weights = LossWeights.preset(arch, "cad", problem.n_levels - 1)
    return problem, model, weights, mask


def run_gradcheck(arch: str = "sgcn", width: int = 8, seed: int = 0, tolerance: float = 1e-4,
                  h: float = 1e-5, corrupt: str | None = None) -> gcn.GradCheckReport:
    """Finite-difference check of every parameter gradient of the full CAD-weighted loss.

    Batch statistics are used (training mode) but running statistics are not
    updated. The filtered-normal target of the regularizer is frozen at the
    unperturbed parameters, matching the detached target used in training.
    """
    problem, model, weights, mask = gradcheck_problem(arch, width, seed)
    feats = build_features(problem.displacement, mask.vertex, problem.scale)
    bnf = BnfParams()
    model.update_stats = False
    base = _predict(problem, model.forward(feats, problem.ctx))[0]
    target = bilateral_normal_filter(face_normals_raw(base, problem.mesh.faces)[0], base,
                                     problem.mesh.faces, problem.mesh.face_adjacency, bnf)
    faces = problem.mesh.faces
    known_faces = problem.real_mask.face == 1

    def loss_and_grad():
        model.zero_grad()
        out = model.forward(feats, problem.ctx)
        res = _loss(problem, out, weights, bnf, target)
        model.backward([problem.scale * g for g in res.grads], problem.ctx)
        return res.total, model.grads

    def loss_only(name):
        out = model.rerun_from(name, problem.ctx)
        res = _loss(problem, out, weights, bnf, target)
        n = face_normals_raw(_predict(problem, out[:1])[0], faces)[0]
        kinks = np.concatenate([model.activation_pattern(name),
                                (n - problem.n_init)[known_faces].ravel() > 0,
                                (n - target).ravel() > 0])
        return res.total, kinks

    return gcn.grad_check(model.params, loss_and_grad, loss_only, tolerance, h, corrupt=corrupt)
