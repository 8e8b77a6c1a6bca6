"""Chebyshev graph convolution networks with hand-written backpropagation.

Two architectures are provided:

* ``sgcn`` - a stack of convolution blocks (ChebConv -> BatchNorm ->
  LeakyReLU) on the input mesh followed by a vertex-wise linear head.
* ``mgcn`` - an encoder/decoder over a progressive mesh hierarchy
  without skip connections. Encoder blocks convolve then average-pool;
  decoder blocks unpool then convolve. Just before every unpooling the
  features also pass through a ChebConv side head that predicts the
  displacements of that coarse level.

Only the fixed operator set needed here is differentiated; there is no
general autodiff. Every op caches what its backward needs during
``forward`` and accumulates parameter gradients into ``model.grads``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import MeshFormatError, StateError
from .hierarchy import MergeMap, ProgressiveHierarchy, pool_avg, sum_pool, unpool
from .mesh import Mesh

CHECKPOINT_MAGIC = b"MIGCNCK\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    arch: str = "sgcn"
    width: int = 32
    order: int = 3
    slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    sgcn_blocks: int = 13
    mgcn_blocks: int = 3
    convs_per_block: int = 5
    levels: int = 3
    in_channels: int = 4
    out_channels: int = 3
    head_gain: float = 0.1
    seed: int = 0


def scaled_laplacian(mesh: Mesh) -> sparse.csr_matrix:
    """``(2 / lambda_max) L_sym - I`` with ``lambda_max = 2``, i.e. ``-D^-1/2 A D^-1/2``.

    ``L_sym = D^-1/2 (D - A) D^-1/2``, so an isolated vertex gets a zero row
    in ``L_sym`` and ``-1`` on the diagonal of the scaled operator.
    """
    a = mesh.adjacency
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    d = sparse.diags(inv)
    lsym = d @ (sparse.diags(deg) - a) @ d
    return (lsym - sparse.identity(mesh.n_vertices)).tocsr()


@dataclass
class GraphContext:
    """Per-level graph operators plus the merge maps between levels."""

    operators: list
    merges: list = field(default_factory=list)

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "GraphContext":
        return cls([scaled_laplacian(mesh)], [])

    @classmethod
    def from_hierarchy(cls, h: ProgressiveHierarchy) -> "GraphContext":
        return cls([scaled_laplacian(m) for m in h.levels], list(h.merges))

    @property
    def depth(self) -> int:
        return len(self.merges)

    def sizes(self) -> list[int]:
        return [op.shape[0] for op in self.operators]


# ----------------------------------------------------------------------------
# ops


class ChebConv:
    def __init__(self, name, level, cin, cout, order):
        self.name, self.level = name, level
        self.cin, self.cout, self.order = cin, cout, order

    def init(self, params, rng):
        bound = np.sqrt(6.0 / (self.cin * self.order + self.cout))
        params[self.name + ".weight"] = rng.uniform(-bound, bound, (self.order, self.cin, self.cout))
        params[self.name + ".bias"] = np.zeros(self.cout)

    def forward(self, model, x, ctx, train):
        op = ctx.operators[self.level]
        w = model.params[self.name + ".weight"]
        if x.shape != (op.shape[0], self.cin):
            raise ValueError(f"{self.name}: expected input {(op.shape[0], self.cin)}, got {x.shape}")
        basis = chebyshev_basis(op, x, self.order)
        self.cache = basis
        n = basis.shape[1]
        flat = basis.transpose(1, 0, 2).reshape(n, -1)
        return flat @ w.reshape(-1, self.cout) + model.params[self.name + ".bias"]

    def backward(self, model, g, ctx):
        op = ctx.operators[self.level]
        basis = self.cache
        w = model.params[self.name + ".weight"]
        model.grads[self.name + ".weight"] += np.einsum("knc,nd->kcd", basis, g)
        model.grads[self.name + ".bias"] += g.sum(axis=0)
        dt = np.einsum("nd,kcd->knc", g, w)
        # reverse the recurrence T_k = 2 L T_{k-1} - T_{k-2}; L is symmetric
        for k in range(self.order - 1, 1, -1):
            dt[k - 1] += 2.0 * (op.T @ dt[k])
            dt[k - 2] -= dt[k]
        dx = dt[0].copy()
        if self.order > 1:
            dx += op.T @ dt[1]
        return dx


def chebyshev_basis(op, x, order):
    out = np.empty((order,) + x.shape)
    out[0] = x
    if order > 1:
        out[1] = op @ x
    for k in range(2, order):
        out[k] = 2.0 * (op @ out[k - 1]) - out[k - 2]
    return out


class BatchNorm:
    """Per-channel normalization over all vertices of the graph."""

    def __init__(self, name, channels, eps, momentum):
        self.name, self.channels, self.eps, self.momentum = name, channels, eps, momentum

    def init(self, params, rng):
        params[self.name + ".scale"] = np.ones(self.channels)
        params[self.name + ".shift"] = np.zeros(self.channels)

    def init_buffers(self, buffers):
        buffers[self.name + ".running_mean"] = np.zeros(self.channels)
        buffers[self.name + ".running_var"] = np.ones(self.channels)

    def forward(self, model, x, ctx, train):
        gamma = model.params[self.name + ".scale"]
        beta = model.params[self.name + ".shift"]
        if train:
            mu = x.mean(axis=0)
            xc = x - mu
            var = np.mean(xc * xc, axis=0)
            if model.update_stats:
                n = x.shape[0]
                m = self.momentum
                rm = model.buffers[self.name + ".running_mean"]
                rv = model.buffers[self.name + ".running_var"]
                rm *= 1 - m
                rm += m * mu
                rv *= 1 - m
                rv += m * var * n / max(n - 1, 1)
        else:
            mu = model.buffers[self.name + ".running_mean"]
            var = model.buffers[self.name + ".running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self.cache = (xhat, inv_std, train)
        return gamma * xhat + beta

    def backward(self, model, g, ctx):
        xhat, inv_std, train = self.cache
        gamma = model.params[self.name + ".scale"]
        model.grads[self.name + ".scale"] += np.sum(g * xhat, axis=0)
        model.grads[self.name + ".shift"] += g.sum(axis=0)
        dxhat = g * gamma
        if not train:
            return dxhat * inv_std
        n = g.shape[0]
        return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))


class LeakyReLU:
    def __init__(self, slope):
        self.slope = slope

    def forward(self, model, x, ctx, train):
        self.cache = x > 0
        return np.where(self.cache, x, self.slope * x)

    def backward(self, model, g, ctx):
        return np.where(self.cache, g, self.slope * g)


class Linear:
    """Vertex-wise fully connected layer."""

    def __init__(self, name, cin, cout, gain=1.0):
        self.name, self.cin, self.cout, self.gain = name, cin, cout, gain

    def init(self, params, rng):
        bound = self.gain * np.sqrt(6.0 / (self.cin + self.cout))
        params[self.name + ".weight"] = rng.uniform(-bound, bound, (self.cin, self.cout))
        params[self.name + ".bias"] = np.zeros(self.cout)

    def forward(self, model, x, ctx, train):
        self.cache = x
        return x @ model.params[self.name + ".weight"] + model.params[self.name + ".bias"]

    def backward(self, model, g, ctx):
        model.grads[self.name + ".weight"] += self.cache.T @ g
        model.grads[self.name + ".bias"] += g.sum(axis=0)
        return g @ model.params[self.name + ".weight"].T


class Pool:
    def __init__(self, level):
        self.level = level  # pools level -> level + 1

    def forward(self, model, x, ctx, train):
        return pool_avg(x, ctx.merges[self.level])

    def backward(self, model, g, ctx):
        merge: MergeMap = ctx.merges[self.level]
        return unpool(g / merge.sizes[:, None], merge)


class Unpool:
    def __init__(self, level):
        self.level = level  # unpools level + 1 -> level

    def forward(self, model, x, ctx, train):
        return unpool(x, ctx.merges[self.level])

    def backward(self, model, g, ctx):
        return sum_pool(g, ctx.merges[self.level])


# ----------------------------------------------------------------------------
# model


class GcnModel:
    """Parameters, layer program, gradient buffers and Adam state of one network.

    ``forward`` returns a list of displacement arrays, finest level first
    (length 1 for SGCN). ``backward`` takes the matching list of loss
    gradients (``None`` entries are treated as zero).
    """

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        c = self.config
        if c.arch not in ("sgcn", "mgcn"):
            raise ValueError(f"unknown architecture {c.arch!r}")
        self.chain = []
        self.taps = {}  # chain position -> (side head, level)
        if c.arch == "sgcn":
            self._build_sgcn()
            self.n_levels = 1
        else:
            self._build_mgcn()
            self.n_levels = c.levels + 1
        self.params = {}
        self.buffers = {}
        rng = np.random.default_rng(c.seed)
        for op in self._param_ops():
            op.init(self.params, rng)
            if isinstance(op, BatchNorm):
                op.init_buffers(self.buffers)
        self.zero_grad()
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_step_count = 0
        self.update_stats = True
        self._forward_done = False

    def _block(self, name, level, cin):
        c = self.config
        return [ChebConv(name + ".conv", level, cin, c.width, c.order),
                BatchNorm(name + ".bn", c.width, c.bn_eps, c.bn_momentum),
                LeakyReLU(c.slope)]

    def _build_sgcn(self):
        c = self.config
        cin = c.in_channels
        for b in range(c.sgcn_blocks):
            self.chain += self._block(f"block{b}", 0, cin)
            cin = c.width
        self.head = Linear("head", cin, c.out_channels, c.head_gain)

    def _build_mgcn(self):
        c = self.config
        if c.levels > c.mgcn_blocks:
            raise ValueError("levels cannot exceed the number of encoder blocks")
        cin, level = c.in_channels, 0
        for e in range(c.mgcn_blocks):
            for i in range(c.convs_per_block):
                self.chain += self._block(f"enc{e}.{i}", level, cin)
                cin = c.width
            if level < c.levels:
                self.chain.append(Pool(level))
                level += 1
        for d in range(c.mgcn_blocks):
            if d >= c.mgcn_blocks - c.levels:
                side = ChebConv(f"side{level}", level, cin, c.out_channels, c.order)
                self.taps[len(self.chain)] = (side, level)
                self.chain.append(Unpool(level - 1))
                level -= 1
            for i in range(c.convs_per_block):
                self.chain += self._block(f"dec{d}.{i}", level, cin)
                cin = c.width
        self.head = Linear("head", cin, c.out_channels, c.head_gain)

    def _param_ops(self):
        ops = [op for op in self.chain if hasattr(op, "init")]
        ops += [side for side, _ in self.taps.values()]
        ops.append(self.head)
        return ops

    # -- passes --------------------------------------------------------------
    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, features, ctx: GraphContext, train: bool = True) -> list[np.ndarray]:
        features = np.asarray(features, dtype=np.float64)
        if len(ctx.operators) < self.n_levels:
            raise ValueError(f"model needs {self.n_levels} graph levels, context has {len(ctx.operators)}")
        if features.shape[0] != ctx.operators[0].shape[0]:
            raise ValueError(f"features have {features.shape[0]} rows, mesh has {ctx.operators[0].shape[0]} vertices")
        self._inputs = []
        outputs = self._run(features, 0, [None] * self.n_levels, ctx, train, self._inputs)
        self._outputs = list(outputs)
        self._train = train
        self._forward_done = True
        return outputs

    def _run(self, x, start, outputs, ctx, train, record=None):
        for pos in range(start, len(self.chain)):
            if record is not None:
                record.append(x)
            if pos in self.taps:
                side, level = self.taps[pos]
                outputs[level] = side.forward(self, x, ctx, train)
            x = self.chain[pos].forward(self, x, ctx, train)
        if record is not None:
            record.append(x)
        outputs[0] = self.head.forward(self, x, ctx, train)
        return outputs

    def owner(self, param: str):
        """``(kind, position)`` of the op holding ``param``: chain, tap or head."""
        if not hasattr(self, "_owner"):
            table = {}
            for pos, op in enumerate(self.chain):
                if hasattr(op, "name"):
                    table[op.name] = ("chain", pos)
            for pos, (side, _) in self.taps.items():
                table[side.name] = ("tap", pos)
            table[self.head.name] = ("head", len(self.chain))
            self._owner = table
        return self._owner[param.rsplit(".", 1)[0]]

    def rerun_from(self, param: str, ctx: GraphContext) -> list[np.ndarray]:
        """Recompute outputs after changing ``param``, reusing activations upstream of it.

        Only valid after :meth:`forward`; the cached activations are left untouched,
        and backward caches of downstream ops are overwritten.
        """
        if not getattr(self, "_inputs", None):
            raise StateError("rerun_from called before forward")
        kind, pos = self.owner(param)
        outputs = list(self._outputs)
        if kind == "tap":
            side, level = self.taps[pos]
            outputs[level] = side.forward(self, self._inputs[pos], ctx, self._train)
            return outputs
        if kind == "head":
            outputs[0] = self.head.forward(self, self._inputs[pos], ctx, self._train)
            return outputs
        return self._run(self._inputs[pos], pos, outputs, ctx, self._train)

    def activation_pattern(self, param: str | None = None) -> np.ndarray:
        """Signs of the LeakyReLU inputs from the most recent evaluation.

        With ``param`` only the activations downstream of that parameter are
        included, matching what :meth:`rerun_from` recomputes.
        """
        start = 0 if param is None else self.owner(param)[1]
        if param is not None and self.owner(param)[0] != "chain":
            start = len(self.chain)
        parts = [op.cache.ravel() for op in self.chain[start:] if isinstance(op, LeakyReLU)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def backward(self, output_grads, ctx: GraphContext) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input features."""
        if not self._forward_done:
            raise StateError("backward called before forward")
        grads = list(output_grads) + [None] * (self.n_levels - len(output_grads))
        g0 = np.zeros_like(self._outputs[0]) if grads[0] is None else np.asarray(grads[0], dtype=np.float64)
        g = self.head.backward(self, g0, ctx)
        for pos in range(len(self.chain) - 1, -1, -1):
            g = self.chain[pos].backward(self, g, ctx)
            if pos in self.taps:
                side, level = self.taps[pos]
                if grads[level] is not None:
                    g = g + side.backward(self, np.asarray(grads[level], dtype=np.float64), ctx)
        self._forward_done = False
        return g

    # -- optimisation ---------------------------------------------------------
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.params.items():
            out["param/" + k] = v
            out["adam_m/" + k] = self.adam_m[k]
            out["adam_v/" + k] = self.adam_v[k]
        for k, v in self.buffers.items():
            out["buffer/" + k] = v
        return out


def learning_rate(step: int, base: float = 0.01, halve_every: int = 50) -> float:
    """Step decay: ``base`` for steps 1..halve_every, then halved every ``halve_every`` steps."""
    return base * 0.5 ** ((step - 1) // halve_every)


def adam_step(model: GcnModel, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction using the accumulated gradients."""
    model.adam_step_count += 1
    t = model.adam_step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in model.params.items():
        g = model.grads[k]
        m = model.adam_m[k]
        v = model.adam_v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`.

    ``max_rel_error`` is the largest per-tensor relative error
    ``|a - n| / max(|a|, |n|, floor)`` (Euclidean norms over the tensor);
    ``worst_parameter`` names the tensor attaining it. The element-wise
    figures are diagnostics.
    """

    max_rel_error: float
    worst_parameter: str
    tolerance: float
    n_checked: int
    n_adjusted: int = 0
    max_element_error: float = 0.0
    worst_element: tuple = ()
    per_parameter: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(params: dict, loss_and_grad, loss_only, tolerance: float = 1e-4,
               h: float = 1e-5, floor: float = 1e-4, corrupt: str | None = None,
               min_h: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients with central differences for every parameter entry.

    Parameters
    ----------
    params : dict of ndarray
        Arrays perturbed in place (and restored).
    loss_and_grad : callable
        ``() -> (loss, grads)``, grads keyed like ``params``.
    loss_only : callable
        ``(name) -> loss`` or ``(name) -> (loss, pattern)`` evaluated at the
        current parameter values; ``name`` is the perturbed parameter. The
        optional pattern encodes which side of every kink (ReLU, absolute
        value) the evaluation fell on.
    floor : float
        Denominator floor. Tensors whose gradient is identically zero (a
        bias feeding straight into batch normalization) are thereby compared
        on an absolute scale instead of dividing round-off by round-off.
    corrupt : str, optional
        Name of a parameter whose analytic gradient is deliberately
        perturbed, to self-test the checker.

    Notes
    -----
    A central difference is only meaningful if the stencil stays on one
    smooth piece of the loss. When a pattern is supplied and the +h or -h
    evaluation lands on a different piece than the base point, the
    second-order one-sided difference on the other side is used if that
    side is clean out to 2h; otherwise the entry is retried with h/10 until
    a clean stencil is found or ``min_h`` is reached.
    """
    _, grads = loss_and_grad()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    if corrupt is not None:
        if corrupt not in grads:
            raise KeyError(f"no parameter named {corrupt!r}")
        grads[corrupt].flat[0] += 1.0 + abs(grads[corrupt].flat[0])
    per = {}
    worst_el = (0.0, ())
    n = 0
    n_adjusted = 0
    for name in sorted(params):
        p = params[name]
        num = np.zeros_like(p)
        base = loss_only(name)  # at the unperturbed parameters
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            step = h
            while True:
                num[idx], clean = _difference(p, idx, orig, step, loss_only, name, base)
                if clean or step / 10 < min_h:
                    break
                step /= 10
            if clean != "central" or step != h:
                n_adjusted += 1
            ana = grads[name][idx]
            el = abs(ana - num[idx]) / max(abs(ana), abs(num[idx]), floor)
            if el > worst_el[0]:
                worst_el = (el, (name, idx))
            n += 1
        ana = grads[name]
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), floor)
        per[name] = float(np.linalg.norm(ana - num) / scale)
    worst = max(per, key=per.get) if per else ""
    return GradCheckReport(per.get(worst, 0.0), worst, tolerance, n, n_adjusted,
                           float(worst_el[0]), worst_el[1], per)


def _difference(p, idx, orig, step, loss_only, name, base):
    """Difference quotient for one entry.

    Returns the estimate and the stencil used: ``"central"``, ``"forward"``,
    ``"backward"`` or ``""`` when every stencil at this step crosses a kink.
    """

    def at(offset):
        p[idx] = orig + offset
        try:
            return loss_only(name)
        finally:
            p[idx] = orig

    up, down = at(step), at(-step)
    if not isinstance(up, tuple):
        return (up - down) / (2 * step), "central"
    up_ok = np.array_equal(up[1], base[1])
    down_ok = np.array_equal(down[1], base[1])
    central = (up[0] - down[0]) / (2 * step)
    if up_ok and down_ok:
        return central, "central"
    for ok, sign, near, label in ((up_ok, 1.0, up[0], "forward"), (down_ok, -1.0, down[0], "backward")):
        if ok:
            far = at(2 * sign * step)
            if np.array_equal(far[1], base[1]):
                return sign * (-3 * base[0] + 4 * near - far[0]) / (2 * step), label
    return central, ""


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GcnModel, path, extra: dict | None = None) -> None:
    """Write configuration, parameters, running statistics and Adam state.

    Layout: magic, ``<I`` version, ``<Q`` header length, a JSON header
    (sorted keys) listing every array with its shape, then the arrays as
    little-endian float64 in header order. The output is byte-stable.
    """
    arrays = model.state_arrays()
    names = sorted(arrays)
    header = {
        "config": asdict(model.config),
        "adam_step_count": model.adam_step_count,
        "arrays": [[k, list(arrays[k].shape)] for k in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for k in names:
        buf.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[GcnModel, dict]:
    """Rebuild a model from :func:`save_checkpoint` output; returns ``(model, extra)``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise MeshFormatError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, size = struct.unpack_from("<IQ", data, off)
    if version != CHECKPOINT_VERSION:
        raise MeshFormatError(f"{path}: unsupported checkpoint version {version}")
    off += 12
    header = json.loads(data[off:off + size].decode("utf-8"))
    off += size
    model = GcnModel(ModelConfig(**header["config"]))
    model.adam_step_count = header["adam_step_count"]
    stores = {"param": model.params, "adam_m": model.adam_m, "adam_v": model.adam_v,
              "buffer": model.buffers}
    for key, shape in header["arrays"]:
        kind, name = key.split("/", 1)
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise MeshFormatError(f"{path}: truncated at array {key!r}")
        arr = np.frombuffer(data, "<f8", count, off).reshape(shape)
        off += 8 * count
        target = stores[kind]
        if name not in target or target[name].shape != tuple(shape):
            raise MeshFormatError(f"{path}: array {key!r} does not fit the model")
        target[name][...] = arr
    return model, header["extra"]
