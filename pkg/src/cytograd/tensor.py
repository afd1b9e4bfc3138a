"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every operation appends a node to an append-only :class:`Graph` (the tape),
so nodes are topologically ordered by construction.  :func:`backward` walks
the tape once in reverse and returns one gradient per requested node, which
makes gradients with respect to *inputs* (not just parameters) as cheap as
any other leaf -- the attribution code relies on that.

Conventions:
  * everything is float64; values are validated to be finite after every
    forward op and every backward accumulation (NaN/Inf raises
    :class:`NumericError` instead of propagating silently),
  * conv2d uses the cross-correlation convention (no kernel flip),
  * no implicit broadcasting: elementwise ops require identical shapes,
    scalars go through ``scale``/``shift``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class NumericError(ArithmeticError):
    """Raised when a forward or backward value is NaN or Inf."""


def _as_f64(values) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to 1-d; asarray keeps them
    return np.asarray(values, dtype=np.float64, order="C")


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by op '{op}'")
    return arr


class Tensor:
    """A dense n-dimensional float64 array, optionally bound to a Graph node."""

    __slots__ = ("values", "graph", "node_id")

    def __init__(self, values, graph: "Graph | None" = None, node_id: int | None = None):
        self.values = _as_f64(values)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    # Arithmetic sugar over the op functions below.  Tensor-tensor forms
    # require identical shapes; python numbers go through scale/shift.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a registered op")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


class _Node:
    """One tape entry: the op kind, input node ids, and the saved-activation
    closure that maps the output gradient to per-input gradients."""

    __slots__ = ("op", "inputs", "backward_fn", "shape")

    def __init__(self, op: str, inputs: tuple[int, ...],
                 backward_fn: Callable[[np.ndarray], tuple] | None,
                 shape: tuple[int, ...]):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.shape = shape


class Graph:
    """Append-only computation tape; rebuilt per forward pass.

    Nodes are appended in execution order, so the list itself is a valid
    topological order and one reverse sweep implements the chain rule.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, values) -> Tensor:
        """Register an input/parameter/constant tensor on this graph."""
        arr = _check_finite(_as_f64(values), "leaf")
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor(arr, self, nid)

    def _record(self, op: str, inputs: Sequence[Tensor], out_values: np.ndarray,
                backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"op '{op}': input tensor belongs to a different graph")
        _check_finite(out_values, op)
        nid = len(self.nodes)
        self.nodes.append(_Node(op, tuple(t.node_id for t in inputs), backward_fn,
                                out_values.shape))
        return Tensor(out_values, self, nid)


def _graph_of(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    if g is None:
        raise ValueError("tensor is not attached to a graph; create it with Graph.leaf")
    return g


def backward(output: Tensor, wanted: Iterable[int | Tensor]) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar output.

    Returns a gradient tensor (same shape as its node) for every id in
    ``wanted``.  Raises if the output is not scalar or a wanted node is not
    an ancestor of the output.
    """
    if output.values.ndim != 0:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    graph = _graph_of(output)
    nodes = graph.nodes
    out_id = output.node_id

    wanted_ids = [w.node_id if isinstance(w, Tensor) else int(w) for w in wanted]

    # Ancestors of the output, by reverse traversal of the tape.
    ancestors = {out_id}
    for nid in range(out_id, -1, -1):
        if nid in ancestors:
            for src in nodes[nid].inputs:
                ancestors.add(src)
    for wid in wanted_ids:
        if wid not in ancestors:
            raise ValueError(
                f"node {wid} ({nodes[wid].op}) is not an ancestor of the output node {out_id}")

    # Only propagate along paths that can reach a wanted node.
    needed = [False] * len(nodes)
    for wid in wanted_ids:
        needed[wid] = True
    for nid in range(len(nodes)):
        if not needed[nid]:
            needed[nid] = any(needed[src] for src in nodes[nid].inputs)

    grads: dict[int, np.ndarray] = {out_id: np.ones((), dtype=np.float64)}
    for nid in range(out_id, -1, -1):
        if nid not in grads or nid not in ancestors:
            continue
        node = nodes[nid]
        if node.backward_fn is None:
            continue
        input_grads = node.backward_fn(grads[nid])
        for src, g in zip(node.inputs, input_grads):
            if g is None or not needed[src]:
                continue
            _check_finite(g, f"backward:{node.op}")
            if src in grads:
                grads[src] = grads[src] + g
            else:
                grads[src] = g

    result: dict[int, Tensor] = {}
    for wid in wanted_ids:
        g = grads.get(wid)
        if g is None:
            g = np.zeros(nodes[wid].shape, dtype=np.float64)
        result[wid] = Tensor(np.ascontiguousarray(g, dtype=np.float64))
    return result


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _require_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    g = _graph_of(a, b)
    return g._record("add", (a, b), a.values + b.values, lambda go: (go, go))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    g = _graph_of(a, b)
    return g._record("sub", (a, b), a.values - b.values, lambda go: (go, -go))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    g = _graph_of(a, b)
    av, bv = a.values, b.values
    return g._record("mul", (a, b), av * bv, lambda go: (go * bv, go * av))


def neg(a: Tensor) -> Tensor:
    g = _graph_of(a)
    return g._record("neg", (a,), -a.values, lambda go: (-go,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (constants take no gradient)."""
    g = _graph_of(a)
    c = float(c)
    return g._record("scale", (a,), a.values * c, lambda go: (go * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python constant."""
    g = _graph_of(a)
    return g._record("shift", (a,), a.values + float(c), lambda go: (go,))


def log(a: Tensor) -> Tensor:
    g = _graph_of(a)
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return g._record("log", (a,), out, lambda go: (go / av,))


def exp(a: Tensor) -> Tensor:
    g = _graph_of(a)
    out = np.exp(a.values)
    return g._record("exp", (a,), out, lambda go: (go * out,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    g = _graph_of(a)
    mask = a.values > floor
    out = np.maximum(a.values, floor)
    return g._record("clamp_min", (a,), out, lambda go: (go * mask,))


def relu(a: Tensor) -> Tensor:
    g = _graph_of(a)
    mask = a.values > 0.0
    return g._record("relu", (a,), a.values * mask, lambda go: (go * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    g = _graph_of(a)
    shape = a.shape
    return g._record("sum_all", (a,), np.sum(a.values),
                     lambda go: (np.broadcast_to(go, shape),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def row_sum(a: Tensor) -> Tensor:
    """Sum a 2-D tensor over its last axis: [N, K] -> [N]."""
    if a.ndim != 2:
        raise ShapeError(f"row_sum expects a 2-D tensor, got shape {a.shape}")
    g = _graph_of(a)
    k = a.shape[1]
    return g._record("row_sum", (a,), a.values.sum(axis=1),
                     lambda go: (np.repeat(go[:, None], k, axis=1),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    g = _graph_of(a)
    in_shape = a.shape
    out = a.values.reshape(shape)
    return g._record("reshape", (a,), np.ascontiguousarray(out),
                     lambda go: (go.reshape(in_shape),))


def flatten(a: Tensor) -> Tensor:
    """[N, ...] -> [N, D]."""
    if a.ndim < 2:
        raise ShapeError(f"flatten expects at least 2 dims, got shape {a.shape}")
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:]))))


def spatial_mean(a: Tensor) -> Tensor:
    """Global average pool: [N, C, H, W] -> [N, C]."""
    if a.ndim != 4:
        raise ShapeError(f"spatial_mean expects a 4-D tensor, got shape {a.shape}")
    g = _graph_of(a)
    n, c, h, w = a.shape
    inv = 1.0 / (h * w)

    def bwd(go):
        return (np.broadcast_to(go[:, :, None, None] * inv, (n, c, h, w)),)

    return g._record("spatial_mean", (a,), a.values.mean(axis=(2, 3)), bwd)


def mean_pool(a: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping mean pooling over size x size windows.

    Spatial dims must be divisible by ``size``.
    """
    if a.ndim != 4:
        raise ShapeError(f"mean_pool expects a 4-D tensor, got shape {a.shape}")
    n, c, h, w = a.shape
    if h % size or w % size:
        raise ShapeError(f"mean_pool: spatial dims {(h, w)} not divisible by {size}")
    g = _graph_of(a)
    ho, wo = h // size, w // size
    out = a.values.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))
    inv = 1.0 / (size * size)

    def bwd(go):
        gi = np.repeat(np.repeat(go, size, axis=2), size, axis=3) * inv
        return (gi,)

    return g._record("mean_pool", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear-algebra ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    g = _graph_of(a, b)
    av, bv = a.values, b.values
    return g._record("matmul", (a, b), av @ bv,
                     lambda go: (go @ bv.T, av.T @ go))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W + b for x: [N, D], W: [D, M], b: [M]."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} and weights {weights.shape} do not chain")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    g = _graph_of(x, weights, bias)
    xv, wv = x.values, weights.values
    out = xv @ wv + bias.values

    def bwd(go):
        return (go @ wv.T, xv.T @ go, go.sum(axis=0))

    return g._record("dense", (x, weights, bias), out, bwd)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x: [N, C, H, W] with kernel: [K, C, h, w].

    Output spatial size is floor((H + 2*padding - h) / stride) + 1.  Forward
    and backward go through an im2col buffer so the heavy lifting is a
    single matmul each way.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride {stride} must be >= 1 and padding {padding} >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kernel.shape} larger than padded input {(n, c, hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    g = _graph_of(x, kernel)
    xp = x.values
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: [N, C, ho, wo, kh, kw] view, then im2col copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.values.reshape(k, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(go):
        gmat = go.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gkernel = (gmat.T @ cols).reshape(k, c, kh, kw)
        # one contiguous copy into tap-major layout so the scatter slices below
        # are dense reads: [n, c, kh, kw, ho, wo]
        gcols = np.ascontiguousarray(
            (gmat @ kmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
        # col2im: scatter-add each kernel tap back onto the padded input
        gx = np.zeros((n, c, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        if padding:
            gx = gx[:, :, padding:hp - padding, padding:wp - padding]
        return (np.ascontiguousarray(gx), gkernel)

    return g._record("conv2d", (x, kernel), out, bwd)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of [N, K] logits, max-subtracted for stability."""
    if a.ndim != 2:
        raise ShapeError(f"softmax expects a 2-D tensor, got shape {a.shape}")
    g = _graph_of(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(go):
        return (p * (go - (go * p).sum(axis=1, keepdims=True)),)

    return g._record("softmax", (a,), p, bwd)


def logsumexp(a: Tensor) -> Tensor:
    """Row-wise log(sum(exp)) of [N, K] logits: returns [N]."""
    if a.ndim != 2:
        raise ShapeError(f"logsumexp expects a 2-D tensor, got shape {a.shape}")
    g = _graph_of(a)
    m = a.values.max(axis=1, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    p = e / s

    def bwd(go):
        return (go[:, None] * p,)

    return g._record("logsumexp", (a,), out, bwd)
