"""Dense real tensors with a define-by-run reverse-mode tape.

Layout is row-major with channels last: features are (h, w, c) and batches
(b, h, w, c).  Storage is float64; broadcasting follows numpy's trailing-
dimension rule and nothing fancier.

A training step builds a fresh :class:`Graph` (the tape), runs the forward
pass inside it, and calls :func:`backward` on the scalar loss.  Outside an
active graph every operation is a plain numpy computation, which is how the
evaluation / coding paths run.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special as _sp

from .errors import NumericsError, ShapeError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Finite-value checking at tensor creation. On by default; training loops may
# switch it off for speed via set_checked(False).
_CHECKED = True


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf rejection at tensor creation; returns the old setting."""
    global _CHECKED
    old = _CHECKED
    _CHECKED = bool(flag)
    return old


class Tensor:
    """Immutable dense array, optionally tracked by the active graph."""

    __slots__ = ("data", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite value at tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)


class Node:
    """One tape entry: operation id, parent links, and a saved vjp closure."""

    __slots__ = ("op", "parents", "vjp", "tensor", "index")

    def __init__(self, op, parents, vjp, tensor, index):
        self.op = op
        self.parents = parents  # tuple[Node | None, ...]
        self.vjp = vjp  # Callable[[ndarray], tuple[ndarray | None, ...]] | None
        self.tensor = tensor  # set for leaves only, to key the gradient map
        self.index = index


class Graph:
    """Append-only tape; node order is the topological order of the forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.pop()

    def add(self, op, parents, vjp, tensor=None) -> Node:
        node = Node(op, parents, vjp, tensor, len(self.nodes))
        self.nodes.append(node)
        return node

    def op_names(self) -> list[str]:
        return [n.op for n in self.nodes]

    def node_for(self, t: Tensor) -> Node:
        """Node of `t` in this graph, creating a leaf entry when needed.

        Stale nodes left over from an earlier graph are ignored.
        """
        node = t._node
        if node is not None and node.index < len(self.nodes) and self.nodes[node.index] is node:
            return node
        node = self.add("leaf", (), None, tensor=t)
        t._node = node
        return node


_graph_stack: list[Graph] = []


def active_graph() -> Optional[Graph]:
    return _graph_stack[-1] if _graph_stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             vjp: Callable) -> Tensor:
    """Record `out_data` as the result of a (possibly custom) operation.

    `vjp(grad_out)` must return one gradient array (or None) per input,
    each shaped like the corresponding input.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    graph = active_graph()
    if graph is not None and requires:
        parents = tuple(graph.node_for(t) for t in inputs)
        out._node = graph.add(op, parents, vjp)
    return out


def backward(graph: Graph, loss: Tensor) -> dict:
    """Reverse sweep over the tape; returns {leaf Tensor: gradient ndarray}.

    The loss must be scalar.  Each node in the loss's ancestry is visited
    exactly once, in reverse creation order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        return {}

    # restrict the sweep to ancestors of the loss
    needed = set()
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if id(node) in needed:
            continue
        needed.add(id(node))
        for p in node.parents:
            if p is not None:
                stack.append(p)

    buffers: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    grad_map: dict[Tensor, np.ndarray] = {}

    for node in reversed(graph.nodes):
        if id(node) not in needed:
            continue
        grad = buffers.pop(id(node), None)
        if grad is None:
            continue
        if node.op == "leaf":
            t = node.tensor
            if t is not None and t.requires_grad:
                grad_map[t] = grad_map[t] + grad if t in grad_map else grad
            continue
        for parent, pgrad in zip(node.parents, node.vjp(grad)):
            if parent is None or pgrad is None:
                continue
            pid = id(parent)
            if pid in buffers:
                buffers[pid] = buffers[pid] + pgrad
            else:
                buffers[pid] = pgrad
    return grad_map


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "add")
    return apply_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")
    return apply_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")
    return apply_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.data, b.data, "div")
    return apply_op(
        "div", (a, b), a.data / b.data,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return apply_op("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes through where a > lo."""
    a = _as_tensor(a)
    lo = float(lo)
    return apply_op(
        "clamp_min", (a,), np.maximum(a.data, lo),
        lambda g: (g * (a.data > lo),),
    )


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return apply_op("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def powc(a, c: float) -> Tensor:
    """a ** c for a constant exponent; a must be positive when c < 1."""
    a = _as_tensor(a)
    c = float(c)
    out = np.power(a.data, c)
    return apply_op("powc", (a,), out, lambda g: (g * c * np.power(a.data, c - 1.0),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sp.expit(a.data)
    return apply_op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return apply_op("softplus", (a,), out, lambda g: (g * _sp.expit(a.data),))


def gauss_cdf(a) -> Tensor:
    """Standard normal CDF, accurate in the tails (double precision)."""
    a = _as_tensor(a)
    out = _sp.ndtr(a.data)
    return apply_op(
        "gauss_cdf", (a,), out,
        lambda g: (g * _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data),),
    )


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = np.where(a.data >= 0.0, a.data, alpha * a.data)
    return apply_op(
        "leaky_relu", (a,), out,
        lambda g: (g * np.where(a.data >= 0.0, 1.0, alpha),),
    )


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero: 0.5 -> 1, -0.5 -> -1."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def ste_round(a) -> Tensor:
    """Round half away from zero; straight-through (identity) gradient."""
    a = _as_tensor(a)
    return apply_op("ste_round", (a,), round_half_away(a.data), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op(
        "sum", (a,), np.asarray(a.data.sum()),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    return apply_op(
        "mean", (a,), np.asarray(a.data.mean()),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = (shape,) if isinstance(shape, int) else tuple(int(s) for s in shape)
    return apply_op(
        "reshape", (a,), a.data.reshape(shape),
        lambda g: (g.reshape(a.shape),),
    )


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    return apply_op("transpose2d", (a,), a.data.T.copy(), lambda g: (g.T,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return apply_op(
        "matmul", (a, b), a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def slice_channels(a, start: int, stop: int) -> Tensor:
    """Take channels [start:stop) along the last axis."""
    a = _as_tensor(a)

    def vjp(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return apply_op("slice_channels", (a,), a.data[..., start:stop].copy(), vjp)


# ---------------------------------------------------------------------------
# convolution family (channels-last)
# ---------------------------------------------------------------------------

def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv_args(k: int, stride: int, pad: int) -> None:
    if k % 2 != 1:
        raise ShapeError(f"conv kernel extent must be odd, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"conv stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv padding must be >= 0, got {pad}")


def _im2col(x4: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(b,h,w,c) -> (b, ho, wo, k*k*c) patch matrix."""
    b, h, w, c = x4.shape
    ho = _conv_out_extent(h, k, stride, pad)
    wo = _conv_out_extent(w, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    xp = np.pad(x4, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (b, hv, wv, c, k, k)
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, k * k * c)


def _col2im(gcols: np.ndarray, h: int, w: int, c: int, k: int, stride: int,
            pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back to (b,h,w,c)."""
    b, ho, wo, _ = gcols.shape
    g6 = gcols.reshape(b, ho, wo, k, k, c)
    gx = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for ki in range(k):
        for kj in range(k):
            gx[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += g6[:, :, :, ki, kj, :]
    return gx[:, pad:pad + h, pad:pad + w, :]


def _promote4d(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected (h,w,c) or (b,h,w,c), got shape {x.shape}")


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution; kernel is (k, k, c_in, c_out)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    x4, squeezed = _promote4d(x)
    k, k2, cin, cout = kernel.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {kernel.shape}")
    _check_conv_args(k, stride, pad)
    if x4.shape[3] != cin:
        raise ShapeError(
            f"conv2d: input channels {x4.shape[3]} != kernel c_in {cin}"
        )
    b, h, w, _ = x4.shape
    cols = _im2col(x4, k, stride, pad)  # (b, ho, wo, kkc)
    ho, wo = cols.shape[1], cols.shape[2]
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = cols.reshape(-1, k * k * cin) @ wmat
    out = out.reshape(b, ho, wo, cout)

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        gmat = g4.reshape(-1, cout)
        gw = cols.reshape(-1, k * k * cin).T @ gmat
        gcols = (gmat @ wmat.T).reshape(b, ho, wo, k * k * cin)
        gx = _col2im(gcols, h, w, cin, k, stride, pad)
        return (gx[0] if squeezed else gx, gw.reshape(kernel.shape))

    return apply_op("conv2d", (x, kernel), out[0] if squeezed else out, vjp)


def conv2d_transpose(x, kernel, stride: int = 1, pad: int = 0,
                     out_pad=0) -> Tensor:
    """Transposed 2-D convolution (adjoint of conv2d over the input).

    kernel is (k, k, c_out, c_in); output spatial extent per axis is
    (n - 1) * stride - 2 * pad + k + out_pad.  `out_pad` may be one int or
    an (out_pad_h, out_pad_w) pair.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    x4, squeezed = _promote4d(x)
    k, k2, cout, cin = kernel.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {kernel.shape}")
    _check_conv_args(k, stride, pad)
    oph, opw = (out_pad, out_pad) if isinstance(out_pad, int) else (int(out_pad[0]), int(out_pad[1]))
    for op in (oph, opw):
        if op < 0 or op >= stride:
            raise ShapeError(f"out_pad must be in [0, stride), got {op}")
    if x4.shape[3] != cin:
        raise ShapeError(
            f"conv2d_transpose: input channels {x4.shape[3]} != kernel c_in {cin}"
        )
    b, h, w, _ = x4.shape
    H = (h - 1) * stride - 2 * pad + k + oph
    W = (w - 1) * stride - 2 * pad + k + opw
    if H <= 0 or W <= 0:
        raise ShapeError(f"conv2d_transpose output would be empty: {H}x{W}")
    # sanity: the virtual forward conv (H,W) -> (h,w) must be consistent
    if _conv_out_extent(H, k, stride, pad) != h or _conv_out_extent(W, k, stride, pad) != w:
        raise ShapeError(
            f"conv2d_transpose geometry mismatch for input {h}x{w} with "
            f"k={k} stride={stride} pad={pad} out_pad=({oph},{opw})"
        )
    wmat = kernel.data.reshape(k * k * cout, cin)
    gcols = (x4.reshape(-1, cin) @ wmat.T).reshape(b, h, w, k * k * cout)
    out = _col2im(gcols, H, W, cout, k, stride, pad)

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        cols = _im2col(g4, k, stride, pad)  # (b, h, w, k*k*cout)
        gx = cols.reshape(-1, k * k * cout) @ wmat
        gx = gx.reshape(b, h, w, cin)
        gw = cols.reshape(-1, k * k * cout).T @ x4.reshape(-1, cin)
        return (gx[0] if squeezed else gx, gw.reshape(kernel.shape))

    return apply_op("conv2d_transpose", (x, kernel), out[0] if squeezed else out, vjp)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    x = _as_tensor(x)
    x4, squeezed = _promote4d(x)
    b, h, w, c = x4.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x4.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = np.repeat(np.repeat(g4, 2, axis=1), 2, axis=2) * 0.25
        return (gx[0] if squeezed else gx,)

    return apply_op("avg_pool2", (x,), out[0] if squeezed else out, vjp)
