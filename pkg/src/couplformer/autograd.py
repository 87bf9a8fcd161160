"""Reverse-mode automatic differentiation over tensor operations.

A :class:`Var` wraps a :class:`~couplformer.tensor.Tensor` value together with
a gradient slot and, for non-leaf nodes, the recorded parents and a
vector-Jacobian callback.  The recorded graph is a DAG; :func:`backward`
visits each node exactly once in reverse topological order and accumulates
gradients additively into every parent that requires them.

Forward values are computed by the kernels in :mod:`couplformer.tensor`
wherever one exists, so shape validation lives in a single place; ops with no
plain-tensor counterpart (convolution, pooling, layer norm, cross entropy)
carry their own checks.  :func:`fd_check` is the central-difference oracle
used by the verification suites.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import tensor as T
from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = [
    "Var",
    "GraphError",
    "backward",
    "fd_check",
    "no_grad",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose2d",
    "permute",
    "reshape",
    "row_vec",
    "slice_axis",
    "concat",
    "softmax_rows",
    "relu",
    "gelu",
    "add_bias_rows",
    "layernorm",
    "conv2d",
    "maxpool2d",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "kron",
]


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar backward, repeated backward)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block; ops return detached leaves."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Var:
    """Autograd-tracked tensor node."""

    __slots__ = ("value", "requires_grad", "_grad", "_parents", "_vjp", "_done")

    def __init__(self, value, requires_grad: bool = False) -> None:
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Var, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Tensor | None:
        return None if self._grad is None else Tensor._wrap(self._grad)

    def clear_grad(self) -> None:
        self._grad = None
        self._done = False

    def detach(self) -> "Var":
        return Var(self.value, requires_grad=False)

    def item(self) -> float:
        return self.value.item()

    def assign(self, value: Tensor) -> None:
        """Replace the value of a leaf in place (optimizer updates)."""
        if self._parents:
            raise GraphError("assign() is only valid on leaf variables")
        if value.shape != self.value.shape:
            raise ShapeError(f"assign: shape {value.shape} != {self.value.shape}")
        self.value = value

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Var:
    return Var(values, requires_grad=False)


def parameter(values) -> Var:
    return Var(values, requires_grad=True)


def _node(value: Tensor, parents: tuple[Var, ...], vjp) -> Var:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Var(value, requires_grad=True)
        out._parents = parents
        out._vjp = vjp
        return out
    return Var(value, requires_grad=False)


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(node) into every reachable node that requires it."""
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss._done:
        raise GraphError("backward already ran for this node; rebuild the graph first")
    if not loss.requires_grad:
        loss._done = True
        return

    # Iterative post-order DFS; graphs can be deep for large batches.
    topo: list[Var] = []
    state: dict[int, int] = {}
    stack: list[Var] = [loss]
    while stack:
        node = stack[-1]
        key = id(node)
        if state.get(key, 0) == 0:
            state[key] = 1
            for parent in node._parents:
                if state.get(id(parent), 0) == 0 and parent.requires_grad:
                    stack.append(parent)
        else:
            stack.pop()
            if state[key] == 1:
                state[key] = 2
                topo.append(node)

    loss._grad = np.ones_like(loss.value.data)
    for node in reversed(topo):
        if node._vjp is None or node._grad is None:
            continue
        for parent, contrib in zip(node._parents, node._vjp(node._grad)):
            if contrib is None or not parent.requires_grad:
                continue
            if parent._grad is None:
                parent._grad = np.array(contrib, dtype=np.float64)
            else:
                parent._grad = parent._grad + contrib
    loss._done = True


# --------------------------------------------------------------------------
# Differentiable wrappers.
# --------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    out = T.add(a.value, b.value)
    return _node(out, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    out = T.add(a.value, T.scale(b.value, -1.0))
    return _node(out, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    x, y = a.value.data, b.value.data
    if x.shape != y.shape:
        raise ShapeError(f"mul: shapes disagree, {x.shape} vs {y.shape}")
    return _node(Tensor._wrap(x * y), (a, b), lambda g: (g * y, g * x))


def scale(x: Var, c: float) -> Var:
    c = float(c)
    return _node(T.scale(x.value, c), (x,), lambda g: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    out = T.matmul(a.value, b.value)
    x, y = a.value.data, b.value.data

    def vjp(g: np.ndarray):
        return (
            np.matmul(g, y.swapaxes(-1, -2)),
            np.matmul(x.swapaxes(-1, -2), g),
        )

    return _node(out, (a, b), vjp)


def transpose2d(x: Var) -> Var:
    return _node(T.transpose2d(x.value), (x,), lambda g: (g.T,))


def permute(x: Var, axes: Sequence[int]) -> Var:
    axes = tuple(int(a) for a in axes)
    arr = x.value.data
    if sorted(axes) != list(range(arr.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {arr.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _node(
        Tensor._wrap(arr.transpose(axes)), (x,), lambda g: (g.transpose(inverse),)
    )


def reshape(x: Var, shape: Sequence[int]) -> Var:
    original = x.value.shape
    return _node(T.reshape(x.value, shape), (x,), lambda g: (g.reshape(original),))


def row_vec(x: Var) -> Var:
    original = x.value.shape
    return _node(T.row_vec(x.value), (x,), lambda g: (g.reshape(original),))


def slice_axis(x: Var, axis: int, start: int, stop: int) -> Var:
    out = T.slice_axis(x.value, axis, start, stop)
    full_shape = x.value.shape

    def vjp(g: np.ndarray):
        pad = np.zeros(full_shape)
        index = [slice(None)] * len(full_shape)
        index[axis] = slice(start, stop)
        pad[tuple(index)] = g
        return (pad,)

    return _node(out, (x,), vjp)


def concat(parts: Sequence[Var], axis: int) -> Var:
    if not parts:
        raise ShapeError("concat: no operands")
    arrays = [p.value.data for p in parts]
    ndim = arrays[0].ndim
    for arr in arrays:
        if arr.ndim != ndim:
            raise ShapeError("concat: rank mismatch between operands")
    sizes = [arr.shape[axis] for arr in arrays]
    out = Tensor._wrap(np.concatenate(arrays, axis=axis))
    offsets = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray):
        grads = []
        index = [slice(None)] * ndim
        for i in range(len(arrays)):
            index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _node(out, tuple(parts), vjp)


def softmax_rows(x: Var) -> Var:
    out = T.softmax_rows(x.value)
    s = out.data

    def vjp(g: np.ndarray):
        # Jacobian-vector form per row: s * (g - <g, s>), O(n) per row.
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _node(out, (x,), vjp)


def relu(x: Var) -> Var:
    arr = x.value.data
    mask = arr > 0
    return _node(Tensor._wrap(np.where(mask, arr, 0.0)), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Var) -> Var:
    arr = x.value.data
    cdf = 0.5 * (1.0 + erf(arr * _INV_SQRT2))
    out = arr * cdf

    def vjp(g: np.ndarray):
        pdf = np.exp(-0.5 * arr * arr) * _INV_SQRT_2PI
        return (g * (cdf + arr * pdf),)

    return _node(Tensor._wrap(out), (x,), vjp)


def layernorm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    arr = x.value.data
    gval, bval = gamma.value.data, beta.value.data
    d = arr.shape[-1]
    if gval.shape != (d,) or bval.shape != (d,):
        raise ShapeError(
            f"layernorm: scale/offset must have shape ({d},), got {gval.shape}/{bval.shape}"
        )
    mean = arr.mean(axis=-1, keepdims=True)
    centered = arr - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gval * xhat + bval

    def vjp(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g
        dxhat = g * gval
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return _node(Tensor._wrap(out), (x, gamma, beta), vjp)


def _im2col(padded: np.ndarray, kernel: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    c = padded.shape[0]
    cols = np.empty((c, kernel, kernel, h_out, w_out))
    for dy in range(kernel):
        for dx in range(kernel):
            cols[:, dy, dx] = padded[:, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride]
    return cols


def conv2d(x: Var, weight: Var, bias: Var | None = None, stride: int = 1, padding: int | None = None) -> Var:
    """2-D convolution on one sample: x is (C, H, W), weight is (O, C, k, k)."""
    arr = x.value.data
    w = weight.value.data
    if arr.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) and (O,C,k,k), got {arr.shape} and {w.shape}")
    out_ch, in_ch, kernel, kernel2 = w.shape
    if kernel != kernel2:
        raise ShapeError(f"conv2d: non-square kernel {w.shape}")
    if in_ch != arr.shape[0]:
        raise ShapeError(f"conv2d: channel mismatch, input {arr.shape[0]} vs kernel {in_ch}")
    if padding is None:
        padding = kernel // 2
    stride = int(stride)
    c, h, wth = arr.shape
    h_out = (h + 2 * padding - kernel) // stride + 1
    w_out = (wth + 2 * padding - kernel) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d: output collapses to {h_out}x{w_out} for input {arr.shape}")

    padded = np.pad(arr, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(padded, kernel, stride, h_out, w_out)
    flat_cols = cols.reshape(c * kernel * kernel, h_out * w_out)
    flat_w = w.reshape(out_ch, c * kernel * kernel)
    out = (flat_w @ flat_cols).reshape(out_ch, h_out, w_out)

    bval = None
    if bias is not None:
        bval = bias.value.data
        if bval.shape != (out_ch,):
            raise ShapeError(f"conv2d: bias shape {bval.shape} != ({out_ch},)")
        out = out + bval[:, None, None]

    def vjp(g: np.ndarray):
        gflat = g.reshape(out_ch, h_out * w_out)
        grad_w = (gflat @ flat_cols.T).reshape(w.shape)
        grad_cols = (flat_w.T @ gflat).reshape(c, kernel, kernel, h_out, w_out)
        grad_padded = np.zeros_like(padded)
        for dy in range(kernel):
            for dx in range(kernel):
                grad_padded[:, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride] += grad_cols[:, dy, dx]
        grad_x = grad_padded[:, padding : padding + h, padding : padding + wth]
        if bias is None:
            return (grad_x, grad_w)
        return (grad_x, grad_w, g.sum(axis=(1, 2)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(Tensor._wrap(out), parents, vjp)


def maxpool2d(x: Var, kernel: int = 3, stride: int = 2, padding: int = 1) -> Var:
    """Max pooling on one sample (C, H, W); padded cells hold -inf."""
    arr = x.value.data
    if arr.ndim != 3:
        raise ShapeError(f"maxpool2d: expected (C,H,W), got {arr.shape}")
    c, h, w = arr.shape
    h_out = (h + 2 * padding - kernel) // stride + 1
    w_out = (w + 2 * padding - kernel) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"maxpool2d: output collapses to {h_out}x{w_out} for input {arr.shape}")
    padded = np.full((c, h + 2 * padding, w + 2 * padding), -np.inf)
    padded[:, padding : padding + h, padding : padding + w] = arr
    windows = np.stack(
        [
            padded[:, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride]
            for dy in range(kernel)
            for dx in range(kernel)
        ]
    )
    choice = windows.argmax(axis=0)  # first max wins: deterministic tie-break
    out = np.take_along_axis(windows, choice[None], axis=0)[0]

    def vjp(g: np.ndarray):
        grad_padded = np.zeros_like(padded)
        for j in range(kernel * kernel):
            dy, dx = divmod(j, kernel)
            view = grad_padded[:, dy : dy + stride * h_out : stride, dx : dx + stride * w_out : stride]
            view += g * (choice == j)
        return (grad_padded[:, padding : padding + h, padding : padding + w],)

    return _node(Tensor._wrap(out), (x,), vjp)


def add_bias_rows(x: Var, bias: Var) -> Var:
    """Add a 1-D bias vector to every row of a 2-D operand."""
    arr, b = x.value.data, bias.value.data
    if arr.ndim != 2 or b.shape != (arr.shape[1],):
        raise ShapeError(f"add_bias_rows: shapes disagree, {arr.shape} and {b.shape}")
    return _node(Tensor._wrap(arr + b), (x, bias), lambda g: (g, g.sum(axis=0)))


def sum_all(x: Var) -> Var:
    arr = x.value.data
    shape = arr.shape
    return _node(
        Tensor._wrap(np.asarray(arr.sum())), (x,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_all(x: Var) -> Var:
    return scale(sum_all(x), 1.0 / x.value.size)


def cross_entropy(logits: Var, target: int) -> Var:
    """Negative log likelihood of class ``target`` under softmax of 1-D logits."""
    z = logits.value.data
    if z.ndim != 1:
        raise ShapeError(f"cross_entropy: expected 1-D logits, got {z.shape}")
    target = int(target)
    if not 0 <= target < z.shape[0]:
        raise ValueError(f"cross_entropy: target {target} out of range for {z.shape[0]} classes")
    m = z.max()
    shifted = z - m
    lse = m + math.log(np.exp(shifted).sum())
    loss = lse - z[target]

    def vjp(g: np.ndarray):
        p = np.exp(z - lse)
        p[target] -= 1.0
        return (float(g) * p,)

    return _node(Tensor._wrap(np.asarray(loss)), (logits,), vjp)


def kron(a: Var, b: Var) -> Var:
    out = T.kron(a.value, b.value)
    x, y = a.value.data, b.value.data
    m, n = x.shape
    p, q = y.shape

    def vjp(g: np.ndarray):
        blocks = g.reshape(m, p, n, q)
        return (
            np.einsum("arbs,rs->ab", blocks, y),
            np.einsum("arbs,ab->rs", blocks, x),
        )

    return _node(out, (a, b), vjp)


# --------------------------------------------------------------------------
# Finite-difference oracle.
# --------------------------------------------------------------------------


def fd_check(f: Callable[[Var], Var], x, eps: float = 1e-5) -> float:
    """Max relative error between the recorded gradient and central differences.

    ``f`` must be a pure scalar-valued function of its argument, given as a
    ``Var``, ``Tensor``, or array; the error at each coordinate is
    |analytic - central| / (|central| + 1e-12), and the maximum over
    coordinates is returned.
    """
    if isinstance(x, Var):
        x = x.value
    elif not isinstance(x, Tensor):
        x = Tensor(x)
    probe = Var(x, requires_grad=True)
    out = f(probe)
    if out.value.size != 1:
        raise GraphError(f"fd_check: f must return a scalar, got shape {out.value.shape}")
    if not math.isfinite(out.item()):
        raise NonFiniteError("fd_check: f(x) is not finite")
    backward(out)
    analytic = (
        np.zeros_like(x.data) if probe._grad is None else probe._grad.reshape(x.shape)
    )

    base = np.array(x.data)
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = f(Var(Tensor._wrap(base.copy()))).item()
            flat[i] = saved - eps
            lo = f(Var(Tensor._wrap(base.copy()))).item()
            flat[i] = saved
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))
