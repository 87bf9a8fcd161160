"""Coupling attention: Kronecker-factored attention maps over a token grid.

Tokens come from raster-scanning an h-by-w feature map (index ``i = x + y*w``).
Where standard attention scores every token pair against every other through
an (hw)-by-(hw) map, the coupled mechanism builds one h-by-h matrix ``A`` of
alignment scores between grid rows and one w-by-w matrix ``B`` between grid
columns, and uses ``softmax(A) (x) softmax(B)`` as the attention map.  The
product never has to be materialized: because ``(A (x) B) . row(X) equals
row(A . X . B^T)``, applying the map costs two small matrix products per
channel.  :func:`coupled_attention_explicit` materializes the Kronecker
product anyway and exists purely as the brute-force oracle for
:func:`coupled_attention_fast`.

Score matrices carry per-head normalization 1/sqrt(w*d_head) for ``A`` and
1/sqrt(h*d_head) for ``B``, matching the dot-product length the way standard
attention scales by 1/sqrt(d_head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import tensor as T
from .autograd import Var
from .tensor import ShapeError, Tensor

__all__ = [
    "AttentionGeometry",
    "CouplingAttentionParams",
    "trunc_normal",
    "raster_index",
    "raster_coords",
    "standard_attention",
    "coupling_scores",
    "coupled_attention_explicit",
    "coupled_attention_fast",
    "apply_factored_map",
    "lemma1_apply",
    "attention_forward",
    "EXPLICIT_TOKEN_LIMIT",
]

# The explicit oracle materializes an (hw)^2 map; refuse production shapes.
EXPLICIT_TOKEN_LIMIT = 256


def trunc_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02
) -> Tensor:
    """Normal(0, std) samples redrawn until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return Tensor._wrap(out)


@dataclass(frozen=True)
class AttentionGeometry:
    """Token-grid and embedding geometry shared by every attention variant."""

    h: int
    w: int
    d: int
    heads: int

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1:
            raise ShapeError(f"geometry: grid {self.h}x{self.w} must be at least 1x1")
        if self.d < 1 or self.heads < 1:
            raise ShapeError(f"geometry: d={self.d}, heads={self.heads} must be positive")
        if self.d % self.heads != 0:
            raise ShapeError(f"geometry: d={self.d} not divisible by heads={self.heads}")

    @property
    def tokens(self) -> int:
        return self.h * self.w

    @property
    def d_head(self) -> int:
        return self.d // self.heads


class CouplingAttentionParams:
    """Projection weights for one attention block (either mechanism).

    Four square d-by-d projections; biases are off by default and add 4d
    parameters when enabled.
    """

    def __init__(
        self,
        geometry: AttentionGeometry,
        w_q: Var,
        w_k: Var,
        w_v: Var,
        w_o: Var,
        b_q: Var | None = None,
        b_k: Var | None = None,
        b_v: Var | None = None,
        b_o: Var | None = None,
    ) -> None:
        d = geometry.d
        for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_o", w_o)):
            if w.value.shape != (d, d):
                raise ShapeError(f"{name}: expected ({d}, {d}), got {w.value.shape}")
        biases = (b_q, b_k, b_v, b_o)
        if any(b is not None for b in biases) and not all(b is not None for b in biases):
            raise ShapeError("projection biases must be enabled for all four projections")
        for name, b in zip(("b_q", "b_k", "b_v", "b_o"), biases):
            if b is not None and b.value.shape != (d,):
                raise ShapeError(f"{name}: expected ({d},), got {b.value.shape}")
        self.geometry = geometry
        self.w_q, self.w_k, self.w_v, self.w_o = w_q, w_k, w_v, w_o
        self.b_q, self.b_k, self.b_v, self.b_o = b_q, b_k, b_v, b_o

    @classmethod
    def initialize(
        cls,
        geometry: AttentionGeometry,
        rng: np.random.Generator,
        std: float = 0.02,
        bias: bool = False,
    ) -> "CouplingAttentionParams":
        d = geometry.d
        weights = [ag.parameter(trunc_normal(rng, (d, d), std)) for _ in range(4)]
        biases = [ag.parameter(T.zeros((d,))) for _ in range(4)] if bias else [None] * 4
        return cls(geometry, *weights, *biases)

    def parameters(self) -> dict[str, Var]:
        out = {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}
        if self.b_q is not None:
            out.update({"b_q": self.b_q, "b_k": self.b_k, "b_v": self.b_v, "b_o": self.b_o})
        return out


def raster_index(x: int, y: int, w: int) -> int:
    """Flat token index of grid position (x, y) under raster order: x + y*w."""
    if w < 1:
        raise ShapeError(f"raster_index: width {w} must be positive")
    if not 0 <= x < w:
        raise ShapeError(f"raster_index: x={x} out of range [0, {w})")
    if y < 0:
        raise ShapeError(f"raster_index: y={y} must be non-negative")
    return x + y * w


def raster_coords(i: int, w: int) -> tuple[int, int]:
    """Grid position (x, y) of flat token index i; exact inverse of raster_index."""
    if w < 1:
        raise ShapeError(f"raster_coords: width {w} must be positive")
    if i < 0:
        raise ShapeError(f"raster_coords: index {i} must be non-negative")
    return i % w, i // w


def _project(x: Var, weight: Var, bias: Var | None) -> Var:
    out = ag.matmul(x, weight)
    if bias is not None:
        out = ag.add_bias_rows(out, bias)
    return out


def _check_tokens(x: Var, geometry: AttentionGeometry) -> None:
    expected = (geometry.tokens, geometry.d)
    if x.value.shape != expected:
        raise ShapeError(f"attention: expected tokens of shape {expected}, got {x.value.shape}")


def _head_slices(t: Var, geometry: AttentionGeometry) -> list[Var]:
    dh = geometry.d_head
    return [
        ag.slice_axis(t, 1, i * dh, (i + 1) * dh) for i in range(geometry.heads)
    ]


def standard_attention(x: Var, params: CouplingAttentionParams) -> Var:
    """Full pairwise attention: per head softmax(Q K^T / sqrt(d_head)) V."""
    g = params.geometry
    _check_tokens(x, g)
    T.note_score_block()
    q = _project(x, params.w_q, params.b_q)
    k = _project(x, params.w_k, params.b_k)
    v = _project(x, params.w_v, params.b_v)
    outputs = []
    inv = 1.0 / math.sqrt(g.d_head)
    for qh, kh, vh in zip(_head_slices(q, g), _head_slices(k, g), _head_slices(v, g)):
        scores = ag.scale(ag.matmul(qh, ag.transpose2d(kh)), inv)
        T.note_score_tensor(scores.value)
        outputs.append(ag.matmul(ag.softmax_rows(scores), vh))
    return _project(ag.concat(outputs, axis=1), params.w_o, params.b_o)


def coupling_scores(q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
    """Row/column alignment scores from projected tokens in grid layout.

    ``q`` and ``k`` have shape (heads, h, w, d_head).  Returns
    A of shape (heads, h, h) with A[n, y1, y2] the dot product of grid rows
    y1 of q and y2 of k, scaled by 1/sqrt(w*d_head); and B of shape
    (heads, w, w) built the same way from grid columns, scaled by
    1/sqrt(h*d_head).
    """
    qa, ka = q.data, k.data
    if qa.ndim != 4 or qa.shape != ka.shape:
        raise ShapeError(
            f"coupling_scores: expected matching (heads, h, w, d_head), got {qa.shape} and {ka.shape}"
        )
    _, h, w, d_head = qa.shape
    a = np.einsum("nyxc,nzxc->nyz", qa, ka) / math.sqrt(w * d_head)
    b = np.einsum("nyac,nybc->nab", qa, ka) / math.sqrt(h * d_head)
    return Tensor._wrap(a), Tensor._wrap(b)


def _coupling_score_vars(
    qh: Var, kh: Var, g: AttentionGeometry
) -> tuple[Var, Var]:
    """Differentiable single-head counterpart of :func:`coupling_scores`."""
    h, w, dh = g.h, g.w, g.d_head
    qa = ag.reshape(qh, (h, w * dh))
    ka = ag.reshape(kh, (h, w * dh))
    a = ag.scale(ag.matmul(qa, ag.transpose2d(ka)), 1.0 / math.sqrt(w * dh))
    qb = ag.reshape(ag.permute(ag.reshape(qh, (h, w, dh)), (1, 0, 2)), (w, h * dh))
    kb = ag.reshape(ag.permute(ag.reshape(kh, (h, w, dh)), (1, 0, 2)), (w, h * dh))
    b = ag.scale(ag.matmul(qb, ag.transpose2d(kb)), 1.0 / math.sqrt(h * dh))
    T.note_score_tensor(a.value)
    T.note_score_tensor(b.value)
    return a, b


def apply_factored_map(a: Var, b: Var, v: Var, h: int, w: int) -> Var:
    """Apply the factored map (a (x) b) to raster tokens v without forming it.

    ``v`` has shape (h*w, d_head); each channel's h-by-w grid slice X is
    replaced by a . X . b^T, which by the row-vectorization identity equals
    multiplying row(X) by the Kronecker product.
    """
    d_head = v.value.shape[1]
    left = ag.reshape(ag.matmul(a, ag.reshape(v, (h, w * d_head))), (h, w, d_head))
    cols = ag.reshape(ag.permute(left, (0, 2, 1)), (h * d_head, w))
    right = ag.matmul(cols, ag.transpose2d(b))
    grid = ag.permute(ag.reshape(right, (h, d_head, w)), (0, 2, 1))
    return ag.reshape(grid, (h * w, d_head))


def coupled_attention_fast(x: Var, params: CouplingAttentionParams) -> Var:
    """Coupled attention via the factored application; the production path.

    Per head only the h-by-h and w-by-w score matrices are materialized
    (h^2 + w^2 score elements instead of (hw)^2), and the output equals
    :func:`coupled_attention_explicit` up to float round-off.
    """
    g = params.geometry
    _check_tokens(x, g)
    T.note_score_block()
    q = _project(x, params.w_q, params.b_q)
    k = _project(x, params.w_k, params.b_k)
    v = _project(x, params.w_v, params.b_v)
    outputs = []
    for qh, kh, vh in zip(_head_slices(q, g), _head_slices(k, g), _head_slices(v, g)):
        a, b = _coupling_score_vars(qh, kh, g)
        sa, sb = ag.softmax_rows(a), ag.softmax_rows(b)
        outputs.append(apply_factored_map(sa, sb, vh, g.h, g.w))
    return _project(ag.concat(outputs, axis=1), params.w_o, params.b_o)


def coupled_attention_explicit(x: Var, params: CouplingAttentionParams) -> Var:
    """Brute-force oracle: materialize softmax(A) (x) softmax(B) and apply it.

    Small shapes only; this keeps the full (hw)-by-(hw) map per head and is
    the reference the fast path is checked against.
    """
    g = params.geometry
    if g.tokens > EXPLICIT_TOKEN_LIMIT:
        raise ShapeError(
            f"explicit oracle limited to {EXPLICIT_TOKEN_LIMIT} tokens, got {g.tokens}"
        )
    _check_tokens(x, g)
    T.note_score_block()
    q = _project(x, params.w_q, params.b_q)
    k = _project(x, params.w_k, params.b_k)
    v = _project(x, params.w_v, params.b_v)
    outputs = []
    for qh, kh, vh in zip(_head_slices(q, g), _head_slices(k, g), _head_slices(v, g)):
        a, b = _coupling_score_vars(qh, kh, g)
        full_map = ag.kron(ag.softmax_rows(a), ag.softmax_rows(b))
        T.note_score_tensor(full_map.value)
        # Raster-ordered token rows make v already the stack of row(X_c) columns.
        outputs.append(ag.matmul(full_map, vh))
    return _project(ag.concat(outputs, axis=1), params.w_o, params.b_o)


def lemma1_apply(a: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """Multiply (a (x) b) by row_vec(x) without forming the Kronecker product.

    Pure identity on raw matrices, no softmax: returns row_vec(a . x . b^T),
    a vector of length h*w.
    """
    aa, ba, xa = a.data, b.data, x.data
    if aa.ndim != 2 or ba.ndim != 2 or xa.ndim != 2:
        raise ShapeError("lemma1_apply: all operands must be 2-D")
    if aa.shape[1] != xa.shape[0] or ba.shape[1] != xa.shape[1]:
        raise ShapeError(
            f"lemma1_apply: incompatible shapes {aa.shape}, {ba.shape}, {xa.shape}"
        )
    return T.row_vec(Tensor._wrap(aa @ xa @ ba.T))


_KINDS = {
    "standard": standard_attention,
    "coupled_fast": coupled_attention_fast,
    "coupled_explicit": coupled_attention_explicit,
}


def attention_forward(x: Var, params: CouplingAttentionParams, kind: str) -> Var:
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown attention kind {kind!r}; expected one of {sorted(_KINDS)}")
    return fn(x, params)
