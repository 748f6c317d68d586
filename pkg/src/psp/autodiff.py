"""Dense/sparse linear algebra with a reverse-mode tape and an Adam optimizer.

All values are float64 matrices; vectors are stored as Nx1 or 1xN. Operations
record onto the innermost active ``Tape`` only while at least one input
requires gradients, so forward passes through frozen models run tape-free.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sparse

from .errors import (
    ContractError,
    DataError,
    DimensionError,
    NumericError,
    ParameterError,
)

COSINE_EPS = 1e-12
DEGREE_FLOOR = 1e-12

_node_ids = itertools.count()
_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense float64 matrix participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_node_ids)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def detach(self) -> "Tensor":
        """Copy of the value, cut off from any tape."""
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor({self.rows}x{self.cols}, requires_grad={self.requires_grad}{tag})"


class CsrMatrix:
    """Compressed sparse row matrix with float64 values.

    Invariants are checked at construction: monotone row offsets, strictly
    increasing in-range column indices per row, aligned value array.
    """

    __slots__ = ("rows", "cols", "row_offsets", "col_indices", "values",
                 "_sp", "_sp_t", "_row_expand")

    def __init__(self, rows, cols, row_offsets, col_indices, values):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self._sp = None
        self._sp_t = None
        self._row_expand = None
        self._validate()

    def _validate(self) -> None:
        off = self.row_offsets
        if off.shape != (self.rows + 1,):
            raise DataError(f"row_offsets must have length rows+1={self.rows + 1}, got {off.shape}")
        if self.rows and (off[0] != 0 or off[-1] != self.col_indices.size):
            raise DataError("row_offsets must start at 0 and end at the entry count")
        if np.any(np.diff(off) < 0):
            raise DataError("row_offsets must be monotone non-decreasing")
        if self.col_indices.size != self.values.size:
            raise DataError("values and col_indices must have equal length")
        if self.col_indices.size:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.cols:
                raise DataError("column index out of range")
            same_row = np.diff(self.row_expansion()) == 0
            if np.any(np.diff(self.col_indices)[same_row] <= 0):
                raise DataError("column indices must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return int(self.col_indices.size)

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    @classmethod
    def from_scipy(cls, mat) -> "CsrMatrix":
        m = mat.tocsr()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    def scipy(self, values: Optional[np.ndarray] = None):
        if values is not None:
            return sparse.csr_matrix((values, self.col_indices, self.row_offsets),
                                     shape=(self.rows, self.cols))
        if self._sp is None:
            self._sp = sparse.csr_matrix((self.values, self.col_indices, self.row_offsets),
                                         shape=(self.rows, self.cols))
        return self._sp

    def scipy_t(self):
        if self._sp_t is None:
            self._sp_t = self.scipy().T.tocsr()
        return self._sp_t

    def row_expansion(self) -> np.ndarray:
        """Row index of every stored entry, in storage order."""
        if self._row_expand is None:
            self._row_expand = np.repeat(np.arange(self.rows, dtype=np.int64),
                                         np.diff(self.row_offsets))
        return self._row_expand

    def row_sums(self) -> np.ndarray:
        out = np.zeros(self.rows)
        np.add.at(out, self.row_expansion(), self.values)
        return out

    def to_dense(self) -> np.ndarray:
        return self.scipy().toarray()

    def __repr__(self) -> str:
        return f"CsrMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    out: Tensor
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered log of differentiable operations; append order is topological."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.dropout_calls = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: exited a tape that was not innermost")


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.records.append(TapeRecord(op, tuple(inputs), out, vjp))
    return out


def derive_seed(seed: int, salt: int) -> int:
    """Stable per-call seed derivation for seeded randomized ops."""
    return (int(seed) * 1_000_003 + int(salt)) & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    a_in, b_in = a.data, b.data

    def vjp(g):
        return g @ b_in.T, a_in.T @ g

    return _emit("matmul", (a, b), a_in @ b_in, vjp)


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T.copy(),))


def spmm(s: CsrMatrix, d: Tensor, values: Optional[Tensor] = None) -> Tensor:
    """Sparse-dense product s @ d.

    When `values` is given it overrides `s.values` entry-for-entry and may be
    differentiated, which lets stored sparse weights act as parameters.
    """
    if s.cols != d.rows:
        raise DimensionError(f"spmm: inner dimensions differ, {s.rows}x{s.cols} x {d.shape}")
    if values is None:
        mat = s.scipy()
        mat_t = s.scipy_t()
        d_args = (d,)
    else:
        if values.data.size != s.nnz:
            raise DimensionError(f"spmm: {values.data.size} values for {s.nnz} stored entries")
        mat = s.scipy(values.data.ravel())
        mat_t = mat.T.tocsr()
        d_args = (d, values)
    d_in = d.data
    rows_of_entries = s.row_expansion()
    cols_of_entries = s.col_indices
    val_shape = None if values is None else values.shape

    def vjp(g):
        gd = mat_t @ g
        if val_shape is None:
            return (gd,)
        gvals = np.einsum("ij,ij->i", g[rows_of_entries], d_in[cols_of_entries])
        return gd, gvals.reshape(val_shape)

    return _emit("spmm", d_args, mat @ d_in, vjp)


def select_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise DataError(f"select_rows: index out of range for {x.rows} rows")
    x_shape = x.shape

    def vjp(g):
        gx = np.zeros(x_shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("select_rows", (x,), x.data[idx], vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.cols:
        raise DimensionError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    na = a.rows
    return _emit("concat_rows", (a, b), np.vstack([a.data, b.data]),
                 lambda g: (g[:na], g[na:]))


def _bcast_reducer(small: tuple, big: tuple):
    """Gradient reducer for the limited broadcasts these models need."""
    if small == big:
        return lambda g: g
    if small == (1, big[1]):
        return lambda g: g.sum(axis=0, keepdims=True)
    if small == (big[0], 1):
        return lambda g: g.sum(axis=1, keepdims=True)
    return None


def _bcast_shapes(a: Tensor, b: Tensor, op: str):
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None
    ra = _bcast_reducer(a.shape, out_shape)
    rb = _bcast_reducer(b.shape, out_shape)
    if out_shape not in (a.shape, b.shape) or ra is None or rb is None:
        raise DimensionError(f"{op}: unsupported broadcast {a.shape} with {b.shape}")
    return ra, rb


def add(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _bcast_shapes(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (ra(g), rb(g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _bcast_shapes(a, b, "mul")
    a_in, b_in = a.data, b.data
    return _emit("mul", (a, b), a_in * b_in,
                 lambda g: (ra(g * b_in), rb(g * a_in)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def relu(a: Tensor) -> Tensor:
    gate = a.data > 0  # subgradient 0 at the kink
    return _emit("relu", (a,), a.data * gate, lambda g: (g * gate,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a_in = a.data
    return _emit("log", (a,), np.log(a_in), lambda g: (g / a_in,))


def rsqrt(a: Tensor, floor: float = DEGREE_FLOOR) -> Tensor:
    """Elementwise x^(-1/2) with the argument floored at `floor`."""
    x = np.maximum(a.data, floor)
    out = 1.0 / np.sqrt(x)
    gate = a.data > floor
    return _emit("rsqrt", (a,), out, lambda g: (g * (-0.5) * out / x * gate,))


def row_sum(a: Tensor) -> Tensor:
    cols = a.cols
    return _emit("row_sum", (a,), a.data.sum(axis=1, keepdims=True),
                 lambda g: (g * np.ones((1, cols)),))


def total_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("total_sum", (a,), a.data.sum().reshape(1, 1),
                 lambda g: (np.full(shape, g[0, 0]),))


def elementwise(op_kind: str, *inputs) -> Tensor:
    """Dispatch for the basic pointwise operations by name."""
    if op_kind == "relu":
        return relu(*inputs)
    if op_kind == "add":
        return add(*inputs)
    if op_kind == "scale":
        return scale(*inputs)
    raise ParameterError(f"unknown elementwise op kind {op_kind!r}")


def dropout(x: Tensor, p: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout; identity in evaluation mode.

    The mask depends only on (seed, call ordinal), where the ordinal counts
    dropout calls seen by the innermost active tape. Fresh tapes therefore
    replay identical masks for identical seeds.
    """
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    tape = active_tape()
    ordinal = 0
    if tape is not None:
        ordinal = tape.dropout_calls
        tape.dropout_calls += 1
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, ordinal])
    factor = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", (x,), x.data * factor, lambda g: (g * factor,))


def cosine_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain-array row-wise cosine similarity matrix (forward only)."""
    u = np.linalg.norm(a, axis=1, keepdims=True)
    v = np.linalg.norm(b, axis=1, keepdims=True)
    return (a @ b.T) / np.maximum(u @ v.T, COSINE_EPS)


def cosine_sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between the rows of a and the rows of b.

    The norm product is floored at a tiny epsilon so zero rows yield
    similarity 0 instead of NaN; such rows get subgradient 0.
    """
    if a.cols != b.cols:
        raise DimensionError(f"cosine_sim_matrix: feature dims differ, {a.shape} vs {b.shape}")
    a_in, b_in = a.data, b.data
    u = np.linalg.norm(a_in, axis=1, keepdims=True)
    v = np.linalg.norm(b_in, axis=1, keepdims=True)
    norm_prod = u @ v.T
    denom = np.maximum(norm_prod, COSINE_EPS)
    out = (a_in @ b_in.T) / denom
    gate = norm_prod > COSINE_EPS
    inv_u = np.where(u > 0.0, 1.0 / np.maximum(u, 1e-300), 0.0)
    inv_v = np.where(v > 0.0, 1.0 / np.maximum(v, 1e-300), 0.0)

    def vjp(g):
        gd = g / denom
        gs = gd * out * gate
        ga = gd @ b_in - (gs @ v) * inv_u * a_in
        gb = gd.T @ a_in - (gs.T @ u) * inv_v * b_in
        return ga, gb

    return _emit("cosine_sim_matrix", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# backward sweep


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep filling .grad of every requires_grad tensor on the tape.

    Calling twice without clearing grads accumulates: each call adds one full
    sweep seeded at 1 into the existing buffers.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    flows: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for rec in reversed(tape.records):
        g_out = flows.get(rec.out.node_id)
        if g_out is None:
            continue
        for t, g in zip(rec.inputs, rec.vjp(g_out)):
            if g is None:
                continue
            acc = flows.get(t.node_id)
            flows[t.node_id] = g if acc is None else acc + g
    touched: dict[int, Tensor] = {loss.node_id: loss}
    for rec in tape.records:
        touched[rec.out.node_id] = rec.out
        for t in rec.inputs:
            touched[t.node_id] = t
    for nid, t in touched.items():
        if not t.requires_grad:
            continue
        g = flows.get(nid)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam with decoupled weight decay; moments are allocated lazily."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected update in place; gradients are cleared afterward."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"optimizer state tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name or i} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError(f"adam_step: gradient shape mismatch on parameter {p.name or i}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.lr * state.weight_decay * p.data
        p.data -= update
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a tensor to a 1x1 tensor and be deterministic; seeded
    randomized ops qualify because fresh tapes replay their masks.
    """
    prev_rg, prev_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.shape != (1, 1):
        raise ContractError(f"grad_check: f must return a 1x1 tensor, got {y.shape}")
    backward(tape, y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad, x.grad = prev_rg, prev_grad

    numeric = np.zeros_like(x.data)
    base = x.data
    for idx in np.ndindex(*base.shape):
        orig = base[idx]
        base[idx] = orig + h
        with Tape():
            fp = f(x).item()
        base[idx] = orig - h
        with Tape():
            fm = f(x).item()
        base[idx] = orig
        numeric[idx] = (fp - fm) / (2.0 * h)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NumericError("grad_check encountered non-finite values")
    if numeric.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
