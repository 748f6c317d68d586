"""Graph data model, adjacency normalization, prompted-graph augmentation,
and graph-level readout.

The prompted graph attaches one virtual node per class to the base graph via
a dense learnable weight block; its symmetric degree normalization is
recomputed on every forward pass because the weights move during tuning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sparse

from .autodiff import (
    CsrMatrix,
    Tensor,
    absolute,
    add,
    concat_rows,
    matmul,
    mul,
    row_sum,
    rsqrt,
    select_rows,
    spmm,
    transpose,
)
from .errors import ContractError, DataError, DimensionError


@dataclass
class GraphData:
    """Immutable node features, sparse symmetric adjacency, and labels.

    `graph_of` maps nodes to graph ids for batched multi-graph datasets,
    whose adjacency is block-diagonal. Graph-level labels, when present,
    live in `graph_labels`.
    """

    n_nodes: int
    features: Tensor
    adjacency: CsrMatrix
    labels: Optional[np.ndarray]
    n_classes: int
    graph_of: Optional[np.ndarray] = None
    graph_labels: Optional[np.ndarray] = None
    n_graph_classes: int = 0

    def __post_init__(self):
        if self.features.rows != self.n_nodes:
            raise DataError(f"features have {self.features.rows} rows for {self.n_nodes} nodes")
        if self.adjacency.rows != self.n_nodes or self.adjacency.cols != self.n_nodes:
            raise DataError("adjacency must be n_nodes x n_nodes")
        m = self.adjacency.scipy()
        asym = abs(m - m.T)
        if asym.nnz and asym.max() > 0:
            raise DataError("adjacency must be symmetric")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.size != self.n_nodes:
                raise DataError("labels must have one entry per node")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataError(f"labels must lie in [0, {self.n_classes})")
        if self.graph_of is not None:
            self.graph_of = np.asarray(self.graph_of, dtype=np.int64)
            if self.graph_of.size != self.n_nodes:
                raise DataError("graph_of must have one entry per node")
            n_graphs = int(self.graph_of.max()) + 1 if self.graph_of.size else 0
            if np.unique(self.graph_of).size != n_graphs or (self.graph_of.size and self.graph_of.min() != 0):
                raise DataError("graph_of must be surjective onto 0..n_graphs-1")
        if self.graph_labels is not None:
            self.graph_labels = np.asarray(self.graph_labels, dtype=np.int64)

    @property
    def n_graphs(self) -> int:
        if self.graph_of is None:
            return 0
        return int(self.graph_of.max()) + 1 if self.graph_of.size else 0


@dataclass
class PromptedGraph:
    """A base graph plus per-class virtual nodes and learnable edge weights.

    `weight_rows` has one row per base node (node tasks) or per graph (graph
    tasks). Rows whose mask entry is False are pinned to zero and never
    receive gradient updates.
    """

    base: GraphData
    n_prototypes: int
    proto_features: Tensor
    weight_rows: Tensor
    trainable_row_mask: np.ndarray


def build_csr(n: int, edges) -> CsrMatrix:
    """Symmetrized, deduplicated, self-loop-free unit-weight CSR."""
    pairs = set()
    for src, dst in edges:
        src, dst = int(src), int(dst)
        if not (0 <= src < n and 0 <= dst < n):
            raise DataError(f"edge ({src}, {dst}) out of range for {n} nodes")
        if src == dst:
            continue
        pairs.add((min(src, dst), max(src, dst)))
    if not pairs:
        return CsrMatrix(n, n, np.zeros(n + 1, dtype=np.int64), [], [])
    arr = np.array(sorted(pairs), dtype=np.int64)
    src = np.concatenate([arr[:, 0], arr[:, 1]])
    dst = np.concatenate([arr[:, 1], arr[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    offsets = np.cumsum(offsets)
    return CsrMatrix(n, n, offsets, dst, np.ones(dst.size))


def add_self_loops(a: CsrMatrix) -> CsrMatrix:
    if a.rows != a.cols:
        raise DimensionError(f"add_self_loops needs a square matrix, got {a.rows}x{a.cols}")
    return CsrMatrix.from_scipy(a.scipy() + sparse.eye(a.rows, format="csr"))


def gcn_normalize(a: CsrMatrix) -> CsrMatrix:
    """Symmetric renormalization with implicit self-loops.

    Degrees are taken from the self-looped matrix, so a regular graph's
    normalized rows sum to 1.
    """
    if a.rows != a.cols:
        raise DimensionError(f"gcn_normalize needs a square matrix, got {a.rows}x{a.cols}")
    hat = add_self_loops(a)
    deg = np.maximum(hat.row_sums(), 1e-12)
    inv_sqrt = sparse.diags(1.0 / np.sqrt(deg))
    return CsrMatrix.from_scipy(inv_sqrt @ hat.scipy() @ inv_sqrt)


class AugmentedAdjacency:
    """Block operator [[A, W], [W^T, I]] with the W block differentiable."""

    def __init__(self, a: CsrMatrix, w: Tensor):
        if a.rows != a.cols:
            raise DimensionError(f"augmented adjacency needs a square base, got {a.rows}x{a.cols}")
        if w.rows != a.rows:
            raise DimensionError(f"weight block has {w.rows} rows for {a.rows} base nodes")
        self.a = a
        self.w = w

    @property
    def n_base(self) -> int:
        return self.a.rows

    @property
    def n_prototypes(self) -> int:
        return self.w.cols

    @property
    def rows(self) -> int:
        return self.a.rows + self.w.cols

    def dense(self) -> np.ndarray:
        n, c = self.n_base, self.n_prototypes
        out = np.zeros((n + c, n + c))
        out[:n, :n] = self.a.to_dense()
        out[:n, n:] = self.w.data
        out[n:, :n] = self.w.data.T
        out[n:, n:] = np.eye(c)
        return out


def augment_prompted(a: CsrMatrix, w: Tensor) -> AugmentedAdjacency:
    return AugmentedAdjacency(a, w)


class NormalizedPromptOperator:
    """Degree-normalized augmented operator, applied block-wise.

    Degrees are absolute row sums of [[A, W], [W^T, I]] plus the implicit
    self-loop on every original node; the self-looped original block and the
    signed W blocks are then scaled by d^-1/2 on both sides. The scaling
    vectors live on the tape, so gradients reach W through the degrees as
    well as through the message weights.
    """

    def __init__(self, aug: AugmentedAdjacency):
        self.a_hat = add_self_loops(aug.a)
        self.w = aug.w
        base_deg = Tensor((aug.a.row_sums() + 1.0).reshape(-1, 1))
        abs_w = absolute(aug.w)
        self.scale_base = rsqrt(add(row_sum(abs_w), base_deg))
        proto_deg = add(row_sum(transpose(abs_w)), Tensor(np.ones((aug.n_prototypes, 1))))
        self.scale_proto = rsqrt(proto_deg)
        self.n_base = aug.n_base
        self.n_prototypes = aug.n_prototypes

    @property
    def rows(self) -> int:
        return self.n_base + self.n_prototypes

    def apply(self, h: Tensor) -> Tensor:
        """Multiply the normalized operator by a dense (N+C)-row matrix."""
        if h.rows != self.rows:
            raise DimensionError(f"operator is {self.rows}x{self.rows}, got {h.shape}")
        n = self.n_base
        h_base = select_rows(h, np.arange(n))
        h_proto = select_rows(h, np.arange(n, self.rows))
        sb = mul(h_base, self.scale_base)
        sp = mul(h_proto, self.scale_proto)
        top = add(spmm(self.a_hat, sb), matmul(self.w, sp))
        bottom = add(matmul(transpose(self.w), sb), sp)
        return concat_rows(mul(top, self.scale_base), mul(bottom, self.scale_proto))

    def dense(self) -> np.ndarray:
        n, c = self.n_base, self.n_prototypes
        block = np.zeros((n + c, n + c))
        block[:n, :n] = self.a_hat.to_dense()
        block[:n, n:] = self.w.data
        block[n:, :n] = self.w.data.T
        block[n:, n:] = np.eye(c)
        s = np.concatenate([self.scale_base.data.ravel(), self.scale_proto.data.ravel()])
        return s[:, None] * block * s[None, :]


def normalize_prompted(aug: AugmentedAdjacency) -> NormalizedPromptOperator:
    return NormalizedPromptOperator(aug)


def mean_readout(z: Tensor, graph_of) -> Tensor:
    """Per-graph mean of node rows; group g of the output is graph g's mean."""
    membership = np.asarray(graph_of, dtype=np.int64).ravel()
    if membership.size != z.rows:
        raise ContractError(f"membership covers {membership.size} rows, embedding has {z.rows}")
    n_graphs = int(membership.max()) + 1 if membership.size else 0
    counts = np.bincount(membership, minlength=n_graphs)
    if np.any(counts == 0):
        raise DataError(f"graph {int(np.argmin(counts))} has no member nodes")
    sums = np.zeros((n_graphs, z.cols))
    np.add.at(sums, membership, z.data)
    return Tensor(sums / counts[:, None])
