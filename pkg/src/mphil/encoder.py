"""Invariant feature extractor: two GIN stacks and a gated readout.

``GNN_E`` produces node representations ``H``, ``GNN_S`` produces
per-node, per-channel gates ``S = sigmoid(GNN_S(G))`` and the graph vector is
``z_inv = mean_v(H * S)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from . import ndtensor as nd
from .graphdata import Graph
from .ndtensor import Tensor

READOUTS = ("mean", "sum")


@dataclass
class GraphBatch:
    """Disjoint union of graphs, ready for message passing."""

    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_ids: np.ndarray
    num_graphs: int
    counts: np.ndarray
    labels: np.ndarray
    _adj: sp.csr_matrix | None = None

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adj is None:
            self._adj = adjacency(self.src, self.dst, self.num_nodes)
        return self._adj


def adjacency(src: np.ndarray, dst: np.ndarray, num_nodes: int) -> sp.csr_matrix:
    """CSR matrix with ``A[dst, src] = 1``; entries in a row keep edge order."""
    order = np.argsort(dst, kind="stable")
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, dst + 1, 1)
    indptr = np.cumsum(indptr)
    return sp.csr_matrix((np.ones(len(src)), src[order], indptr), shape=(num_nodes, num_nodes))


def collate(graphs: Sequence[Graph]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot collate an empty list of graphs")
    xs, srcs, dsts, gids = [], [], [], []
    offset = 0
    for i, g in enumerate(graphs):
        if g.num_nodes == 0:
            raise ValueError(f"graph {i} is empty")
        s, d = g.directed_edges()
        xs.append(g.x)
        srcs.append(s + offset)
        dsts.append(d + offset)
        gids.append(np.full(g.num_nodes, i, dtype=np.int64))
        offset += g.num_nodes
    dims = {x.shape[1] for x in xs}
    if len(dims) != 1:
        raise ValueError(f"graphs have mismatched feature widths {sorted(dims)}")
    return GraphBatch(
        x=np.concatenate(xs),
        src=np.concatenate(srcs).astype(np.int64),
        dst=np.concatenate(dsts).astype(np.int64),
        graph_ids=np.concatenate(gids),
        num_graphs=len(graphs),
        counts=np.array([g.num_nodes for g in graphs], dtype=np.float64),
        labels=np.array([g.y for g in graphs], dtype=np.int64),
    )


def iter_batches(graphs: Sequence[Graph], batch_size: int, order: Sequence[int] | None = None) -> Iterator[tuple[np.ndarray, GraphBatch]]:
    """Yield (indices, batch); the last short batch is kept."""
    idx = np.arange(len(graphs)) if order is None else np.asarray(order)
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        yield chunk, collate([graphs[i] for i in chunk])


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GinLayer:
    """``h_v <- MLP((1 + eps) h_v + sum_{u in N(v)} h_u)`` with a 2-layer ReLU MLP."""

    def __init__(self, d_in: int, d_h: int, d_out: int, rng: np.random.Generator, name: str = "gin"):
        self.eps = nd.parameter(np.zeros((1, 1)), f"{name}.eps")
        self.w1 = nd.parameter(_uniform(rng, d_in, (d_in, d_h)), f"{name}.w1")
        self.b1 = nd.parameter(_uniform(rng, d_in, (1, d_h)), f"{name}.b1")
        self.w2 = nd.parameter(_uniform(rng, d_h, (d_h, d_out)), f"{name}.w2")
        self.b2 = nd.parameter(_uniform(rng, d_h, (1, d_out)), f"{name}.b2")

    @property
    def widths(self) -> tuple[int, int, int]:
        return self.w1.rows, self.w1.cols, self.w2.cols

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in (self.eps, self.w1, self.b1, self.w2, self.b2)]


def gin_layer_forward(layer: GinLayer, h: Tensor, batch_or_adj) -> Tensor:
    adj = batch_or_adj.adjacency if isinstance(batch_or_adj, GraphBatch) else batch_or_adj
    agg = nd.neighbor_sum(h, adj)
    mixed = nd.add(nd.add(h, nd.scale_by(h, layer.eps)), agg)
    hidden = nd.relu(nd.add_row(nd.matmul(mixed, layer.w1), layer.b1))
    return nd.add_row(nd.matmul(hidden, layer.w2), layer.b2)


def gin_stack(layers: Sequence[GinLayer], x: Tensor, batch: GraphBatch) -> Tensor:
    h = x
    for i, layer in enumerate(layers):
        h = gin_layer_forward(layer, h, batch)
        if i + 1 < len(layers):
            h = nd.relu(h)
    return h


class EncoderParams:
    def __init__(self, in_dim: int, hidden: int, num_layers: int, rng: np.random.Generator, readout: str = "mean"):
        if readout not in READOUTS:
            raise ValueError(f"unknown readout {readout!r}")
        self.in_dim, self.hidden, self.num_layers, self.readout = in_dim, hidden, num_layers, readout
        self.gnn_e = self._stack(in_dim, hidden, num_layers, rng, "gnn_e")
        self.gnn_s = self._stack(in_dim, hidden, num_layers, rng, "gnn_s")

    @staticmethod
    def _stack(in_dim, hidden, num_layers, rng, prefix) -> list[GinLayer]:
        return [GinLayer(in_dim if i == 0 else hidden, hidden, hidden, rng, f"{prefix}.{i}") for i in range(num_layers)]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in (*self.gnn_e, *self.gnn_s):
            out += layer.named_tensors()
        return out


def encode(params: EncoderParams, batch: GraphBatch) -> tuple[Tensor, Tensor]:
    if batch.num_nodes == 0:
        raise ValueError("cannot encode an empty graph")
    if batch.x.shape[1] != params.in_dim:
        raise ValueError(f"node features have width {batch.x.shape[1]}, encoder expects {params.in_dim}")
    x = nd.constant(batch.x)
    H = gin_stack(params.gnn_e, x, batch)
    S = nd.sigmoid(gin_stack(params.gnn_s, x, batch))
    return H, S


def graph_pool(h: Tensor, batch: GraphBatch, readout: str = "mean") -> Tensor:
    pooled = nd.segment_sum(h, batch.graph_ids, batch.num_graphs)
    if readout == "sum":
        return pooled
    return nd.mul_col(pooled, nd.constant((1.0 / batch.counts).reshape(-1, 1)))


def gated_readout(H: Tensor, S: Tensor, batch: GraphBatch | None = None, readout: str = "mean") -> Tensor:
    """``READOUT(H * S)`` per graph; without a batch the whole input is one graph."""
    if H.shape != S.shape:
        raise nd.ShapeError(f"gated_readout: H {H.shape} vs S {S.shape}")
    gated = nd.mul(H, S)
    if batch is None:
        return nd.reduce("mean" if readout == "mean" else "sum", gated, axis=0)
    return graph_pool(gated, batch, readout)
