"""Separated structure over two-hop neighborhoods.

For a relation out of the target type, every path i -> k -> j through a
shared neighbor k is a unit of evidence between targets i and j. Paths
returning to their origin keep the diagonal in play, so a node is its
own strongest affinity peer whenever it has any edge. Multiplying edge
weights along a path and summing over shared neighbors gives the
same-tendency affinity; doing the same with the complements gives the
opposite-tendency affinity. The two affinity sets drive complementary
filters over target features: a neighborhood-averaging low-pass and a
residual high-pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, TapeError, Value
from .hetgraph import GraphError, HeteroGraph

HOMOPHILIC = "homophilic"
HETEROPHILIC = "heterophilic"
KINDS = (HOMOPHILIC, HETEROPHILIC)


@dataclass(frozen=True)
class TwoHopIndex:
    """Static triple index of all two-hop paths under one relation.

    ``e1[t]`` and ``e2[t]`` are edge positions of path t's two legs in
    the forward and inverse edge lists; ``pair_ids[t]`` points into
    ``pairs``, the unique (i, j) endpoints sorted lexicographically.
    ``indptr`` groups pairs by source node i.
    """
    relation: str
    inverse: str
    num_nodes: int
    e1: np.ndarray
    e2: np.ndarray
    pair_ids: np.ndarray
    pairs: np.ndarray
    indptr: np.ndarray

    @property
    def num_pairs(self) -> int:
        return self.pairs.shape[0]

    @property
    def num_paths(self) -> int:
        return self.e1.shape[0]

    def neighbor_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def path_counts(self) -> np.ndarray:
        return np.bincount(self.pair_ids, minlength=self.num_pairs)


def build_two_hop(graph: HeteroGraph, relation_name: str) -> TwoHopIndex:
    """Enumerate i -> k -> j paths under one relation and its inverse,
    indexed for weight lookups on both legs. Round trips (j equal to i)
    count, so any node with an edge pairs with itself."""
    r = graph.relation_by_name(relation_name)
    rinv = graph.inverse_of(r)
    n = graph.type_by_name(r.src_type).count
    n_mid = graph.type_by_name(r.dst_type).count

    fwd_order = np.argsort(r.edges[:, 1], kind="stable")
    inv_order = np.argsort(rinv.edges[:, 0], kind="stable")
    fwd_k = r.edges[fwd_order, 1]
    inv_k = rinv.edges[inv_order, 0]
    fwd_ptr = np.searchsorted(fwd_k, np.arange(n_mid + 1))
    inv_ptr = np.searchsorted(inv_k, np.arange(n_mid + 1))

    e1_parts, e2_parts = [], []
    for k in range(n_mid):
        f = fwd_order[fwd_ptr[k]:fwd_ptr[k + 1]]
        g = inv_order[inv_ptr[k]:inv_ptr[k + 1]]
        if f.size and g.size:
            e1_parts.append(np.repeat(f, g.size))
            e2_parts.append(np.tile(g, f.size))
    if e1_parts:
        e1 = np.concatenate(e1_parts)
        e2 = np.concatenate(e2_parts)
    else:
        e1 = np.empty(0, dtype=np.int64)
        e2 = np.empty(0, dtype=np.int64)

    i = r.edges[e1, 0]
    j = rinv.edges[e2, 1]
    codes = i * n + j
    unique_codes, pair_ids = np.unique(codes, return_inverse=True)
    pairs = np.stack([unique_codes // n, unique_codes % n], axis=1)
    indptr = np.searchsorted(pairs[:, 0], np.arange(n + 1))
    return TwoHopIndex(r.name, rinv.name, n,
                       e1.astype(np.int64), e2.astype(np.int64),
                       pair_ids.astype(np.int64), pairs.astype(np.int64),
                       indptr.astype(np.int64))


def pair_affinities(tape: Tape, index: TwoHopIndex, w_fwd: Value,
                    w_inv: Value, kind: str) -> Value:
    """Per-pair affinity of one kind, shape (num_pairs,).

    Same-tendency sums products of the two leg weights over shared
    neighbors; opposite-tendency sums products of their complements.
    """
    if kind not in KINDS:
        raise GraphError(f"unknown affinity kind {kind!r}")
    leg1 = tape.gather_rows(w_fwd, index.e1)
    leg2 = tape.gather_rows(w_inv, index.e2)
    if kind == HETEROPHILIC:
        one = tape.constant(np.ones(index.num_paths, dtype=w_fwd.data.dtype))
        leg1 = tape.sub(one, leg1)
        leg2 = tape.sub(one, leg2)
    return tape.segment_sum(tape.mul(leg1, leg2), index.pair_ids,
                            index.num_pairs)


def _mean_over_pairs(tape: Tape, index: TwoHopIndex, affinities: Value,
                     x: Value) -> Value:
    """(1/|N_i|) sum_j a_ij x_j; zero rows for nodes without pairs."""
    counts = index.neighbor_counts().astype(np.float64)
    inv_counts = np.divide(1.0, counts, out=np.zeros_like(counts),
                           where=counts > 0)
    weighted = tape.colvec_scale(tape.gather_rows(x, index.pairs[:, 1]),
                                 affinities)
    sums = tape.segment_sum(weighted, index.pairs[:, 0], index.num_nodes)
    return tape.colvec_scale(
        sums, tape.constant(inv_counts.astype(x.data.dtype)))


def low_pass(tape: Tape, index: TwoHopIndex, affinities: Value,
             x: Value) -> Value:
    """Affinity-weighted neighborhood average; nodes with no two-hop
    pairs pass their own features through unchanged."""
    _check_filter_args(index, affinities, x)
    mean = _mean_over_pairs(tape, index, affinities, x)
    isolated = (index.neighbor_counts() == 0).astype(x.data.dtype)
    return tape.add(mean, tape.colvec_scale(x, tape.constant(isolated)))


def high_pass(tape: Tape, index: TwoHopIndex, affinities: Value,
              x: Value) -> Value:
    """Residual against the affinity-weighted neighborhood average;
    nodes with no two-hop pairs keep their own features unchanged."""
    _check_filter_args(index, affinities, x)
    return tape.sub(x, _mean_over_pairs(tape, index, affinities, x))


def apply_filter(tape: Tape, index: TwoHopIndex, affinities: Value, x: Value,
                 kind: str, num_layers: int = 1) -> Value:
    """Iterate the kind's filter ``num_layers`` times."""
    if num_layers < 1:
        raise GraphError(f"filter layers must be >= 1, got {num_layers}")
    fn = low_pass if kind == HOMOPHILIC else high_pass
    if kind not in KINDS:
        raise GraphError(f"unknown affinity kind {kind!r}")
    h = x
    for _ in range(num_layers):
        h = fn(tape, index, affinities, h)
    return h


def _check_filter_args(index: TwoHopIndex, affinities: Value,
                       x: Value) -> None:
    if affinities.shape != (index.num_pairs,):
        raise TapeError(
            f"affinities shape {affinities.shape} does not match "
            f"{index.num_pairs} pairs")
    if x.data.ndim != 2 or x.shape[0] != index.num_nodes:
        raise TapeError(
            f"features shape {x.shape} does not match {index.num_nodes} nodes")
