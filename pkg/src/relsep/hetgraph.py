"""Heterogeneous graph data model.

Typed node sets, per-relation bipartite edge lists, per-type feature
matrices, and the structural transforms the pipeline is built on:
incidence matrices, their edge-to-node duals, and edge perturbation.
All structures are immutable after construction and safe to share.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised when a graph fails structural validation."""


@dataclass(frozen=True)
class NodeType:
    name: str
    count: int
    feature_dim: int

    def __post_init__(self):
        if self.count <= 0:
            raise GraphError(f"node type {self.name!r}: count must be positive, got {self.count}")
        if self.feature_dim < 0:
            raise GraphError(f"node type {self.name!r}: feature_dim must be >= 0")


@dataclass(frozen=True)
class Relation:
    """A directed bipartite edge set between two node types.

    ``edges`` is an (E, 2) int array of (src_index, dst_index) pairs in
    input order; every downstream edge-indexed vector shares this order.
    ``generated`` marks inverses materialized automatically rather than
    declared in the input.
    """
    name: str
    src_type: str
    dst_type: str
    edges: np.ndarray
    inverse_name: str = ""
    generated: bool = False

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]


@dataclass(frozen=True)
class HeteroGraph:
    node_types: tuple[NodeType, ...]
    relations: tuple[Relation, ...]
    features: dict[str, np.ndarray]
    target_type: str
    labels: np.ndarray
    num_classes: int
    edge_features: dict[str, np.ndarray] = field(default_factory=dict)
    splits: dict | None = None

    def type_by_name(self, name: str) -> NodeType:
        for t in self.node_types:
            if t.name == name:
                return t
        raise GraphError(f"unknown node type {name!r}")

    def relation_by_name(self, name: str) -> Relation:
        for r in self.relations:
            if r.name == name:
                return r
        raise GraphError(f"unknown relation {name!r}")

    def inverse_of(self, relation: Relation) -> Relation:
        return self.relation_by_name(relation.inverse_name)

    def base_relations(self) -> tuple[Relation, ...]:
        return tuple(r for r in self.relations if not r.generated)

    def outgoing_relations(self, type_name: str) -> tuple[Relation, ...]:
        return tuple(r for r in self.relations if r.src_type == type_name)

    @property
    def num_target_nodes(self) -> int:
        return self.type_by_name(self.target_type).count

    def src_degrees(self, relation: Relation) -> np.ndarray:
        n = self.type_by_name(relation.src_type).count
        return np.bincount(relation.edges[:, 0], minlength=n).astype(np.int64)

    def dst_degrees(self, relation: Relation) -> np.ndarray:
        n = self.type_by_name(relation.dst_type).count
        return np.bincount(relation.edges[:, 1], minlength=n).astype(np.int64)


def build_graph(
    node_types: list[NodeType],
    relations: list[Relation],
    features: dict[str, np.ndarray],
    target_type: str,
    labels: np.ndarray,
    num_classes: int,
    edge_features: dict[str, np.ndarray] | None = None,
    splits: dict | None = None,
    allow_empty_relations: bool = False,
) -> HeteroGraph:
    """Validate the pieces, materialize missing inverse relations, assemble.

    Two declared relations with swapped endpoint types and exactly mirrored
    edge sets are paired as mutual inverses; any relation left unpaired gets
    a generated inverse with the pairwise-reversed edge list (same order).
    """
    names = [t.name for t in node_types]
    if len(set(names)) != len(names):
        raise GraphError("node type names must be unique")
    counts = {t.name: t.count for t in node_types}

    rel_names = [r.name for r in relations]
    if len(set(rel_names)) != len(rel_names):
        raise GraphError("relation names must be unique")

    for r in relations:
        if r.src_type not in counts or r.dst_type not in counts:
            raise GraphError(f"relation {r.name!r} references unknown node type")
        if r.num_edges == 0 and not allow_empty_relations:
            raise GraphError(f"relation {r.name!r} has zero edges")
        if r.num_edges:
            if r.edges[:, 0].min() < 0 or r.edges[:, 0].max() >= counts[r.src_type]:
                raise GraphError(f"relation {r.name!r}: src index out of range")
            if r.edges[:, 1].min() < 0 or r.edges[:, 1].max() >= counts[r.dst_type]:
                raise GraphError(f"relation {r.name!r}: dst index out of range")
            pairs = set(map(tuple, r.edges.tolist()))
            if len(pairs) != r.num_edges:
                raise GraphError(f"relation {r.name!r}: duplicate (src,dst) pair")

    relations = _materialize_inverses(relations)

    if len(node_types) + len(relations) <= 2:
        raise GraphError("not heterogeneous: need |types| + |relations| > 2")

    for t in node_types:
        feat = features.get(t.name)
        if feat is None:
            feat = np.zeros((t.count, t.feature_dim))
            features = dict(features)
            features[t.name] = feat
        if feat.shape != (t.count, t.feature_dim):
            raise GraphError(
                f"feature matrix for {t.name!r} has shape {feat.shape}, "
                f"expected {(t.count, t.feature_dim)}"
            )

    if target_type not in counts:
        raise GraphError(f"target type {target_type!r} not declared")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (counts[target_type],):
        raise GraphError(
            f"label vector has length {labels.shape}, expected {counts[target_type]}"
        )
    if num_classes <= 0:
        raise GraphError("num_classes must be positive")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise GraphError(f"labels must lie in [0, {num_classes})")

    return HeteroGraph(
        node_types=tuple(node_types),
        relations=tuple(relations),
        features={k: np.ascontiguousarray(v) for k, v in features.items()},
        target_type=target_type,
        labels=labels,
        num_classes=num_classes,
        edge_features=dict(edge_features or {}),
        splits=splits,
    )


def _materialize_inverses(relations: list[Relation]) -> list[Relation]:
    out: list[Relation] = []
    paired: dict[str, str] = {}
    for i, r in enumerate(relations):
        if r.name in paired:
            continue
        mate = None
        for s in relations[i + 1:]:
            if s.name in paired:
                continue
            if s.src_type == r.dst_type and s.dst_type == r.src_type:
                if _edge_sets_mirror(r.edges, s.edges):
                    mate = s
                    break
        if mate is not None:
            paired[r.name] = mate.name
            paired[mate.name] = r.name
    for r in relations:
        inv = paired.get(r.name, f"{r.name}-inv")
        out.append(Relation(r.name, r.src_type, r.dst_type, r.edges, inv, r.generated))
    for r in relations:
        if r.name not in paired:
            out.append(Relation(
                name=f"{r.name}-inv",
                src_type=r.dst_type,
                dst_type=r.src_type,
                edges=np.ascontiguousarray(r.edges[:, ::-1]),
                inverse_name=r.name,
                generated=True,
            ))
    return out


def _edge_sets_mirror(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape[0] != b.shape[0]:
        return False
    return set(map(tuple, a.tolist())) == set(map(tuple, b[:, ::-1].tolist()))


@dataclass(frozen=True)
class IncidenceMatrix:
    """Node-by-edge binary matrix of one bipartite relation.

    Rows: src-type block then dst-type block; columns follow the edge list
    order. Every column has exactly two nonzero entries.
    """
    relation: str
    matrix: sp.csr_matrix
    src_count: int
    dst_count: int


def build_incidence(graph: HeteroGraph, relation: Relation) -> IncidenceMatrix:
    n_src = graph.type_by_name(relation.src_type).count
    n_dst = graph.type_by_name(relation.dst_type).count
    m = relation.num_edges
    cols = np.arange(m, dtype=np.int64)
    rows = np.concatenate([relation.edges[:, 0], n_src + relation.edges[:, 1]])
    data = np.ones(2 * m)
    mat = sp.csr_matrix(
        (data, (rows, np.concatenate([cols, cols]))), shape=(n_src + n_dst, m)
    )
    return IncidenceMatrix(relation.name, mat, n_src, n_dst)


@dataclass(frozen=True)
class DualHypergraph:
    """Edge-to-node dual of one bipartite relation.

    Dual nodes are the original edges (``mbar`` is the transposed incidence
    matrix); hyperedges are the original nodes, so hyperedge degrees equal
    the original node degrees. Dual node degree is always 2.
    """
    relation: str
    mbar: sp.csr_matrix
    hyperedge_degrees: np.ndarray

    @property
    def num_dual_nodes(self) -> int:
        return self.mbar.shape[0]

    @property
    def num_hyperedges(self) -> int:
        return self.mbar.shape[1]


def dual_transform(incidence: IncidenceMatrix) -> DualHypergraph:
    mbar = incidence.matrix.T.tocsr()
    degrees = np.asarray(incidence.matrix.sum(axis=1)).ravel()
    return DualHypergraph(incidence.relation, mbar, degrees)


def perturb_edges(graph: HeteroGraph, rate: float, seed: int) -> HeteroGraph:
    """Drop a uniform random fraction of each base relation's edges.

    Each base relation independently keeps ceil((1-rate)*E) edges, in their
    original order; inverses are re-derived from the survivors. Deterministic
    given the seed.
    """
    if not 0.0 <= rate <= 1.0:
        raise GraphError(f"perturbation rate must lie in [0, 1], got {rate}")
    kept: list[Relation] = []
    for idx, r in enumerate(graph.base_relations()):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, idx])))
        n_keep = math.ceil((1.0 - rate) * r.num_edges)
        pick = np.sort(rng.choice(r.num_edges, size=n_keep, replace=False))
        kept.append(Relation(r.name, r.src_type, r.dst_type,
                             np.ascontiguousarray(r.edges[pick])))
    return build_graph(
        list(graph.node_types),
        kept,
        dict(graph.features),
        graph.target_type,
        graph.labels,
        graph.num_classes,
        edge_features=dict(graph.edge_features),
        splits=graph.splits,
        allow_empty_relations=True,
    )
