"""Typed message-passing encoder for heterogeneous graphs.

Each layer maps every node type through its own linear transform and
adds, per outgoing relation, the mean of the transformed neighbor
features; relation messages are summed across relations and passed
through ELU. Nodes with no neighbors under a relation receive a zero
message for it, so isolated nodes reduce to their own transform.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .autodiff import Parameter, Tape, TapeError, Value
from .hetgraph import HeteroGraph


def xavier_init(rng: np.random.Generator, shape: tuple[int, int],
                dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, shape).astype(dtype)


def neighbor_mean_matrix(graph: HeteroGraph, relation_name: str,
                         dtype=np.float64) -> sp.csr_matrix:
    """Sparse (src x dst) operator averaging neighbor rows under one
    relation. Rows of isolated source nodes are all zero."""
    r = graph.relation_by_name(relation_name)
    n_src = graph.type_by_name(r.src_type).count
    n_dst = graph.type_by_name(r.dst_type).count
    deg = graph.src_degrees(r).astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    data = inv[r.edges[:, 0]].astype(dtype)
    return sp.csr_matrix((data, (r.edges[:, 0], r.edges[:, 1])),
                         shape=(n_src, n_dst))


class HeteroEncoder:
    """Stack of typed aggregation layers producing one embedding matrix
    per node type. ``num_layers=0`` passes input features through."""

    def __init__(self, graph: HeteroGraph, in_dims: dict[str, int],
                 hidden_dim: int, num_layers: int, seed: int,
                 dtype=np.float32, prefix: str = "enc."):
        if hidden_dim <= 0:
            raise TapeError(f"hidden_dim must be positive, got {hidden_dim}")
        if num_layers < 0:
            raise TapeError(f"num_layers must be >= 0, got {num_layers}")
        for t in graph.node_types:
            if in_dims.get(t.name, 0) <= 0:
                raise TapeError(
                    f"type {t.name!r} needs a positive input dim; "
                    "substitute random features before encoding")
        self.graph = graph
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.dtype = np.dtype(dtype)
        self.out_dims = dict(in_dims) if num_layers == 0 else \
            {t.name: hidden_dim for t in graph.node_types}
        self.neighbor_mean = {r.name: neighbor_mean_matrix(graph, r.name, dtype)
                              for r in graph.relations}
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        self._params: list[Parameter] = []
        self._by_name: dict[str, Parameter] = {}
        for layer in range(num_layers):
            dims = in_dims if layer == 0 else \
                {t.name: hidden_dim for t in graph.node_types}
            for t in graph.node_types:
                self._add(f"{prefix}l{layer}.{t.name}.W",
                          xavier_init(rng, (dims[t.name], hidden_dim), dtype))
                self._add(f"{prefix}l{layer}.{t.name}.b",
                          np.zeros(hidden_dim, dtype=dtype))
            for r in graph.relations:
                self._add(f"{prefix}l{layer}.{r.name}.W",
                          xavier_init(rng, (dims[r.dst_type], hidden_dim), dtype))
                self._add(f"{prefix}l{layer}.{r.name}.b",
                          np.zeros(hidden_dim, dtype=dtype))
        self.prefix = prefix

    def _add(self, name: str, data: np.ndarray) -> None:
        param = Parameter(name, data)
        self._params.append(param)
        self._by_name[name] = param

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def param(self, name: str) -> Parameter:
        return self._by_name[name]

    def __call__(self, tape: Tape,
                 features: dict[str, Value]) -> dict[str, Value]:
        h = dict(features)
        for layer in range(self.num_layers):
            nxt: dict[str, Value] = {}
            for t in self.graph.node_types:
                w = tape.watch(self.param(f"{self.prefix}l{layer}.{t.name}.W"))
                b = tape.watch(self.param(f"{self.prefix}l{layer}.{t.name}.b"))
                acc = tape.add_bias(tape.matmul(h[t.name], w), b)
                for r in self.graph.outgoing_relations(t.name):
                    rw = tape.watch(self.param(f"{self.prefix}l{layer}.{r.name}.W"))
                    rb = tape.watch(self.param(f"{self.prefix}l{layer}.{r.name}.b"))
                    msg = tape.add_bias(tape.matmul(h[r.dst_type], rw), rb)
                    acc = tape.add(acc, tape.spmm(self.neighbor_mean[r.name], msg))
                nxt[t.name] = tape.elu(acc)
            h = nxt
        return h
