"""Per-edge relation importance weights learned on the edge-to-node dual.

Each directed relation gets its own scoring head: edge features are the
concatenation of the two endpoint embeddings, smoothed by one
convolution over the dual hypergraph (edges that share an endpoint
exchange information, weighted by the endpoint's degree), then scored
by a linear readout. During training, scores pass through a sigmoid
with additive logistic noise so weights stay stochastic but
differentiable; at evaluation the noise is dropped.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .autodiff import Parameter, Tape, TapeError, Value
from .encoder import xavier_init
from .hetgraph import HeteroGraph, build_incidence, dual_transform

NOISE_CLAMP = 1e-4


def propagation_matrix(graph: HeteroGraph, relation_name: str,
                       dtype=np.float64) -> sp.csr_matrix:
    """Edge-to-edge smoothing operator of one relation's dual hypergraph.

    With incidence M, dual nodes have degree exactly 2 and hyperedge k
    has degree deg(k), the original node degree, so the normalized
    one-step operator collapses to 0.5 * M^T diag(1/deg) M (zero-degree
    nodes contribute nothing). Rows sum to 1 for every edge.
    """
    dual = dual_transform(build_incidence(graph,
                                          graph.relation_by_name(relation_name)))
    deg = dual.hyperedge_degrees.astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    prop = 0.5 * (dual.mbar @ sp.diags(inv) @ dual.mbar.T)
    return prop.astype(dtype).tocsr()


def logistic_noise(num: int, epoch: int, relation_index: int, seed: int,
                   dtype=np.float32, clamp: float = NOISE_CLAMP) -> np.ndarray:
    """Additive noise log(u) - log(1 - u) with u uniform on the clamped
    unit interval. Deterministic given (seed, epoch, relation_index)."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, epoch, relation_index])))
    u = rng.uniform(clamp, 1.0 - clamp, num)
    return (np.log(u) - np.log1p(-u)).astype(dtype)


class RelationWeightModel:
    """Per-relation edge scoring heads over the dual hypergraph.

    ``use_dual_conv=False`` ablates the smoothing step and scores raw
    concatenated endpoint features directly.
    """

    def __init__(self, graph: HeteroGraph, embed_dim: int, hidden_dim: int,
                 seed: int, dtype=np.float32, use_dual_conv: bool = True):
        if embed_dim <= 0 or hidden_dim <= 0:
            raise TapeError("embed_dim and hidden_dim must be positive")
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.use_dual_conv = use_dual_conv
        self.relation_order = [r.name for r in graph.relations]
        self.propagation = {
            r.name: propagation_matrix(graph, r.name, dtype)
            for r in graph.relations} if use_dual_conv else {}
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        self._params: list[Parameter] = []
        self._by_name: dict[str, Parameter] = {}
        for r in graph.relations:
            if use_dual_conv:
                self._add(f"hyper.{r.name}.theta",
                          xavier_init(rng, (2 * embed_dim, hidden_dim), dtype))
                self._add(f"hyper.{r.name}.slope",
                          np.array([0.25], dtype=dtype))
                score_in = hidden_dim
            else:
                score_in = 2 * embed_dim
            self._add(f"score.{r.name}.u",
                      xavier_init(rng, (score_in, 1), dtype))
            self._add(f"score.{r.name}.b", np.zeros(1, dtype=dtype))

    def _add(self, name: str, data: np.ndarray) -> None:
        param = Parameter(name, data)
        self._params.append(param)
        self._by_name[name] = param

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def param(self, name: str) -> Parameter:
        return self._by_name[name]

    def edge_features(self, tape: Tape, embeddings: dict[str, Value],
                      relation_name: str) -> Value:
        r = self.graph.relation_by_name(relation_name)
        src = tape.gather_rows(embeddings[r.src_type], r.edges[:, 0])
        dst = tape.gather_rows(embeddings[r.dst_type], r.edges[:, 1])
        return tape.concat_cols(src, dst)

    def scores(self, tape: Tape,
               embeddings: dict[str, Value]) -> dict[str, Value]:
        """Raw per-edge scores for every relation, shape (E,) each."""
        out: dict[str, Value] = {}
        for name in self.relation_order:
            feats = self.edge_features(tape, embeddings, name)
            if self.use_dual_conv:
                theta = tape.watch(self.param(f"hyper.{name}.theta"))
                slope = tape.watch(self.param(f"hyper.{name}.slope"))
                feats = tape.prelu(
                    tape.spmm(self.propagation[name], tape.matmul(feats, theta)),
                    slope)
            u = tape.watch(self.param(f"score.{name}.u"))
            b = tape.watch(self.param(f"score.{name}.b"))
            s = tape.add_bias(tape.matmul(feats, u), b)
            out[name] = tape.reshape(s, (s.shape[0],))
        return out

    def soft_weights(self, tape: Tape, scores: dict[str, Value], tau: float,
                     training: bool, epoch: int = 0, seed: int = 0,
                     clamp: float = NOISE_CLAMP) -> dict[str, Value]:
        """Map scores to (0, 1) edge weights.

        Training draws fresh additive logistic noise per (epoch,
        relation); evaluation is the plain tempered sigmoid.
        """
        if tau <= 0:
            raise TapeError(f"temperature must be positive, got {tau}")
        out: dict[str, Value] = {}
        for idx, name in enumerate(self.relation_order):
            s = scores[name]
            if training:
                noise = logistic_noise(s.shape[0], epoch, idx, seed,
                                       self.dtype, clamp)
                s = tape.add(s, tape.constant(noise))
            out[name] = tape.sigmoid(tape.scale(s, 1.0 / tau))
        return out
