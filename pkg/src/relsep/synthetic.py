"""Synthetic heterogeneous graphs with planted class structure.

Target nodes get round-robin class labels; each attribute node type is
wired to targets by a planted-partition rule whose class affinity is
tunable per type, so relations range from strongly homophilic to pure
noise. Features are class-mean one-hot vectors plus Gaussian noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hetgraph import GraphError, HeteroGraph, NodeType, Relation, build_graph


@dataclass(frozen=True)
class AttributeSpec:
    """One attribute node type: its size and how strongly it tracks class."""
    count: int
    affinity: float = 1.0

    def __post_init__(self):
        if self.count <= 0:
            raise GraphError(f"attribute count must be positive, got {self.count}")
        if not 0.0 <= self.affinity <= 1.0:
            raise GraphError(f"affinity must lie in [0, 1], got {self.affinity}")


@dataclass(frozen=True)
class SyntheticConfig:
    num_target_nodes: int = 600
    num_classes: int = 3
    attributes: tuple[AttributeSpec, ...] = (AttributeSpec(90), AttributeSpec(90))
    p_in: float = 0.2
    p_out: float = 0.02
    feature_dim: int = 32
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_target_nodes <= 0:
            raise GraphError("num_target_nodes must be positive")
        if self.num_classes <= 0:
            raise GraphError("num_classes must be positive")
        if not self.attributes:
            raise GraphError("need at least one attribute type")
        for p, label in ((self.p_in, "p_in"), (self.p_out, "p_out")):
            if not 0.0 <= p <= 1.0:
                raise GraphError(f"{label} must lie in [0, 1], got {p}")
        if self.feature_dim <= 0:
            raise GraphError("feature_dim must be positive")
        if self.noise_sigma < 0:
            raise GraphError("noise_sigma must be >= 0")

    def to_json(self) -> str:
        payload = {
            "num_target_nodes": self.num_target_nodes,
            "num_classes": self.num_classes,
            "attributes": [{"count": a.count, "affinity": a.affinity}
                           for a in self.attributes],
            "p_in": self.p_in,
            "p_out": self.p_out,
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticConfig":
        raw = json.loads(text)
        known = {"num_target_nodes", "num_classes", "attributes", "p_in",
                 "p_out", "feature_dim", "noise_sigma", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise GraphError(f"unknown generator fields: {sorted(unknown)}")
        attrs = raw.pop("attributes", None)
        if attrs is not None:
            raw["attributes"] = tuple(AttributeSpec(**a) for a in attrs)
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def generate_synthetic(config: SyntheticConfig) -> HeteroGraph:
    """Sample a labeled heterogeneous graph from the planted model.

    Edge (t, a) appears with probability p_out + affinity * (p_in - p_out)
    when t and a share a class, p_out otherwise. Deterministic given the
    config seed; edges are listed in (target, attribute) row-major order.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    n, c = config.num_target_nodes, config.num_classes
    labels = np.arange(n, dtype=np.int64) % c

    node_types = [NodeType("target", n, config.feature_dim)]
    relations = []
    features = {"target": _class_features(labels, config, rng)}

    for k, spec in enumerate(config.attributes):
        name = f"attr{k}"
        node_types.append(NodeType(name, spec.count, config.feature_dim))
        attr_labels = np.arange(spec.count, dtype=np.int64) % c
        p_match = config.p_out + spec.affinity * (config.p_in - config.p_out)
        match = labels[:, None] == attr_labels[None, :]
        prob = np.where(match, p_match, config.p_out)
        hit = rng.random((n, spec.count)) < prob
        src, dst = np.nonzero(hit)
        edges = np.stack([src, dst], axis=1).astype(np.int64)
        relations.append(Relation(f"target-{name}", "target", name, edges))
        features[name] = _class_features(attr_labels, config, rng)

    return build_graph(node_types, relations, features, "target", labels, c,
                       allow_empty_relations=True)


def _class_features(labels: np.ndarray, config: SyntheticConfig,
                    rng: np.random.Generator) -> np.ndarray:
    means = np.zeros((config.num_classes, config.feature_dim))
    for cls in range(config.num_classes):
        means[cls, cls % config.feature_dim] = 1.0
    noise = rng.normal(0.0, config.noise_sigma, (labels.size, config.feature_dim))
    return means[labels] + noise


def xavier_random_features(graph: HeteroGraph, dim: int, seed: int) -> HeteroGraph:
    """Replace every type's features with uniform draws in +-sqrt(6 / (2 dim)).

    Used to probe how much of downstream quality survives without real
    attributes. Deterministic given the seed; types are filled in
    declaration order from one stream.
    """
    if dim <= 0:
        raise GraphError(f"random feature dim must be positive, got {dim}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, dim])))
    bound = math.sqrt(6.0 / (dim + dim))
    types = [NodeType(t.name, t.count, dim) for t in graph.node_types]
    features = {t.name: rng.uniform(-bound, bound, (t.count, dim))
                for t in types}
    return build_graph(
        types,
        [Relation(r.name, r.src_type, r.dst_type, r.edges)
         for r in graph.base_relations()],
        features,
        graph.target_type,
        graph.labels,
        graph.num_classes,
        splits=graph.splits,
        allow_empty_relations=True,
    )
