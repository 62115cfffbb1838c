"""Relation-aware separation of homophilic and heterophilic structure."""

from .hetgraph import (
    DualHypergraph,
    GraphError,
    HeteroGraph,
    IncidenceMatrix,
    NodeType,
    Relation,
    build_graph,
    build_incidence,
    dual_transform,
    perturb_edges,
)
from .dataio import FormatError, load_graph, save_graph
from .synthetic import (
    AttributeSpec,
    SyntheticConfig,
    generate_synthetic,
    xavier_random_features,
)

__version__ = "0.1.0"

__all__ = [
    "AttributeSpec",
    "DualHypergraph",
    "FormatError",
    "GraphError",
    "HeteroGraph",
    "IncidenceMatrix",
    "NodeType",
    "Relation",
    "SyntheticConfig",
    "build_graph",
    "build_incidence",
    "dual_transform",
    "generate_synthetic",
    "load_graph",
    "perturb_edges",
    "save_graph",
    "xavier_random_features",
    "__version__",
]
