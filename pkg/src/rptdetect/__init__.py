"""Related-party-transaction guided tax-evasion detection on heterogeneous graphs."""

from .hetgraph import (
    EdgeType,
    HetGraph,
    Schema,
    degree_histogram,
    load_graph,
    load_labels,
    save_graph,
    save_labels,
    validate_labels,
)
from .matcher import (
    NeighborIndex,
    RptInstance,
    build_neighbor_index,
    enumerate_instances,
    k_order_neighbors,
    metapath_neighbors,
)
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_params,
    save_params,
)
from .patterns import BUNDLED_METAPATHS, RptPattern, bundled_patterns, load_patterns
from .stats import evasion_ratio_stats
from .synth import GenConfig, export, generate
from .training import (
    Metrics,
    TrainConfig,
    adam_step,
    evaluate,
    split_dataset,
    timing_sweep,
    train,
    train_downstream_classifier,
)

__version__ = "0.1.0"

__all__ = [
    "BUNDLED_METAPATHS",
    "EdgeType",
    "GenConfig",
    "HetGraph",
    "Metrics",
    "ModelConfig",
    "ModelParams",
    "NeighborIndex",
    "RptInstance",
    "RptPattern",
    "Schema",
    "TrainConfig",
    "adam_step",
    "build_neighbor_index",
    "bundled_patterns",
    "degree_histogram",
    "enumerate_instances",
    "evaluate",
    "evasion_ratio_stats",
    "export",
    "forward",
    "generate",
    "init_params",
    "k_order_neighbors",
    "load_graph",
    "load_labels",
    "load_params",
    "load_patterns",
    "metapath_neighbors",
    "save_graph",
    "save_labels",
    "save_params",
    "split_dataset",
    "timing_sweep",
    "train",
    "train_downstream_classifier",
    "validate_labels",
]
