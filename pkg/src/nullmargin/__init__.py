"""Semi-supervised cross-view metric learning.

Learns a discriminative space that collapses each class to a point (null
projecting directions) and separates the points with a kernel maximum margin
criterion, then grows the labeled set by mining mutual cross-view neighbor
pairs from unlabeled data and refitting recursively. Evaluation is CMC rank
accuracy under a probe/gallery protocol.
"""

__version__ = "0.1.0"

from .dataio import (
    ExperimentSplit,
    FeatureTable,
    SplitSpec,
    SyntheticSpec,
    concat_tables,
    generate_synthetic,
    load_feature_table,
    make_split,
    save_feature_table,
)
from .evaluation import CmcCurve, ProtocolResult, cmc, rank_gallery, run_protocol
from .kmmc import (
    KernelDiscriminantModel,
    KernelSpec,
    fit_nkmmc,
    gram,
    project_kernel,
    resolve_bandwidth,
)
from .mining import (
    AnchorContext,
    NeighborSets,
    PseudoClass,
    build_anchor_context,
    fit_secondary,
    k_reciprocal,
    knn,
    mine_pseudo_classes,
    select_anchor,
)
from .nfst import NullProjector, fit_nfst, project_null
from .nk3ml import (
    Nk3mlModel,
    embed,
    fit_nk3ml,
    load_model,
    model_checksum,
    save_model,
)
from .scatter import ScatterStats, compute_scatter, fisher_value
from .selftrain import LoopConfig, LoopTrace, run_self_training

__all__ = [
    "AnchorContext",
    "CmcCurve",
    "ExperimentSplit",
    "FeatureTable",
    "KernelDiscriminantModel",
    "KernelSpec",
    "LoopConfig",
    "LoopTrace",
    "NeighborSets",
    "Nk3mlModel",
    "NullProjector",
    "ProtocolResult",
    "PseudoClass",
    "ScatterStats",
    "SplitSpec",
    "SyntheticSpec",
    "build_anchor_context",
    "cmc",
    "compute_scatter",
    "concat_tables",
    "embed",
    "fisher_value",
    "fit_nfst",
    "fit_nk3ml",
    "fit_nkmmc",
    "fit_secondary",
    "generate_synthetic",
    "gram",
    "k_reciprocal",
    "knn",
    "load_feature_table",
    "load_model",
    "make_split",
    "mine_pseudo_classes",
    "model_checksum",
    "project_kernel",
    "project_null",
    "rank_gallery",
    "resolve_bandwidth",
    "run_protocol",
    "run_self_training",
    "save_feature_table",
    "save_model",
    "select_anchor",
]
