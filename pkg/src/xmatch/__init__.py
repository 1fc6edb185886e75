"""Weakly-supervised cross-modal identity association over frozen embeddings."""

from .asymmetry import LossBundle, PerturbConfig, consistency_loss, perturb, total_loss
from .batch_relations import (
    LossWithGrad,
    batch_relation_loss,
    binarize,
    cosine_sim_matrix,
    infonce_loss,
    intersect,
    sdm_loss,
    soften_targets,
    target_distribution,
)
from .errors import XMatchError
from .global_relations import (
    CandidateSets,
    ExtendedSimilarity,
    MemoryBank,
    build_extended_similarity,
    global_sdm_loss,
    global_targets,
    mine_candidates,
)
from .io import (
    DatasetBundle,
    EmbeddingMatrix,
    Manifest,
    generate_synthetic,
    l2_normalize,
    load_bundle,
    load_embeddings,
    load_labels,
    save_bundle,
    save_embeddings,
    save_labels,
)
from .metrics import (
    MetricsReport,
    RankingResult,
    association_precision,
    cmc,
    evaluate_retrieval,
    mean_ap,
    mean_inp,
    rank_gallery,
)
from .model import (
    CrossModalAdapter,
    HyperParams,
    LinearAdapter,
    TrainReport,
    grad_check,
    train,
)
from .optim import AdamState, lr_schedule

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CandidateSets",
    "CrossModalAdapter",
    "DatasetBundle",
    "EmbeddingMatrix",
    "ExtendedSimilarity",
    "HyperParams",
    "LinearAdapter",
    "LossBundle",
    "LossWithGrad",
    "Manifest",
    "MemoryBank",
    "MetricsReport",
    "PerturbConfig",
    "RankingResult",
    "TrainReport",
    "XMatchError",
    "association_precision",
    "batch_relation_loss",
    "binarize",
    "build_extended_similarity",
    "cmc",
    "consistency_loss",
    "cosine_sim_matrix",
    "evaluate_retrieval",
    "generate_synthetic",
    "global_sdm_loss",
    "global_targets",
    "grad_check",
    "infonce_loss",
    "intersect",
    "l2_normalize",
    "load_bundle",
    "load_embeddings",
    "load_labels",
    "lr_schedule",
    "mean_ap",
    "mean_inp",
    "mine_candidates",
    "perturb",
    "rank_gallery",
    "save_bundle",
    "save_embeddings",
    "save_labels",
    "sdm_loss",
    "soften_targets",
    "target_distribution",
    "total_loss",
    "train",
]
