"""Multi-scale alignment for text-based person search, on numpy."""

from .crossmodal import (
    AttentionState,
    ProjectionParams,
    Temperatures,
    batch_similarity,
    export_attention,
    pair_similarity_i2t,
    pair_similarity_t2i,
)
from .features import (
    FeatureMap,
    FeatureSet,
    ScaleTag,
    build_visual_feature_set,
    l2_normalize,
    partition_stripes,
    shuffle_stripes,
    split_and_shuffle,
)
from .locality import Span, build_locality_mask, masked_attention, split_subsentences
from .objectives import (
    AdamState,
    Batch,
    LossWeights,
    MatchLabels,
    NumericError,
    ObjectiveConfig,
    adam_step,
    cmpc,
    cmpm,
    csal,
    gradients,
    total_loss,
)
from .retrieval import (
    GalleryIndex,
    NeighborSet,
    RankedList,
    jaccard_distance,
    query_knn,
    rank_gallery,
    rerank_rvn,
    topk_accuracy,
    visual_knn,
)

__version__ = "0.1.0"
