"""Low-rank matching attention for multimodal feature fusion."""

from .attention import (
    LmamModule,
    MatchingAttentionLayer,
    Mode,
    SelfAttentionLayer,
    ValueSource,
    lmam_forward,
    matching_attention_forward,
    matching_scores,
    pad_ones,
    self_attention_forward,
)
from .baselines import FUSION_METHODS, fusion_parameter_count, make_fusion
from .lowrank import (
    DenseWeight,
    LowRankWeight,
    apply,
    fit_rank_r,
    parameter_count_dense,
    parameter_count_lowrank,
    parameter_count_self_attention,
    reconstruct,
)

__version__ = "0.1.0"
