"""Adaptive token pruning and pooling for vision transformers."""

from .compress import (
    CompressionSchedule,
    Policy,
    PolicyDecision,
    bsm_merge,
    compress_stage,
    dpc_merge,
    prune_topk,
    select_policy,
    significance_scores,
)
from .engine import (
    PRESETS,
    ModelConfig,
    ModelWeights,
    attention_forward,
    block_forward,
    forward_tokens,
    model_forward,
    patch_embed,
)
from .estimator import PPTClassifier
from .flops import FlopsReport, block_flops, model_flops
from .tokens import AttentionByproducts, TokenBatch
from .trace import (
    LayerTrace,
    MergeMap,
    TraceReport,
    flatten_provenance,
    render_patch_map,
    variance_series,
)

__version__ = "0.1.0"
