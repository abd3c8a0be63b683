"""Token-layout design laboratory for generative recommendation.

Design, validate, train, and score token layouts for autoregressive
recommendation models: which channels (item ids, action values) feed each
token and which the token predicts.  The validator checks the three layout
principles symbolically; the rest of the package measures what the principles
predict, on a numpy transformer small enough to read end to end.
"""

from .costs import (
    CostReport, attention_share, attn_edges, cost_report, exact_attn_edges,
    ratio_attn, ratio_linear, training_flops_ratio, verify_edge_formula,
)
from .data import (
    Interaction, ItemVocab, Split, UserSequence, apply_vocab, batch_by_tokens,
    index_items, k_core_filter, load_interactions, save_interactions,
    split_last_day, split_leave_one_out, subsystem_seed,
)
from .inference import (
    AttentionProbe, ScoreTable, attention_probe, probe_items,
    real_item_log_softmax, retrieve_topk, score_parallel,
    score_sequential_oracle,
)
from .layouts import (
    ACT_NONE, ACT_SENTINEL, ACT_VALUE, ANTI_PATTERNS, Arrangement, ChannelRef,
    Conditioning, Kind, LayoutSpec, N_RESERVED, PAD_ID, PRESETS, SENTINEL_ID,
    TokenizedSequence, UNK_ID, action, item, preset, token_count, tokenize,
)
from .masks import VisibilityMask, build_mask, count_mask_edges
from .metrics import EvalReport, evaluate, hit_rate, ndcg_at, rank_of, rmse
from .model import (
    ActionStats, ForwardResult, Model, ModelConfig, TokenBatch, assemble_loss,
    collate, load_checkpoint, save_checkpoint,
)
from .optim import Adam, AdamConfig
from .synthetic import (
    GroundTruth, SyntheticConfig, discretize, generate_synthetic,
    mi_next_item_gain, plugin_mi, to_records,
)
from .tensor import Tensor
from .training import (
    TrainConfig, TrainResult, build_model, fit_stats, tokenize_corpus, train,
    training_action_rmse,
)
from .validation import (
    CondSet, ValidationReport, concrete_leaks, conditioning_set, dominates,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "ACT_NONE", "ACT_SENTINEL", "ACT_VALUE", "ANTI_PATTERNS", "ActionStats",
    "Adam", "AdamConfig", "Arrangement", "AttentionProbe", "ChannelRef",
    "CondSet", "Conditioning", "CostReport", "EvalReport", "ForwardResult",
    "GroundTruth", "Interaction", "ItemVocab", "Kind", "LayoutSpec", "Model",
    "ModelConfig", "N_RESERVED", "PAD_ID", "PRESETS", "SENTINEL_ID",
    "ScoreTable", "Split", "SyntheticConfig", "Tensor", "TokenBatch",
    "TokenizedSequence", "TrainConfig", "TrainResult", "UNK_ID",
    "UserSequence", "ValidationReport", "VisibilityMask", "action",
    "apply_vocab", "assemble_loss", "attention_probe", "attention_share",
    "attn_edges", "batch_by_tokens", "build_mask", "build_model", "collate",
    "concrete_leaks", "conditioning_set", "cost_report", "count_mask_edges",
    "discretize", "dominates", "evaluate", "exact_attn_edges", "fit_stats",
    "generate_synthetic", "hit_rate", "index_items", "item", "k_core_filter",
    "load_checkpoint", "load_interactions", "mi_next_item_gain", "ndcg_at",
    "plugin_mi", "preset", "probe_items", "rank_of", "ratio_attn",
    "ratio_linear", "real_item_log_softmax", "retrieve_topk", "rmse",
    "save_checkpoint", "save_interactions", "score_parallel",
    "score_sequential_oracle", "split_last_day", "split_leave_one_out",
    "subsystem_seed", "to_records", "token_count", "tokenize",
    "tokenize_corpus", "train", "training_action_rmse", "training_flops_ratio",
    "validate", "verify_edge_formula",
]
