"""Trainable representation pooling at desk scale.

Reverse-mode float64 autodiff, a successive-halving soft top-k operator with
exact gradients to rows and scores, the scoring-function family, blockwise
attention encoder-decoder models, analytic attention op counting, and a
benchmark CLI (`reppool-bench`).
"""

from .autodiff import (
    AdamState,
    GradCheckReport,
    Gradients,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    check_gradients,
    constant,
    elementwise,
    finite_diff_grad,
    matmul,
    row_softmax,
)
from .attention import (
    AttentionConfig,
    blockwise_self_attention,
    decoder_layer,
    encoder_layer,
    scaled_dot_attention,
    sinusoidal_positions,
)
from .complexity import ArchSpec, OpCountReport, attn_mults, compare, pyramid_memory
from .models import (
    EncodeResult,
    ModelConfig,
    PooledEncoderDecoder,
    PoolSchedule,
    TaskConfig,
    TrainReport,
    make_needle_example,
    needle_model_config,
    ranking_auc,
    train_toy,
)
from .scorers import ScorerSpec, compute_scores, init_scorer_params, window_pool
from .topk import (
    PairRecords,
    PoolConfig,
    PooledBatch,
    hard_topk,
    iterative_soft_topk,
    nccs,
    peaked_softmax_pair,
    sort_by_score,
    successive_halving_topk,
    tournament_round,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ArchSpec",
    "AttentionConfig",
    "EncodeResult",
    "GradCheckReport",
    "Gradients",
    "ModelConfig",
    "OpCountReport",
    "PairRecords",
    "PoolConfig",
    "PoolSchedule",
    "PooledBatch",
    "PooledEncoderDecoder",
    "ScorerSpec",
    "ShapeError",
    "Tape",
    "TaskConfig",
    "Tensor",
    "TrainReport",
    "adam_step",
    "attn_mults",
    "backward",
    "blockwise_self_attention",
    "check_gradients",
    "compare",
    "compute_scores",
    "constant",
    "decoder_layer",
    "elementwise",
    "encoder_layer",
    "finite_diff_grad",
    "hard_topk",
    "init_scorer_params",
    "iterative_soft_topk",
    "make_needle_example",
    "matmul",
    "nccs",
    "needle_model_config",
    "peaked_softmax_pair",
    "pyramid_memory",
    "ranking_auc",
    "row_softmax",
    "scaled_dot_attention",
    "sinusoidal_positions",
    "sort_by_score",
    "successive_halving_topk",
    "tournament_round",
    "train_toy",
    "window_pool",
]
