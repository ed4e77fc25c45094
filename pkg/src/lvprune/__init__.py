"""Language-guided vision-token pruning for a toy multi-modal decoder.

Cross-attention decision modules score vision tokens against text tokens
and prune them progressively during the forward pass; an analytic cost
model quantifies the compute savings.  See the README for the CLI and the
verification suite.
"""

from .numerics import (
    DegenerateRowError,
    DimensionError,
    SeededRng,
    Tensor,
    finite_diff_check,
    sample_gumbel,
)
from .pruning import (
    DecisionModuleParams,
    KeepScores,
    PruneDecision,
    PruneSchedule,
    NoTextTokensError,
    ScheduleInfeasibleError,
    TokenLayout,
    build_attention_mask,
    combine_decisions,
    decision_module_forward,
    gumbel_decision,
    init_decision_module,
    kept_count,
    reindex_positions,
    select_top_k,
)
from .model import (
    BackboneParams,
    ForwardTrace,
    ToyMllmConfig,
    embed_inputs,
    forward_infer,
    forward_train,
    init_backbone,
    verify_equivalence,
)
from .training import (
    DivergenceError,
    LossConfig,
    OptimizerConfig,
    SyntheticSample,
    SyntheticSpec,
    causal_lm_loss,
    clip_grad_norm,
    evaluate_accuracy,
    lr_at,
    make_synthetic_dataset,
    pretrain_backbone,
    ratio_loss,
    total_loss,
    train_decision_modules,
)
from .cost import (
    ArchitectureSpec,
    CostReport,
    InputSpec,
    decision_module_flops,
    decoder_layer_flops,
    pipeline_flops,
    reduction_sweep,
)

__version__ = "0.1.0"
