"""Desk-scale mini-model adaptation workbench.

Cross-lingual transfer for masked language models via shallow aligned
mini-models, with exact analytic compute accounting.
"""

__version__ = "0.1.0"

from .autodiff import Adam, Parameter, Tape, Tensor, backward, trace  # noqa: F401
from .flopsmeter import (  # noqa: F401
    CostReport,
    FlopsSpec,
    flops_adapt,
    flops_forward,
    flops_minipost_build,
    flops_pretrain,
    flops_pretrain_dual,
    interpolate_cost_to_score,
    near_max_target,
    speedup_report,
)
from .model import MaskedBatch, ModelConfig, TransformerModel  # noqa: F401
from .pipeline import AdaptationPlan, overlap_init, run_step1, run_step2, run_step3_step4  # noqa: F401
from .surgery import EmbeddingBundle, FreezeSpec, build_minipost, extract_minijoint, swap_embeddings  # noqa: F401
from .training import TrainConfig, TrainingCurve, load_checkpoint, save_checkpoint, train_mlm  # noqa: F401
