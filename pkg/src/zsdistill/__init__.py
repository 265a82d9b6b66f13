"""Contrastive two-tower training with EMA self-distillation and zero-shot evaluation."""

from .core import l2_normalize_rows, logsumexp_row, matmul, stable_softmax_rows
from .losses import (
    LossReport,
    ProbabilityPair,
    combined_loss,
    infonce_loss,
    kl_distillation_loss,
    match_probabilities,
    similarity_logits,
)
from .model import EmaTeacher, TowerParams, TwoTowerModel, ema_init, ema_update, forward, init_model
from .optim import CosineSchedule, SgdState, lr_at, sgd_step
from .train import TrainConfig, gather_embeddings, load_checkpoint, save_checkpoint, train, train_step
from .zeroshot import (
    LabelIndex,
    PromptTemplate,
    apply_prompt,
    build_label_index,
    evaluate,
    flat_hit_at_k,
    knn_predict,
)

__version__ = "0.1.0"
