"""End-to-end analogy transformer: prompts, gated attention, losses, training."""

from .losses import LossBreakdown, mem_loss, relaxation_loss, total_loss
from .model import Batch, MartConfig, MartLayer, MartModel, collate, gate_matrix, gated_attention
from .prompts import (
    EXAMPLE,
    QUESTION,
    MaskTarget,
    PromptError,
    PromptSequence,
    Vocabulary,
    build_analogy_prompt,
    build_pretrain_prompt,
)
from .train import (
    MartTrainConfig,
    TrainingError,
    finetune,
    load_mart,
    new_model,
    predict_answer,
    pretrain,
    rank_instances,
    save_mart,
)

__all__ = [
    "Batch", "EXAMPLE", "LossBreakdown", "MartConfig", "MartLayer", "MartModel", "MartTrainConfig", "MaskTarget",
    "PromptError", "PromptSequence", "QUESTION", "TrainingError", "Vocabulary", "build_analogy_prompt",
    "build_pretrain_prompt", "collate", "finetune", "gate_matrix", "gated_attention", "load_mart", "mem_loss",
    "new_model", "predict_answer", "pretrain", "rank_instances", "relaxation_loss", "save_mart", "total_loss",
]
