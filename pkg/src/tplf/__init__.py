"""Multi-task pre-finetuning workbench for compact encoders with task-primary LoRA adapters."""

from .encoder import (
    Encoder,
    EncoderConfig,
    SentenceEncoder,
    cosine_similarity,
    encode_tokens,
    gradient_check,
    l2_normalize,
    pool_mean,
)
from .lora import LoraModule, LoraSpec, TaskPrimaryAdapterSet, attach_task_primary, lora_forward, lora_init, lora_merge
from .objectives import ContrastiveBatch, TokenHead, TokenLabeledBatch, info_nce, token_cross_entropy
from .tokenizer import TokenBatch, WordTokenizer
from .trainer import AdamW, PrefinetuneModel, TrainPlan, hierarchical_sample, mtpf_step, pcgrad_project

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ContrastiveBatch",
    "Encoder",
    "EncoderConfig",
    "LoraModule",
    "LoraSpec",
    "PrefinetuneModel",
    "SentenceEncoder",
    "TaskPrimaryAdapterSet",
    "TokenBatch",
    "TokenHead",
    "TokenLabeledBatch",
    "TrainPlan",
    "WordTokenizer",
    "attach_task_primary",
    "cosine_similarity",
    "encode_tokens",
    "gradient_check",
    "hierarchical_sample",
    "info_nce",
    "l2_normalize",
    "lora_forward",
    "lora_init",
    "lora_merge",
    "mtpf_step",
    "pcgrad_project",
    "pool_mean",
    "token_cross_entropy",
]
