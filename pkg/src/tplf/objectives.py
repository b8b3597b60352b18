"""Pre-finetuning losses: InfoNCE with in-batch negatives and token cross-entropy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import Encoder, encode_tokens, l2_normalize, pool_mean
from .errors import ConfigurationError, EmptySupervisionError
from .tokenizer import TokenBatch

IGNORE_INDEX = -100
DEFAULT_TEMPERATURE = 0.05


@dataclass
class ContrastiveBatch:
    anchors: TokenBatch
    positives: TokenBatch

    def __post_init__(self):
        if len(self.anchors) != len(self.positives):
            raise ConfigurationError("anchors and positives must be aligned one-to-one")

    def __len__(self) -> int:
        return len(self.anchors)


@dataclass
class TokenLabeledBatch:
    tokens: TokenBatch
    labels: torch.Tensor  # (batch, seq_len), class id or IGNORE_INDEX

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.labels.shape != self.tokens.token_ids.shape:
            raise ConfigurationError(
                f"labels {tuple(self.labels.shape)} do not match tokens {tuple(self.tokens.token_ids.shape)}"
            )
        if ((self.tokens.attention_mask == 0) & (self.labels != IGNORE_INDEX)).any():
            raise ConfigurationError("padding positions must carry the ignore label")

    def __len__(self) -> int:
        return len(self.tokens)


def info_nce(z: torch.Tensor, z_plus: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Mean over anchors of ``-log softmax_j(<z_i, z+_j> / tau)[i]``.

    The denominator runs over every positive in the batch (in-batch
    negatives); anchors are never negatives for one another.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be > 0")
    if z.shape[0] == 0:
        raise ConfigurationError("InfoNCE needs a non-empty batch")
    if z.shape != z_plus.shape:
        raise ConfigurationError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_plus.shape)}")
    z, z_plus = _ensure_unit(z), _ensure_unit(z_plus)
    logits = z @ z_plus.T / temperature
    row_max = logits.max(dim=1, keepdim=True).values.detach()
    shifted = logits - row_max
    log_denom = torch.log(torch.exp(shifted).sum(dim=1))
    return (log_denom - shifted.diagonal()).mean()


def _ensure_unit(z: torch.Tensor, tol: float = 1e-3) -> torch.Tensor:
    norms = z.detach().norm(dim=-1)
    if ((norms - 1).abs() > tol).any():
        warnings.warn("InfoNCE input not L2-normalized; renormalizing", stacklevel=3)
        return l2_normalize(z)
    return z


def token_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    k = logits.shape[-1]
    if k < 2:
        raise ConfigurationError("token classification needs at least 2 classes")
    labels = torch.as_tensor(labels, dtype=torch.long)
    keep = labels != ignore_index
    if not keep.any():
        raise EmptySupervisionError("empty supervision: every position carries the ignore label")
    gold = labels[keep]
    if (gold < 0).any() or (gold >= k).any():
        raise ConfigurationError(f"label outside [0, {k})")
    log_probs = F.log_softmax(logits[keep], dim=-1)
    return -log_probs.gather(1, gold.unsqueeze(1)).mean()


def ner_linear_head(token_embeddings: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    return F.linear(token_embeddings, weight, bias)


class TokenHead(nn.Module):
    """Linear token classifier, zero-initialized bias."""

    def __init__(self, hidden_dim: int, num_classes: int, seed: int = 0, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        w = torch.empty(num_classes, hidden_dim, dtype=dtype)
        nn.init.trunc_normal_(w, std=0.02, a=-0.04, b=0.04, generator=gen)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(num_classes, dtype=dtype))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        return ner_linear_head(token_embeddings, self.weight, self.bias)


def sentence_embeddings(encoder: Encoder, batch: TokenBatch, adapters=None, task: str | None = None,
                        mode: str = "train") -> torch.Tensor:
    tokens = encode_tokens(batch, encoder, adapters, task, mode)
    return l2_normalize(pool_mean(tokens, batch.attention_mask))


def contrastive_loss(encoder: Encoder, batch: ContrastiveBatch, adapters=None, task: str | None = "TC",
                     temperature: float = DEFAULT_TEMPERATURE, mode: str = "train") -> torch.Tensor:
    z = sentence_embeddings(encoder, batch.anchors, adapters, task, mode)
    z_plus = sentence_embeddings(encoder, batch.positives, adapters, task, mode)
    return info_nce(z, z_plus, temperature)


def token_loss(encoder: Encoder, head: TokenHead, batch: TokenLabeledBatch, adapters=None,
               task: str | None = "NER", mode: str = "train") -> torch.Tensor:
    tokens = encode_tokens(batch.tokens, encoder, adapters, task, mode)
    return token_cross_entropy(head(tokens), batch.labels)
