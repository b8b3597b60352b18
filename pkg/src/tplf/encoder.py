"""Compact BERT-style transformer encoder, pooling helpers and a gradient checker."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    ConfigurationError,
    DegenerateEmbeddingError,
    EmptySequenceError,
    NumericInstabilityError,
)
from .tokenizer import TokenBatch

EPS_NORM = 1e-12
INIT_STD = 0.02
PROJECTIONS = ("query", "key", "value", "output", "ffn_in", "ffn_out")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 128
    max_seq_len: int = 64
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigurationError("num_layers must be >= 0")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 1:
            raise ConfigurationError("max_seq_len must be >= 1")
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must be >= 4 (pad, unk, cls, sep)")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1]")

    @classmethod
    def minilm_like(cls, vocab_size: int, **kw) -> "EncoderConfig":
        return cls(num_layers=12, hidden_dim=384, num_heads=12, ffn_dim=1536,
                   vocab_size=vocab_size, max_seq_len=512, **kw)

    @classmethod
    def distilbert_like(cls, vocab_size: int, **kw) -> "EncoderConfig":
        return cls(num_layers=6, hidden_dim=768, num_heads=12, ffn_dim=3072,
                   vocab_size=vocab_size, max_seq_len=512, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _trunc_normal(shape, generator, dtype) -> nn.Parameter:
    t = torch.empty(shape, dtype=dtype)
    nn.init.trunc_normal_(t, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)
    return nn.Parameter(t)


class Linear(nn.Module):
    """Affine map ``y = x W^T + b`` with the workbench's init scheme."""

    def __init__(self, in_dim: int, out_dim: int, generator: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.weight = _trunc_normal((out_dim, in_dim), generator, dtype)
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias)


class EncoderLayer(nn.Module):
    """Post-LN transformer block; every projection can carry a LoRA delta."""

    def __init__(self, config: EncoderConfig, generator: torch.Generator, dtype=torch.float32):
        super().__init__()
        d, f = config.hidden_dim, config.ffn_dim
        self.num_heads = config.num_heads
        self.dropout_rate = config.dropout_rate
        self.query = Linear(d, d, generator, dtype)
        self.key = Linear(d, d, generator, dtype)
        self.value = Linear(d, d, generator, dtype)
        self.output = Linear(d, d, generator, dtype)
        self.ffn_in = Linear(d, f, generator, dtype)
        self.ffn_out = Linear(f, d, generator, dtype)
        self.ln_attn = nn.LayerNorm(d, dtype=dtype)
        self.ln_ffn = nn.LayerNorm(d, dtype=dtype)

    def _proj(self, name: str, x: torch.Tensor, loras: Mapping) -> torch.Tensor:
        y = getattr(self, name)(x)
        lora = loras.get(name)
        if lora is not None:
            y = y + lora.delta(x)
        return y

    def forward(self, h: torch.Tensor, attn_bias: torch.Tensor, loras: Mapping) -> torch.Tensor:
        b, t, d = h.shape
        nh = self.num_heads
        hd = d // nh

        def heads(x):
            return x.view(b, t, nh, hd).transpose(1, 2)

        q = heads(self._proj("query", h, loras))
        k = heads(self._proj("key", h, loras))
        v = heads(self._proj("value", h, loras))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd) + attn_bias
        probs = F.dropout(torch.softmax(scores, dim=-1), self.dropout_rate, self.training)
        ctx = (probs @ v).transpose(1, 2).reshape(b, t, d)
        attn = F.dropout(self._proj("output", ctx, loras), self.dropout_rate, self.training)
        h = self.ln_attn(h + attn)
        ff = F.gelu(self._proj("ffn_in", h, loras))
        ff = F.dropout(self._proj("ffn_out", ff, loras), self.dropout_rate, self.training)
        return self.ln_ffn(h + ff)


class Encoder(nn.Module):
    """The shared backbone. Parameters are the module's ``named_parameters``."""

    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d = config.hidden_dim
        self.token_embeddings = _trunc_normal((config.vocab_size, d), gen, dtype)
        self.position_embeddings = _trunc_normal((config.max_seq_len, d), gen, dtype)
        self.layers = nn.ModuleList(EncoderLayer(config, gen, dtype) for _ in range(config.num_layers))

    @property
    def dtype(self) -> torch.dtype:
        return self.token_embeddings.dtype

    def forward(self, batch: TokenBatch, adapters=None, task: str | None = None) -> torch.Tensor:
        ids, mask = batch.token_ids, batch.attention_mask
        bsz, seq_len = ids.shape
        if seq_len > self.config.max_seq_len:
            raise ConfigurationError(f"seq_len {seq_len} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.numel() and (int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0):
            raise ConfigurationError(f"token id outside [0, {self.config.vocab_size})")
        h = self.token_embeddings[ids] + self.position_embeddings[:seq_len].unsqueeze(0)
        h = F.dropout(h, self.config.dropout_rate, self.training)
        _check_finite(h, layer=-1)
        neg = torch.finfo(h.dtype).min
        attn_bias = torch.zeros(bsz, 1, 1, seq_len, dtype=h.dtype).masked_fill(
            (mask == 0).view(bsz, 1, 1, seq_len), neg
        )
        for i, layer in enumerate(self.layers):
            loras = adapters.modules_for(task, i) if adapters is not None and task is not None else {}
            h = layer(h, attn_bias, loras)
            _check_finite(h, layer=i)
        return h


def _check_finite(h: torch.Tensor, layer: int) -> None:
    if not torch.isfinite(h).all():
        where = "embeddings" if layer < 0 else f"layer {layer}"
        raise NumericInstabilityError(f"non-finite activations after {where}", layer=layer)


def encode_tokens(
    batch: TokenBatch,
    encoder: Encoder,
    adapters=None,
    active_task: str | None = None,
    mode: str = "eval",
) -> torch.Tensor:
    """Per-token embeddings (batch x seq_len x hidden_dim).

    ``mode`` toggles dropout; the encoder's previous mode is restored afterwards.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        return encoder(batch, adapters=adapters, task=active_task)
    finally:
        encoder.train(was_training)


def pool_mean(token_embeddings: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
    mask = torch.as_tensor(attention_mask, device=token_embeddings.device).bool()
    counts = mask.sum(1)
    if (counts == 0).any():
        raise EmptySequenceError("empty sequence: attention mask row has no tokens")
    # where() rather than multiply so NaN/Inf in padding cannot leak in
    kept = torch.where(mask.unsqueeze(-1), token_embeddings, torch.zeros((), dtype=token_embeddings.dtype))
    return kept.sum(1) / counts.unsqueeze(-1).to(token_embeddings.dtype)


def l2_normalize(v, eps: float = EPS_NORM):
    """Normalize along the last axis. Works on tensors and arrays."""
    if isinstance(v, torch.Tensor):
        norm = v.norm(dim=-1, keepdim=True)
        if (norm <= eps).any():
            raise DegenerateEmbeddingError("degenerate embedding: norm below eps")
        return v / norm
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise DegenerateEmbeddingError("degenerate embedding: norm below eps")
    return v / norm


def cosine_similarity(u, v, eps: float = EPS_NORM) -> float:
    u = np.asarray(u.detach().cpu() if isinstance(u, torch.Tensor) else u, dtype=float)
    v = np.asarray(v.detach().cpu() if isinstance(v, torch.Tensor) else v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= eps or nv <= eps:
        raise DegenerateEmbeddingError("degenerate embedding: norm below eps")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = 20,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    ``params`` is a tensor, a sequence of tensors or a name → tensor mapping;
    ``loss_fn`` must close over them. Up to ``max_coords`` coordinates per
    tensor are sampled (``None`` checks all). Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    Run in double precision with dropout off.
    """
    if isinstance(params, torch.Tensor):
        named = {"param": params}
    elif isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {f"param{i}": p for i, p in enumerate(params)}
    tensors = list(named.values())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = (0.0, None, None)
    n_checked = 0
    for (name, p), g in zip(named.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        flat = p.data.view(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            coords = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
        for c in coords:
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + eps
                f_plus = float(loss_fn())
                flat[c] = orig - eps
                f_minus = float(loss_fn())
                flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = g.view(-1)[c].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            n_checked += 1
            if rel > worst[0] or worst[1] is None:
                worst = (rel, name, tuple(np.unravel_index(int(c), tuple(p.shape))))
    return GradCheckReport(worst[0], worst[1], worst[2], n_checked, tolerance)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def named_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def encoder_from_arrays(config: EncoderConfig, arrays: Mapping[str, np.ndarray], prefix: str = "",
                        dtype: torch.dtype = torch.float32) -> Encoder:
    enc = Encoder(config, dtype=dtype)
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)).to(dtype)
             for k, v in arrays.items() if k.startswith(prefix)}
    enc.load_state_dict(state)
    return enc



class SentenceEncoder:
    """Read-only view of a snapshot for diagnostics and probes.

    Wraps an encoder, its tokenizer and optionally one adapter group; all
    calls run in eval mode without gradients and return numpy arrays.
    """

    def __init__(self, encoder: Encoder, tokenizer, adapters=None, task: str | None = None,
                 batch_size: int = 128):
        self.encoder = encoder
        self.tokenizer = tokenizer
        self.adapters = adapters
        self.task = task
        self.batch_size = batch_size

    def _batches(self, sentences):
        for s in range(0, len(sentences), self.batch_size):
            chunk = sentences[s:s + self.batch_size]
            batch = self.tokenizer.encode(chunk, max_len=self.encoder.config.max_seq_len)
            with torch.no_grad():
                tokens = encode_tokens(batch, self.encoder, self.adapters, self.task, mode="eval")
            yield batch, tokens

    def embed_sentences(self, sentences: Sequence[Sequence[str]]) -> np.ndarray:
        """Mean-pooled text embeddings, one row per sentence."""
        out = [pool_mean(tokens, batch.attention_mask).double().numpy() for batch, tokens in self._batches(sentences)]
        return np.concatenate(out) if out else np.zeros((0, self.encoder.config.hidden_dim))

    def token_embeddings(self, sentences: Sequence[Sequence[str]]) -> list[np.ndarray]:
        """Per-sentence token vectors with [CLS], [SEP] and padding removed."""
        out = []
        for batch, tokens in self._batches(sentences):
            for i, n in enumerate(batch.lengths.tolist()):
                out.append(tokens[i, 1:n - 1].double().numpy())
        return out
