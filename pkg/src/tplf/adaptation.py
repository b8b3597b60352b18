"""Downstream adaptation: LoRA token classification for NER, linear probing for text classification."""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .encoder import Encoder, SentenceEncoder, encode_tokens
from .errors import ConfigurationError
from .evaluation import span_f1
from .lora import LoraModule, LoraSpec, TaskPrimaryAdapterSet, init_from_tpl
from .objectives import IGNORE_INDEX, TokenHead, token_cross_entropy
from .pseudo_label import label_batch
from .tokenizer import WordTokenizer
from .trainer import AdamW

log = logging.getLogger(__name__)


@dataclass
class NerAdaptConfig:
    head_epochs: int = 10
    joint_epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-5
    weight_decay: float = 0.01
    lora_rank: int = 32
    lora_alpha: float = 64.0
    lora_projections: tuple[str, ...] = ("query", "key", "ffn_in", "ffn_out")
    train_backbone: bool = False
    seed: int = 0

    def lora_spec(self, num_layers: int) -> LoraSpec:
        return LoraSpec(rank=self.lora_rank, alpha=self.lora_alpha,
                        target_projections=frozenset(self.lora_projections),
                        target_layers=tuple(range(num_layers)))


@dataclass
class NerModel:
    encoder: Encoder
    adapters: TaskPrimaryAdapterSet
    head: TokenHead
    tags: list[str]
    tokenizer: WordTokenizer

    def predict(self, sentences: Sequence[Sequence[str]], batch_size: int = 128) -> list[list[str]]:
        """Word-level tags from each word's first sub-token."""
        out = []
        max_len = self.encoder.config.max_seq_len
        for s in range(0, len(sentences), batch_size):
            chunk = sentences[s:s + batch_size]
            batch = self.tokenizer.encode(chunk, max_len=max_len)
            with torch.no_grad():
                logits = self.head(encode_tokens(batch, self.encoder, self.adapters, "NER", mode="eval"))
            pred = logits.argmax(-1)
            for i, spans in enumerate(batch.word_alignment):
                tags = [self.tags[int(pred[i, st])] for st, _ in spans]
                tags += ["O"] * (len(chunk[i]) - len(tags))  # words truncated away
                out.append(tags)
        return out

    def evaluate(self, sentences, tags) -> float:
        return span_f1(self.predict(sentences), tags).f1


@dataclass
class NerAdaptResult:
    model: NerModel
    stage1_f1: float
    stage2_f1: float
    history: list[dict] = field(default_factory=list)


def tag_vocabulary(tag_seqs: Sequence[Sequence[str]]) -> list[str]:
    tags = sorted({t for seq in tag_seqs for t in seq} - {"O"})
    return ["O"] + tags


def _run_epochs(encoder, adapters, head, params, batches, epochs, cfg: NerAdaptConfig, rng, stage, history):
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(epochs):
        order = rng.permutation(len(batches))
        total = 0.0
        for b in order:
            batch = batches[int(b)]
            for m in (encoder, adapters, head):
                m.train(True)
            if stage == 1:
                with torch.no_grad():
                    feats = encode_tokens(batch.tokens, encoder, adapters, "NER", mode="train")
            else:
                feats = encode_tokens(batch.tokens, encoder, adapters, "NER", mode="train")
            logits = head(feats)
            loss = token_cross_entropy(logits, batch.labels)
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            opt.step({n: g for n, g in zip(params, grads) if g is not None})
            total += float(loss.detach())
        history.append({"stage": stage, "epoch": epoch, "loss": total / max(len(batches), 1)})


def adapt_ner(
    backbone: Encoder,
    tokenizer: WordTokenizer,
    sentences: Sequence[Sequence[str]],
    tags: Sequence[Sequence[str]],
    config: NerAdaptConfig | None = None,
    tpl: Mapping[tuple[int, str], LoraModule] | None = None,
    label_set: Sequence[str] | None = None,
    eval_data: tuple[Sequence, Sequence] | None = None,
) -> NerAdaptResult:
    """Two-stage LoRA token-classification fine-tuning.

    Stage 1 trains the head alone with encoder and adapters frozen; stage 2
    trains head + LoRA (and the backbone too if ``train_backbone``). LoRA
    modules on layers covered by ``tpl`` start from it; the rest are fresh.
    F1 after each stage is measured on ``eval_data`` or, if absent, the
    training set. The caller's backbone is never modified.
    """
    cfg = config or NerAdaptConfig()
    data_tags = tag_vocabulary(tags)
    if label_set is not None:
        label_set = list(label_set)
        unknown = sorted(set(data_tags) - set(label_set))
        if unknown:
            raise ConfigurationError(f"label set mismatch: data uses tags not in the head: {unknown}")
    tag_list = label_set or data_tags
    if eval_data is not None:
        unknown = sorted(set(tag_vocabulary(eval_data[1])) - set(tag_list))
        if unknown:
            raise ConfigurationError(f"label set mismatch: eval data uses unknown tags {unknown}")
    tag_index = {t: i for i, t in enumerate(tag_list)}
    encoder = copy.deepcopy(backbone)
    adapters = init_from_tpl(encoder, cfg.lora_spec(encoder.config.num_layers), tpl, "NER", seed=cfg.seed)
    head = TokenHead(encoder.config.hidden_dim, len(tag_list), seed=cfg.seed, dtype=encoder.dtype)
    model = NerModel(encoder, adapters, head, tag_list, tokenizer)

    max_len = encoder.config.max_seq_len
    ids = [[tag_index[t] for t in seq] for seq in tags]
    batches = [
        label_batch(sentences[s:s + cfg.batch_size], ids[s:s + cfg.batch_size], tokenizer,
                    max_len=max_len, first_subtoken_only=True)
        for s in range(0, len(sentences), cfg.batch_size)
    ]
    batches = [b for b in batches if (b.labels != IGNORE_INDEX).any()]
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    ev_s, ev_t = eval_data if eval_data is not None else (sentences, tags)
    history: list[dict] = []

    head_params = {f"head.{n}": p for n, p in head.named_parameters()}
    _run_epochs(encoder, adapters, head, head_params, batches, cfg.head_epochs, cfg, rng, 1, history)
    stage1 = model.evaluate(ev_s, ev_t)

    joint = dict(head_params)
    joint.update({f"lora.{n}": p for n, p in adapters.named_parameters()})
    if cfg.train_backbone:
        joint.update({f"backbone.{n}": p for n, p in encoder.named_parameters()})
    _run_epochs(encoder, adapters, head, joint, batches, cfg.joint_epochs, cfg, rng, 2, history)
    stage2 = model.evaluate(ev_s, ev_t)
    log.info("adapt_ner: stage-1 F1 %.4f, stage-2 F1 %.4f", stage1, stage2)
    return NerAdaptResult(model, stage1, stage2, history)


class LinearProbe:
    """Multinomial logistic regression trained by full-batch gradient descent
    with backtracking line search on standardized features."""

    def __init__(self, l2: float = 1e-4, max_iter: int = 300, tol: float = 1e-7):
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol
        self.degenerate = False

    def _logits(self, Xs: np.ndarray) -> np.ndarray:
        return Xs @ self.W + self.b

    def _loss_grad(self, Xs, Y, W, b):
        z = Xs @ W + b
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = len(Xs)
        loss = -(Y * logp).sum() / n + 0.5 * self.l2 * (W * W).sum()
        p = np.exp(logp)
        diff = (p - Y) / n
        return loss, Xs.T @ diff + self.l2 * W, diff.sum(axis=0)

    def fit(self, X, y) -> "LinearProbe":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ < 1e-12] = 1.0
        Xs = (X - self.mean_) / self.scale_
        k = len(self.classes_)
        self.W = np.zeros((X.shape[1], k))
        self.b = np.zeros(k)
        if k < 2:
            self.degenerate = True
            warnings.warn("linear probe trained on a single class; predictions are constant", stacklevel=2)
            return self
        Y = (y[:, None] == self.classes_[None, :]).astype(np.float64)
        step = 1.0
        loss, gW, gb = self._loss_grad(Xs, Y, self.W, self.b)
        for _ in range(self.max_iter):
            gnorm2 = (gW * gW).sum() + (gb * gb).sum()
            if gnorm2 < self.tol ** 2:
                break
            while True:
                W_new, b_new = self.W - step * gW, self.b - step * gb
                new_loss, nW, nb = self._loss_grad(Xs, Y, W_new, b_new)
                if new_loss <= loss - 0.5 * step * gnorm2 or step < 1e-10:
                    break
                step *= 0.5
            self.W, self.b, loss, gW, gb = W_new, b_new, new_loss, nW, nb
            step *= 2.0
        self.loss_ = loss
        return self

    def predict(self, X) -> np.ndarray:
        Xs = (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_
        if self.degenerate:
            return np.full(len(Xs), self.classes_[0])
        return self.classes_[self._logits(Xs).argmax(axis=1)]

    def score(self, X, y) -> float:
        y = np.asarray(y)
        if len(y) == 0:
            return float("nan")
        return float((self.predict(X) == y).mean())


@dataclass
class ProbeResult:
    probe: LinearProbe
    train_accuracy: float
    test_accuracy: float

    @property
    def degenerate(self) -> bool:
        return self.probe.degenerate


def fit_linear_probe(train_X, train_y, test_X=None, test_y=None, **kw) -> ProbeResult:
    probe = LinearProbe(**kw).fit(train_X, train_y)
    train_acc = probe.score(train_X, train_y)
    test_acc = probe.score(test_X, test_y) if test_X is not None else float("nan")
    return ProbeResult(probe, train_acc, test_acc)


def adapt_tc(
    backbone: Encoder,
    tokenizer: WordTokenizer,
    train: tuple[Sequence[Sequence[str]], Sequence],
    test: tuple[Sequence[Sequence[str]], Sequence],
    tpl: TaskPrimaryAdapterSet | None = None,
    **probe_kw,
) -> ProbeResult:
    """Linear probe on mean-pooled embeddings from the frozen backbone (+ TC-TPL if given)."""
    embedder = SentenceEncoder(backbone, tokenizer, tpl, "TC" if tpl is not None else None)
    Xtr = embedder.embed_sentences(train[0])
    Xte = embedder.embed_sentences(test[0])
    return fit_linear_probe(Xtr, train[1], Xte, test[1], **probe_kw)
