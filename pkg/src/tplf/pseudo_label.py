"""Pseudo-labelled NER data from a frozen teacher: word embeddings → mini-batch k-means → cluster ids."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch

from .encoder import Encoder, encode_tokens
from .errors import ConfigurationError
from .objectives import IGNORE_INDEX, TokenLabeledBatch
from .tokenizer import WordTokenizer

log = logging.getLogger(__name__)

CLUSTER_GRID = (50, 100, 200, 500, 1000)


@dataclass(frozen=True)
class PseudoLabelConfig:
    k: int = 200
    kmeans_batch: int = 1024
    kmeans_iters: int = 10  # epochs over the embedding pool
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ConfigurationError("k must be >= 2")
        if self.kmeans_batch < self.k:
            raise ConfigurationError("kmeans_batch must be >= k")
        if self.kmeans_iters < 1:
            raise ConfigurationError("kmeans_iters must be >= 1")


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, dim)
    inertia: float
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    history: list[float] = field(default_factory=list)  # full-data inertia after each epoch

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def word_embeddings_from_subtokens(token_embeddings, word_alignment: Sequence[tuple[int, int]]) -> np.ndarray:
    """Average sub-token vectors of each word. ``token_embeddings`` is (seq_len, dim)."""
    emb = token_embeddings.detach().cpu().numpy() if isinstance(token_embeddings, torch.Tensor) else np.asarray(token_embeddings)
    out = np.empty((len(word_alignment), emb.shape[-1]), dtype=emb.dtype)
    for i, (start, end) in enumerate(word_alignment):
        if end <= start:
            raise ConfigurationError(f"word {i} has an empty sub-token range ({start}, {end})")
        if start < 0 or end > emb.shape[0]:
            raise ConfigurationError(f"word {i} range ({start}, {end}) outside sequence")
        out[i] = emb[start:end].mean(axis=0)
    return out


def squared_distances(points: np.ndarray, centroids: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Exact pairwise squared Euclidean distances (differences, not the expanded form)."""
    out = np.empty((points.shape[0], centroids.shape[0]), dtype=np.float64)
    c = centroids.astype(np.float64)
    for s in range(0, points.shape[0], chunk):
        diff = points[s:s + chunk, None, :].astype(np.float64) - c[None]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def assign_clusters(model: ClusterModel, points) -> np.ndarray:
    """Nearest centroid per point; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return np.zeros(0, dtype=np.int64)
    if points.ndim != 2 or points.shape[1] != model.dim:
        raise ConfigurationError(f"points of dim {points.shape[-1]} vs centroids of dim {model.dim}")
    return squared_distances(points, model.centroids).argmin(axis=1)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    first = int(rng.integers(n))
    centers = [points[first]]
    d2 = squared_distances(points, points[first:first + 1])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(points[idx])
        d2 = np.minimum(d2, squared_distances(points, points[idx:idx + 1])[:, 0])
    return np.array(centers, dtype=np.float64)


def _inertia(points: np.ndarray, centroids: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    d2 = squared_distances(points, centroids)
    labels = d2.argmin(axis=1)
    best = d2[np.arange(len(points)), labels]
    return float(best.sum()), labels, best


def minibatch_kmeans(points, config: PseudoLabelConfig) -> ClusterModel:
    """Mini-batch k-means with per-centroid learning rate 1/count.

    Each epoch visits a fresh permutation of the points in batches of
    ``kmeans_batch``. Assignments within a batch use the centroids from
    before the batch; each assigned point then moves its centroid by
    ``eta = 1 / count``. Empty clusters are re-seeded at the point farthest
    from its centroid after every epoch.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    k = config.k
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(config.seed)
    centroids = kmeans_plus_plus(points, k, rng)
    counts = np.zeros(k, dtype=np.float64)
    history = []
    bsz = min(config.kmeans_batch, n)
    for _ in range(config.kmeans_iters):
        order = rng.permutation(n)
        for s in range(0, n, bsz):
            batch = points[order[s:s + bsz]]
            labels = squared_distances(batch, centroids).argmin(axis=1)
            # sequential eta = 1/count updates collapse to a running mean per centroid
            sums = np.zeros_like(centroids)
            np.add.at(sums, labels, batch)
            hits = np.bincount(labels, minlength=k).astype(np.float64)
            touched = hits > 0
            new_counts = counts + hits
            centroids[touched] = (counts[touched, None] * centroids[touched] + sums[touched]) / new_counts[touched, None]
            counts = new_counts
        inertia, labels, best = _inertia(points, centroids)
        empty = np.flatnonzero(np.bincount(labels, minlength=k) == 0)
        if empty.size:
            log.debug("re-seeding %d empty clusters", empty.size)
            far = np.argsort(-best, kind="stable")
            for j, c in enumerate(empty):
                centroids[c] = points[far[j]]
                counts[c] = 1.0
            inertia, labels, best = _inertia(points, centroids)
        history.append(inertia)
    return ClusterModel(centroids=centroids, inertia=history[-1], counts=counts, history=history)


@dataclass
class PseudoLabeledCorpus:
    sentences: list[list[str]]
    word_labels: list[list[int]]
    k: int
    clusters: ClusterModel | None = None

    def tags(self) -> list[list[str]]:
        return [[f"C{c}" for c in labels] for labels in self.word_labels]


def teacher_word_embeddings(
    sentences: Sequence[Sequence[str]],
    teacher: Encoder,
    tokenizer: WordTokenizer,
    batch_size: int = 64,
) -> list[np.ndarray]:
    """Word-level embeddings per sentence from a frozen teacher (eval mode, no grad)."""
    out = []
    max_len = teacher.config.max_seq_len
    for s in range(0, len(sentences), batch_size):
        chunk = sentences[s:s + batch_size]
        batch = tokenizer.encode(chunk, max_len=max_len)
        with torch.no_grad():
            tokens = encode_tokens(batch, teacher, mode="eval")
        for i, spans in enumerate(batch.word_alignment):
            if len(spans) != len(chunk[i]):
                raise ConfigurationError(f"sentence {s + i} does not fit in max_seq_len={max_len}")
            out.append(word_embeddings_from_subtokens(tokens[i], spans))
    return out


def build_pseudo_dataset(
    sentences: Sequence[Sequence[str]],
    teacher: Encoder,
    tokenizer: WordTokenizer,
    config: PseudoLabelConfig,
    cluster_model: ClusterModel | None = None,
) -> PseudoLabeledCorpus:
    """Label every word with the k-means cluster of its teacher embedding.

    Pass ``cluster_model`` to reuse fitted centroids instead of clustering.
    """
    sentences = [list(s) for s in sentences]
    per_sentence = teacher_word_embeddings(sentences, teacher, tokenizer)
    pool = np.concatenate([e for e in per_sentence if len(e)], axis=0)
    if cluster_model is None:
        cluster_model = minibatch_kmeans(pool, config)
    elif cluster_model.dim != teacher.config.hidden_dim:
        raise ConfigurationError(
            f"teacher hidden_dim {teacher.config.hidden_dim} != clustering dim {cluster_model.dim}"
        )
    flat = assign_clusters(cluster_model, pool)
    labels, pos = [], 0
    for e in per_sentence:
        labels.append([int(c) for c in flat[pos:pos + len(e)]])
        pos += len(e)
    return PseudoLabeledCorpus(sentences, labels, cluster_model.k, cluster_model)


def label_batch(
    sentences: Sequence[Sequence[str]],
    word_labels: Sequence[Sequence[int]],
    tokenizer: WordTokenizer,
    max_len: int | None = None,
    first_subtoken_only: bool = False,
) -> TokenLabeledBatch:
    """Tokenize and spread word labels onto sub-tokens.

    By default every sub-token inherits its word's label; with
    ``first_subtoken_only`` the continuation pieces are ignored instead.
    [CLS]/[SEP]/padding always get the ignore label.
    """
    tokens = tokenizer.encode(sentences, max_len=max_len)
    labels = torch.full(tokens.token_ids.shape, IGNORE_INDEX, dtype=torch.long)
    for i, spans in enumerate(tokens.word_alignment):
        for (start, end), lab in zip(spans, word_labels[i]):
            if first_subtoken_only:
                labels[i, start] = lab
            else:
                labels[i, start:end] = lab
    return TokenLabeledBatch(tokens, labels)


def iter_pseudo_batches(
    corpus: PseudoLabeledCorpus,
    tokenizer: WordTokenizer,
    batch_size: int,
    max_len: int | None = None,
) -> Iterator[TokenLabeledBatch]:
    for s in range(0, len(corpus.sentences), batch_size):
        yield label_batch(corpus.sentences[s:s + batch_size], corpus.word_labels[s:s + batch_size],
                          tokenizer, max_len=max_len)
