"""Downstream scoring and interference diagnostics.

Span F1 follows the conlleval conventions: an ``I-X`` that does not continue
an open ``X`` span starts a new one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateEmbeddingError
from .encoder import EPS_NORM


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, _, kind = tag.partition("-")
    if prefix not in ("B", "I") or not kind:
        raise ConfigurationError(f"not a BIO tag: {tag!r}")
    return prefix, kind


def get_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Entity spans as ``(type, start, end)`` with ``end`` exclusive."""
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(tags):
        prefix, t = split_tag(tag)
        continues = prefix == "I" and kind == t and start is not None
        if not continues and start is not None:
            spans.add((kind, start, i))
            start, kind = None, None
        if prefix in ("B", "I") and not continues:
            start, kind = i, t
    if start is not None:
        spans.add((kind, start, len(tags)))
    return spans


@dataclass
class SpanScore:
    precision: float
    recall: float
    f1: float
    n_pred: int
    n_gold: int
    n_correct: int


def span_f1(predicted: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> SpanScore:
    """Micro-averaged exact-match span precision / recall / F1."""
    if len(predicted) != len(gold):
        raise ConfigurationError(f"{len(predicted)} predicted vs {len(gold)} gold sequences")
    n_pred = n_gold = n_correct = 0
    for i, (p, g) in enumerate(zip(predicted, gold)):
        if len(p) != len(g):
            raise ConfigurationError(f"sequence {i}: length {len(p)} vs gold {len(g)}")
        ps, gs = get_spans(p), get_spans(g)
        n_pred += len(ps)
        n_gold += len(gs)
        n_correct += len(ps & gs)
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SpanScore(precision, recall, f1, n_pred, n_gold, n_correct)


class EntityBank(dict):
    """entity type → list of surface forms (each a tuple of words)."""

    @classmethod
    def from_corpus(cls, sentences: Sequence[Sequence[str]], tags: Sequence[Sequence[str]]) -> "EntityBank":
        bank: dict[str, list[tuple[str, ...]]] = {}
        for words, ts in zip(sentences, tags):
            for kind, s, e in sorted(get_spans(ts), key=lambda x: x[1]):
                bank.setdefault(kind, []).append(tuple(words[s:e]))
        return cls({k: v for k, v in sorted(bank.items())})


@dataclass
class PerturbedExample:
    words: list[str]
    tags: list[str]
    variants: list[tuple[list[str], list[str]]] = field(default_factory=list)


def perturb_entities(words: Sequence[str], tags: Sequence[str], bank: Mapping[str, Sequence[tuple[str, ...]]],
                     n_variants: int, rng: np.random.Generator) -> PerturbedExample:
    """Replace every entity with a random same-type surface form, ``n_variants`` times.

    The original surface is excluded from the draw whenever the bank holds
    at least two distinct forms for that type.
    """
    if len(words) != len(tags):
        raise ConfigurationError("words and tags must align")
    spans = sorted(get_spans(tags), key=lambda s: s[1])
    missing = sorted({k for k, _, _ in spans if not bank.get(k)})
    if missing:
        raise ConfigurationError(f"entity bank has no entries for type(s): {', '.join(missing)}")
    example = PerturbedExample(list(words), list(tags))
    for _ in range(n_variants):
        out_w: list[str] = []
        out_t: list[str] = []
        pos = 0
        for kind, s, e in spans:
            out_w.extend(words[pos:s])
            out_t.extend(tags[pos:s])
            original = tuple(words[s:e])
            pool = list(dict.fromkeys(tuple(c) for c in bank[kind]))
            if len(pool) >= 2:
                pool = [c for c in pool if c != original] or pool
            choice = pool[int(rng.integers(len(pool)))]
            out_w.extend(choice)
            out_t.extend([f"B-{kind}"] + [f"I-{kind}"] * (len(choice) - 1))
            pos = e
        out_w.extend(words[pos:])
        out_t.extend(tags[pos:])
        example.variants.append((out_w, out_t))
    return example


def build_perturbed_set(sentences, tags, bank, n_variants: int = 4, seed: int = 0) -> list[PerturbedExample]:
    rng = np.random.default_rng(seed)
    return [perturb_entities(w, t, bank, n_variants, rng) for w, t in zip(sentences, tags)]


@dataclass
class SimilarityResult:
    mean: float
    n_pairs: int
    n_skipped: int


def _cos_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > EPS_NORM) & (nb > EPS_NORM)
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return np.clip(cos, -1.0, 1.0), ok


def perturbation_similarity(embedder, perturbed: Sequence[PerturbedExample]) -> SimilarityResult:
    """Mean cosine between each original sentence and each of its variants.

    ``embedder`` needs ``embed_sentences(list of word lists) -> (n, d) array``.
    Pairs with a degenerate (near-zero) embedding are skipped and counted.
    """
    originals, variants, owner = [], [], []
    for i, ex in enumerate(perturbed):
        originals.append(ex.words)
        for w, _ in ex.variants:
            variants.append(w)
            owner.append(i)
    if not variants:
        return SimilarityResult(math.nan, 0, 0)
    orig_emb = np.asarray(embedder.embed_sentences(originals), dtype=float)
    var_emb = np.asarray(embedder.embed_sentences(variants), dtype=float)
    cos, ok = _cos_rows(orig_emb[np.asarray(owner)], var_emb)
    n_skipped = int((~ok).sum())
    mean = float(cos.mean()) if cos.size else math.nan
    return SimilarityResult(mean, int(cos.size), n_skipped)


def _pairwise_mean_cos(tokens: np.ndarray) -> float:
    norms = np.linalg.norm(tokens, axis=1)
    if np.any(norms <= EPS_NORM):
        raise DegenerateEmbeddingError("degenerate token embedding")
    unit = tokens / norms[:, None]
    gram = unit @ unit.T
    n = len(tokens)
    iu = np.triu_indices(n, k=1)
    return float(gram[iu].mean())


@dataclass
class HomogeneityResult:
    mean: float
    n_sentences: int
    n_skipped: int


def token_homogeneity(embedder, sentences: Sequence[Sequence[str]], n_samples: int = 2000,
                      seed: int = 0) -> HomogeneityResult:
    """Mean over sentences of the mean pairwise cosine among their token vectors.

    At most ``n_samples`` sentences are used (a seeded sample when the corpus
    is larger). ``embedder.token_embeddings`` must already exclude
    [CLS]/[SEP]/padding. Sentences with fewer than two tokens are skipped.
    """
    sentences = list(sentences)
    if len(sentences) > n_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(sentences), n_samples, replace=False))
        sentences = [sentences[i] for i in idx]
    per_sentence = embedder.token_embeddings(sentences)
    values, skipped = [], 0
    for toks in per_sentence:
        toks = np.asarray(toks, dtype=float)
        if len(toks) < 2:
            skipped += 1
            continue
        try:
            values.append(_pairwise_mean_cos(toks))
        except DegenerateEmbeddingError:
            skipped += 1
    mean = float(np.mean(values)) if values else math.nan
    return HomogeneityResult(mean, len(values), skipped)


@dataclass
class SimilarityCurve:
    name: str
    points: list[tuple[int, float]] = field(default_factory=list)

    def add(self, step: int, value: float) -> None:
        if self.points and step <= self.points[-1][0]:
            raise ConfigurationError(f"curve steps must increase: {step} after {self.points[-1][0]}")
        self.points.append((int(step), float(value)))

    @property
    def first(self) -> float:
        return self.points[0][1]

    @property
    def last(self) -> float:
        return self.points[-1][1]

    def to_records(self) -> list[dict]:
        return [{"curve": self.name, "step": s, "value": v} for s, v in self.points]


def limited_data_split(items: Sequence, fraction: float, seed: int = 0,
                       types_of=None) -> list:
    """Deterministic sentence-level subsample of ``ceil(fraction * N)`` items.

    ``types_of(item)`` optionally returns the entity types an item contains;
    a greedy pass then swaps items in so every type seen in the full set is
    covered whenever the sample size allows. Original order is preserved.
    """
    if not 0 < fraction <= 1:
        raise ConfigurationError("fraction must lie in (0, 1]")
    n = len(items)
    size = math.ceil(fraction * n - 1e-9)
    if size == 0:
        raise ConfigurationError(f"fraction {fraction} of {n} items selects nothing")
    if size >= n:
        return list(items)
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.permutation(n)[:size].tolist())
    if types_of is not None:
        chosen = _repair_coverage(items, chosen, types_of)
    return [items[i] for i in chosen]


def _repair_coverage(items, chosen: list[int], types_of) -> list[int]:
    types = [set(types_of(it)) for it in items]
    all_types = set().union(*types) if types else set()
    chosen_set = set(chosen)

    def covered():
        return set().union(*(types[i] for i in chosen_set)) if chosen_set else set()

    for t in sorted(all_types - covered()):
        if t in covered():
            continue
        candidate = next(i for i in range(len(items)) if t in types[i])
        # drop the chosen item whose removal loses the fewest uniquely-covered types
        counts: dict[str, int] = {}
        for i in chosen_set:
            for tt in types[i]:
                counts[tt] = counts.get(tt, 0) + 1
        victims = sorted(chosen_set, key=lambda i: (sum(counts[tt] == 1 for tt in types[i]), i))
        if sum(counts[tt] == 1 for tt in types[victims[0]]) > 0:
            continue  # every chosen item is load-bearing; coverage infeasible at this size
        chosen_set.discard(victims[0])
        chosen_set.add(candidate)
    return sorted(chosen_set)
