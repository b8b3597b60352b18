"""Corpus-derived word-level tokenizer with a character fallback for OOV words.

Out-of-vocabulary words are split into character pieces (``##c``), so a word
can map to several sub-tokens; the resulting ``word_alignment`` records the
sub-token range of every word.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .errors import ConfigurationError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
RESERVED = (PAD, UNK, CLS, SEP)
CHAR_PREFIX = "##"


@dataclass
class TokenBatch:
    """Right-padded token ids plus per-sequence word → sub-token ranges."""

    token_ids: torch.Tensor  # (batch, seq_len) int64
    attention_mask: torch.Tensor  # (batch, seq_len) 0/1
    word_alignment: list[list[tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = torch.as_tensor(self.token_ids, dtype=torch.long)
        self.attention_mask = torch.as_tensor(self.attention_mask, dtype=torch.long)
        if self.token_ids.dim() != 2 or self.token_ids.shape != self.attention_mask.shape:
            raise ConfigurationError(
                f"token_ids {tuple(self.token_ids.shape)} and attention_mask "
                f"{tuple(self.attention_mask.shape)} must be equal 2-d shapes"
            )
        if not self.word_alignment:
            self.word_alignment = [[] for _ in range(self.token_ids.shape[0])]
        if len(self.word_alignment) != self.token_ids.shape[0]:
            raise ConfigurationError("word_alignment must have one entry per sequence")
        self.validate()

    def validate(self) -> None:
        mask = self.attention_mask
        if ((mask != 0) & (mask != 1)).any():
            raise ConfigurationError("attention_mask must be 0/1")
        lengths = mask.sum(1)
        positions = torch.arange(mask.shape[1]).unsqueeze(0)
        if not torch.equal(mask, (positions < lengths.unsqueeze(1)).long()):
            raise ConfigurationError("attention_mask must be a prefix of ones (right padding)")
        for i, spans in enumerate(self.word_alignment):
            n = int(lengths[i])
            for start, end in spans:
                if not (0 <= start < end <= n):
                    raise ConfigurationError(
                        f"sequence {i}: word range ({start}, {end}) empty or outside mask (len {n})"
                    )

    @property
    def lengths(self) -> torch.Tensor:
        return self.attention_mask.sum(1)

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def select(self, index: Sequence[int]) -> "TokenBatch":
        index = list(index)
        ids = self.token_ids[index]
        mask = self.attention_mask[index]
        width = max(int(mask.sum(1).max()), 1) if index else 1
        return TokenBatch(ids[:, :width], mask[:, :width], [self.word_alignment[i] for i in index])


class WordTokenizer:
    def __init__(self, vocab: Sequence[str], lowercase: bool = False):
        if tuple(vocab[:4]) != RESERVED:
            raise ConfigurationError(f"vocabulary must start with {RESERVED}")
        self.vocab = list(vocab)
        self.lowercase = lowercase
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ConfigurationError("duplicate vocabulary entries")

    @classmethod
    def build(
        cls,
        sentences: Iterable[Sequence[str]],
        min_freq: int = 1,
        max_words: int | None = None,
        lowercase: bool = False,
    ) -> "WordTokenizer":
        words: Counter[str] = Counter()
        chars: set[str] = set()
        for sent in sentences:
            for w in sent:
                w = w.lower() if lowercase else w
                words[w] += 1
                chars.update(w)
        # most frequent first, ties alphabetical, so the vocab is order-independent
        ranked = sorted((w for w, c in words.items() if c >= min_freq), key=lambda w: (-words[w], w))
        if max_words is not None:
            ranked = ranked[:max_words]
        vocab = list(RESERVED) + [CHAR_PREFIX + c for c in sorted(chars)] + ranked
        return cls(vocab, lowercase=lowercase)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def word_pieces(self, word: str) -> list[int]:
        w = word.lower() if self.lowercase else word
        if w in self.index:
            return [self.index[w]]
        return [self.index.get(CHAR_PREFIX + c, UNK_ID) for c in w] or [UNK_ID]

    def encode(self, sentences: Sequence[Sequence[str]], max_len: int | None = None) -> TokenBatch:
        """Tokenize word lists into ``[CLS] pieces... [SEP]``.

        Words that do not fit in ``max_len`` are dropped whole, so the
        alignment never points at a partial word.
        """
        rows: list[list[int]] = []
        alignment: list[list[tuple[int, int]]] = []
        for sent in sentences:
            ids = [CLS_ID]
            spans = []
            for w in sent:
                pieces = self.word_pieces(w)
                if max_len is not None and len(ids) + len(pieces) + 1 > max_len:
                    break
                spans.append((len(ids), len(ids) + len(pieces)))
                ids.extend(pieces)
            ids.append(SEP_ID)
            rows.append(ids)
            alignment.append(spans)
        width = max((len(r) for r in rows), default=1)
        token_ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
        mask = torch.zeros((len(rows), width), dtype=torch.long)
        for i, r in enumerate(rows):
            token_ids[i, : len(r)] = torch.tensor(r)
            mask[i, : len(r)] = 1
        return TokenBatch(token_ids, mask, alignment)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "lowercase": self.lowercase}

    @classmethod
    def from_dict(cls, d: dict) -> "WordTokenizer":
        return cls(d["vocab"], lowercase=d.get("lowercase", False))
