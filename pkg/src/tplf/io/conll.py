"""CoNLL-style column files: one token per line, tag in the last column, blank line between sentences."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..errors import DatasetError
from ..evaluation import get_spans

_BIO = re.compile(r"^(O|[BI]-\S+)$")
_CLUSTER = re.compile(r"^C(\d+)$")


@dataclass
class NerDataset:
    sentences: list[list[str]]
    tags: list[list[str]]
    scheme: str = "bio"  # or "cluster" for pseudo labels

    def __len__(self) -> int:
        return len(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i], self.tags[i]

    def entity_types(self) -> list[str]:
        if self.scheme != "bio":
            return []
        return sorted({k for t in self.tags for k, _, _ in get_spans(t)})

    def cluster_ids(self) -> list[list[int]]:
        if self.scheme != "cluster":
            raise DatasetError("dataset does not carry cluster labels")
        return [[int(t[1:]) for t in seq] for seq in self.tags]

    def subset(self, index: Sequence[int]) -> "NerDataset":
        return NerDataset([self.sentences[i] for i in index], [self.tags[i] for i in index], self.scheme)

    def content_hash(self) -> str:
        payload = json.dumps([self.sentences, self.tags], ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _scheme_of(tag: str) -> str | None:
    if _BIO.match(tag):
        return "bio"
    if _CLUSTER.match(tag):
        return "cluster"
    return None


def load_conll(path) -> NerDataset:
    sentences: list[list[str]] = []
    tags: list[list[str]] = []
    words: list[str] = []
    labels: list[str] = []
    scheme = None
    text = Path(path).read_text(encoding="utf-8")

    def flush():
        if words:
            sentences.append(list(words))
            tags.append(list(labels))
            words.clear()
            labels.clear()

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            flush()
            continue
        cols = line.split()
        if cols[0] == "-DOCSTART-":
            flush()
            continue
        if len(cols) < 2:
            raise DatasetError(f"expected at least 2 columns, got {len(cols)}", line=lineno)
        tag = cols[-1]
        kind = _scheme_of(tag)
        if kind is None:
            raise DatasetError(f"unknown tag scheme for tag {tag!r}", line=lineno)
        if scheme is None:
            scheme = kind
        elif kind != scheme and tag != "O":
            raise DatasetError(f"tag {tag!r} mixes {kind} labels into a {scheme} file", line=lineno)
        words.append(cols[0])
        labels.append(tag)
    flush()
    if not sentences:
        raise DatasetError("empty dataset")
    return NerDataset(sentences, tags, scheme or "bio")


def write_conll(path, sentences: Sequence[Sequence[str]], tags: Sequence[Sequence[str]]) -> None:
    lines = []
    for words, ts in zip(sentences, tags):
        if len(words) != len(ts):
            raise DatasetError("words and tags differ in length")
        lines.extend(f"{w} {t}" for w, t in zip(words, ts))
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")
