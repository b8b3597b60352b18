"""Sentence-pair corpora for contrastive training (JSONL or two-column TSV)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import DatasetError


@dataclass
class PairDataset:
    pairs: list[tuple[str, str]]
    name: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def tokenized(self) -> list[tuple[list[str], list[str]]]:
        return [(a.split(), p.split()) for a, p in self.pairs]

    def content_hash(self) -> str:
        payload = json.dumps(self.pairs, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _check(anchor, positive, lineno: int) -> tuple[str, str]:
    for field, value in (("anchor", anchor), ("positive", positive)):
        if not isinstance(value, str) or not value.strip():
            raise DatasetError(f"missing or empty field {field!r}", line=lineno)
    return anchor, positive


def load_pairs(path) -> PairDataset:
    """Read ``{"anchor": ..., "positive": ...}`` JSONL, or TSV when the suffix is .tsv."""
    path = Path(path)
    pairs = []
    lines = path.read_text(encoding="utf-8").splitlines()
    tsv = path.suffix.lower() in (".tsv", ".tab")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if tsv:
            cols = line.split("\t")
            if len(cols) != 2:
                raise DatasetError(f"expected 2 tab-separated columns, got {len(cols)}", line=lineno)
            pairs.append(_check(cols[0], cols[1], lineno))
        else:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON: {e.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise DatasetError("expected a JSON object", line=lineno)
            pairs.append(_check(obj.get("anchor"), obj.get("positive"), lineno))
    if not pairs:
        raise DatasetError("empty dataset")
    return PairDataset(pairs, name=path.stem)


def write_pairs(path, pairs) -> None:
    path = Path(path)
    if path.suffix.lower() in (".tsv", ".tab"):
        text = "".join(f"{a}\t{p}\n" for a, p in pairs)
    else:
        text = "".join(json.dumps({"anchor": a, "positive": p}, ensure_ascii=False) + "\n" for a, p in pairs)
    path.write_text(text, encoding="utf-8")
