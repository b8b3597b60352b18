"""Labelled sentences for linear probing (JSONL ``{"text", "label"}`` or two-column TSV)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import DatasetError


@dataclass
class LabeledTexts:
    texts: list[str]
    labels: list[str]
    name: str = ""

    def __len__(self) -> int:
        return len(self.texts)

    def tokenized(self) -> list[list[str]]:
        return [t.split() for t in self.texts]

    def content_hash(self) -> str:
        payload = json.dumps([self.texts, self.labels], ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_labeled_texts(path) -> LabeledTexts:
    path = Path(path)
    texts, labels = [], []
    tsv = path.suffix.lower() in (".tsv", ".tab")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if tsv:
            cols = line.split("\t")
            if len(cols) != 2:
                raise DatasetError(f"expected 2 tab-separated columns, got {len(cols)}", line=lineno)
            text, label = cols
        else:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON: {e.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise DatasetError("expected a JSON object", line=lineno)
            text, label = obj.get("text"), obj.get("label")
        if not isinstance(text, str) or not text.strip():
            raise DatasetError("missing or empty field 'text'", line=lineno)
        if label is None or str(label).strip() == "":
            raise DatasetError("missing field 'label'", line=lineno)
        texts.append(text)
        labels.append(str(label))
    if not texts:
        raise DatasetError("empty dataset")
    return LabeledTexts(texts, labels, name=path.stem)


def write_labeled_texts(path, texts, labels) -> None:
    path = Path(path)
    if path.suffix.lower() in (".tsv", ".tab"):
        body = "".join(f"{t}\t{l}\n" for t, l in zip(texts, labels))
    else:
        body = "".join(json.dumps({"text": t, "label": str(l)}, ensure_ascii=False) + "\n"
                       for t, l in zip(texts, labels))
    path.write_text(body, encoding="utf-8")
