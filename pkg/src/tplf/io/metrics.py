"""Append-only JSONL metric stream, one record per line."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path


class MetricsWriter:
    """Writes ``{"step", "phase", "metrics", "wall_time"}`` records.

    With ``deterministic=True`` wall-clock time goes to a sidecar
    ``<name>.timing.jsonl`` instead, so identical runs give identical files.
    """

    def __init__(self, path, deterministic: bool = False, provenance: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.deterministic = deterministic
        self.timing_path = self.path.with_suffix(".timing.jsonl")
        self._t0 = time.perf_counter()
        self._last_step: dict[str, int] = {}
        self._f = open(self.path, "a", encoding="utf-8")
        self._timing = open(self.timing_path, "a", encoding="utf-8") if deterministic else None
        if provenance:
            self.write(0, "provenance", provenance)

    def write(self, step: int, phase: str, metrics: dict) -> dict:
        last = self._last_step.get(phase)
        if last is not None and step < last:
            raise ValueError(f"phase {phase!r}: step {step} after {last}")
        self._last_step[phase] = step
        record = {"step": int(step), "phase": phase, "metrics": metrics}
        wall = round(time.perf_counter() - self._t0, 6)
        if self.deterministic:
            self._timing.write(json.dumps({"step": int(step), "phase": phase, "wall_time": wall}) + "\n")
            self._timing.flush()
        else:
            record["wall_time"] = wall
        # one complete line per write keeps every prefix of the file valid JSONL
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()
        return record

    def close(self) -> None:
        self._f.close()
        if self._timing:
            self._timing.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path, phase: str | None = None) -> list[dict]:
    """Parse complete lines; a torn final line (crash mid-write) is ignored."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break
        if phase is None or rec.get("phase") == phase:
            out.append(rec)
    return out


def write_csv(path, rows, fields=None) -> Path:
    """Flat records to CSV for plotting; columns default to first-seen key order."""
    rows = list(rows)
    if fields is None:
        fields = list(dict.fromkeys(k for r in rows for k in r))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path
