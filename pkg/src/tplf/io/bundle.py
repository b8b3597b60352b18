"""Deployment bundle: one backbone file, one adapter file per task, and a manifest.

Adapter files record the hash of the backbone they were trained with and
refuse to load against any other backbone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from ..encoder import Encoder
from ..errors import BackboneMismatchError, CheckpointError
from ..lora import LoraSpec, TaskPrimaryAdapterSet
from ..tokenizer import WordTokenizer
from .checkpoint import load_checkpoint, save_checkpoint
from .state import adapter_arrays, adapters_from_arrays, backbone_hash, encoder_arrays, encoder_from_checkpoint

MANIFEST = "manifest.json"
BUNDLE_FORMAT = "tplf-bundle"


@dataclass
class DeploymentBundle:
    root: Path
    manifest: dict

    @property
    def backbone_path(self) -> Path:
        return self.root / self.manifest["backbone"]["file"]

    def adapter_path(self, task: str) -> Path:
        return self.root / self.manifest["tasks"][task]["adapter"]

    @property
    def tasks(self) -> list[str]:
        return list(self.manifest["tasks"])


def head_arrays(head) -> tuple[dict[str, np.ndarray], dict]:
    """Arrays + metadata for a token head or a fitted linear probe."""
    if hasattr(head, "W") and hasattr(head, "classes_"):
        arrays = {"head.W": head.W, "head.b": head.b, "head.mean": head.mean_, "head.scale": head.scale_}
        meta = {"type": "linear_probe", "classes": [c.item() if hasattr(c, "item") else c for c in head.classes_]}
        return {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}, meta
    arrays = {f"head.{k}": v.detach().cpu().to(torch.float32).numpy() for k, v in head.state_dict().items()}
    return arrays, {"type": "token_head", "num_classes": int(head.weight.shape[0])}


def export_deployment(out_dir, encoder: Encoder, tokenizer: WordTokenizer,
                      adapters: TaskPrimaryAdapterSet | None = None,
                      heads: Mapping[str, tuple[Mapping[str, np.ndarray], dict]] | None = None) -> DeploymentBundle:
    """Write ``backbone.tplf``, ``adapters/<task>.tplf`` and ``manifest.json``.

    ``heads`` maps task → (arrays, metadata), e.g. from :func:`head_arrays`
    with extra metadata such as tag lists merged in.
    """
    root = Path(out_dir)
    (root / "adapters").mkdir(parents=True, exist_ok=True)
    bhash = backbone_hash(encoder)
    save_checkpoint(root / "backbone.tplf", encoder_arrays(encoder),
                    {"kind": "backbone", "encoder": encoder.config.to_dict(),
                     "tokenizer": tokenizer.to_dict(), "backbone_hash": bhash})
    heads = dict(heads or {})
    tasks = list(adapters.tasks) if adapters is not None else []
    tasks += [t for t in heads if t not in tasks]
    manifest = {"format": BUNDLE_FORMAT, "version": 1,
                "backbone": {"file": "backbone.tplf", "hash": bhash}, "tasks": {}}
    for task in tasks:
        arrays = adapter_arrays(adapters, [task], prefix="lora.") if adapters is not None and task in adapters.tasks else {}
        head_arr, head_meta = heads.get(task, ({}, None))
        arrays.update(head_arr)
        spec = adapters.spec.to_dict() if adapters is not None else None
        rel = f"adapters/{task}.tplf"
        save_checkpoint(root / rel, arrays, {"kind": "adapter", "task": task, "spec": spec,
                                              "backbone_hash": bhash, "head": head_meta})
        manifest["tasks"][task] = {"adapter": rel, "spec": spec, "head": head_meta}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return DeploymentBundle(root, manifest)


def open_bundle(path) -> DeploymentBundle:
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    if manifest.get("format") != BUNDLE_FORMAT:
        raise CheckpointError(f"{root} is not a deployment bundle")
    return DeploymentBundle(root, manifest)


def load_backbone(bundle: DeploymentBundle) -> tuple[Encoder, WordTokenizer]:
    ckpt = load_checkpoint(bundle.backbone_path)
    encoder = encoder_from_checkpoint(ckpt.config, ckpt.arrays)
    if backbone_hash(encoder) != bundle.manifest["backbone"]["hash"]:
        raise BackboneMismatchError("backbone file does not match the manifest hash")
    return encoder, WordTokenizer.from_dict(ckpt.config["tokenizer"])


def load_task_adapter(bundle: DeploymentBundle, task: str, backbone: Encoder):
    """Adapter group + head for ``task``; refuses a backbone whose hash differs."""
    if task not in bundle.manifest["tasks"]:
        raise CheckpointError(f"bundle has no task {task!r}")
    ckpt = load_checkpoint(bundle.adapter_path(task))
    expected = ckpt.config["backbone_hash"]
    if expected != bundle.manifest["backbone"]["hash"] or backbone_hash(backbone) != expected:
        raise BackboneMismatchError(f"adapter for {task} was trained against a different backbone")
    spec = ckpt.config.get("spec")
    adapters = adapters_from_arrays(LoraSpec.from_dict(spec), ckpt.arrays, prefix="lora.") if spec else None
    head = {k[len("head."):]: v for k, v in ckpt.arrays.items() if k.startswith("head.")}
    return adapters, head, ckpt.config.get("head")
