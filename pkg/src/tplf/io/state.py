"""Map models, tokenizers and optimizer state onto checkpoint arrays + config."""

from __future__ import annotations

import hashlib
from typing import Mapping

import numpy as np
import torch

from ..encoder import Encoder, EncoderConfig
from ..errors import CheckpointError
from ..lora import LoraModule, LoraSpec, TaskPrimaryAdapterSet, _parse_key
from ..objectives import TokenHead
from ..tokenizer import WordTokenizer
from ..trainer import AdamW, PrefinetuneModel, TrainPlan
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint


def _f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().to(torch.float32).numpy()


def encoder_arrays(encoder: Encoder, prefix: str = "backbone.") -> dict[str, np.ndarray]:
    return {prefix + k: _f32(v) for k, v in encoder.state_dict().items()}


def backbone_hash(encoder: Encoder) -> str:
    """SHA-256 over the float32 backbone weights (names sorted)."""
    h = hashlib.sha256()
    for name, arr in sorted(encoder_arrays(encoder, "").items()):
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def encoder_from_checkpoint(config: Mapping, arrays: Mapping[str, np.ndarray], prefix: str = "backbone.") -> Encoder:
    enc = Encoder(EncoderConfig.from_dict(config["encoder"]))
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    missing = set(enc.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks backbone arrays: {sorted(missing)[:3]}...")
    enc.load_state_dict(state)
    return enc


def adapter_arrays(adapters: TaskPrimaryAdapterSet, tasks=None, prefix: str = "tpl.") -> dict[str, np.ndarray]:
    out = {}
    for task in tasks or adapters.tasks:
        for name, p in adapters.named_task_parameters(task).items():
            out[prefix + name] = _f32(p)
    return out


def adapters_from_arrays(spec: LoraSpec, arrays: Mapping[str, np.ndarray], prefix: str = "tpl.") -> TaskPrimaryAdapterSet:
    factors: dict[str, dict[tuple[int, str], dict[str, np.ndarray]]] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        task, key, which = name[len(prefix):].split(".")
        factors.setdefault(task, {}).setdefault(_parse_key(key), {})[which] = arr
    groups = {
        task: {k: LoraModule(torch.from_numpy(np.array(ab["A"])), torch.from_numpy(np.array(ab["B"])), spec.alpha)
               for k, ab in mods.items()}
        for task, mods in factors.items()
    }
    return TaskPrimaryAdapterSet(spec, groups)


def save_training_state(path, model: PrefinetuneModel, tokenizer: WordTokenizer, plan: TrainPlan,
                        optimizer: AdamW | None = None, step: int = 0,
                        rng: np.random.Generator | None = None, extra: dict | None = None):
    arrays = encoder_arrays(model.encoder)
    if model.adapters is not None:
        arrays.update(adapter_arrays(model.adapters))
    if model.head is not None:
        arrays.update({f"head.ner.{k}": _f32(v) for k, v in model.head.state_dict().items()})
    if optimizer is not None:
        arrays.update({k: np.asarray(v, dtype=np.float32) for k, v in optimizer.state_arrays().items()})
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    config = {
        "kind": "training_state",
        "encoder": model.encoder.config.to_dict(),
        "tokenizer": tokenizer.to_dict(),
        "plan": plan.to_dict(),
        "lora_spec": model.adapters.spec.to_dict() if model.adapters is not None else None,
        "step": int(step),
        "optimizer_step": optimizer.step_count if optimizer is not None else 0,
        "rng": rng.bit_generator.state if rng is not None else None,
    }
    if extra:
        config["extra"] = extra
    return save_checkpoint(path, arrays, config)


def load_training_state(path):
    """Inverse of :func:`save_training_state`.

    Returns ``(model, tokenizer, plan, optimizer, step, rng)``; also restores
    the global torch RNG so dropout masks continue identically.
    """
    ckpt: Checkpoint = load_checkpoint(path)
    cfg = ckpt.config
    if cfg.get("kind") != "training_state":
        raise CheckpointError(f"expected a training_state checkpoint, got {cfg.get('kind')!r}")
    plan = TrainPlan(**cfg["plan"])
    encoder = encoder_from_checkpoint(cfg, ckpt.arrays)
    adapters = None
    if cfg.get("lora_spec") is not None:
        adapters = adapters_from_arrays(LoraSpec.from_dict(cfg["lora_spec"]), ckpt.arrays)
    head = None
    if "head.ner.weight" in ckpt.arrays:
        w = ckpt.arrays["head.ner.weight"]
        head = TokenHead(w.shape[1], w.shape[0])
        head.load_state_dict({"weight": torch.from_numpy(np.array(w)),
                              "bias": torch.from_numpy(np.array(ckpt.arrays["head.ner.bias"]))})
    model = PrefinetuneModel(encoder, head, adapters)
    tokenizer = WordTokenizer.from_dict(cfg["tokenizer"])
    optimizer = AdamW(model.trainable(plan), lr=plan.lr, weight_decay=plan.weight_decay)
    if any(k.startswith("optim.") for k in ckpt.arrays):
        optimizer.load_state_arrays(ckpt.arrays, cfg.get("optimizer_step", 0))
    rng = None
    if cfg.get("rng") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = cfg["rng"]
    if "rng.torch" in ckpt.arrays:
        torch.set_rng_state(torch.from_numpy(np.array(ckpt.arrays["rng.torch"])))
    return model, tokenizer, plan, optimizer, int(cfg.get("step", 0)), rng
