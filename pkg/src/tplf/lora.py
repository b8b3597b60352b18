"""Low-rank adapters and task-primary adapter groups."""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from .encoder import PROJECTIONS, Encoder
from .errors import AlreadyMergedError, ConfigurationError, TplfError

TASKS = ("NER", "TC")
DEFAULT_TARGETS = frozenset({"query", "key", "ffn_in", "ffn_out"})


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 8
    alpha: float = 16.0
    target_projections: frozenset = DEFAULT_TARGETS
    # None means "the last two layers"; resolved against the encoder depth
    target_layers: tuple[int, ...] | None = None
    init_sigma: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "target_projections", frozenset(self.target_projections))
        if self.target_layers is not None:
            object.__setattr__(self, "target_layers", tuple(sorted(set(self.target_layers))))
        if self.rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        if self.alpha < 0:
            raise ConfigurationError("LoRA alpha must be positive")
        if self.init_sigma < 0:
            raise ConfigurationError("init_sigma must be non-negative")
        unknown = self.target_projections - set(PROJECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown projections {sorted(unknown)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def last_layers(cls, n: int | str, num_layers: int, **kw) -> "LoraSpec":
        """Spec over the final ``n`` layers; ``n == "all"`` covers every layer."""
        n = num_layers if n == "all" else int(n)
        if not 0 < n <= num_layers:
            raise ConfigurationError(f"cannot place adapters on last {n} of {num_layers} layers")
        return cls(target_layers=tuple(range(num_layers - n, num_layers)), **kw)

    @classmethod
    def downstream(cls, num_layers: int) -> "LoraSpec":
        """Rank 32, alpha 64 on every layer (downstream NER adaptation)."""
        return cls(rank=32, alpha=64.0, target_layers=tuple(range(num_layers)))

    def resolve_layers(self, num_layers: int) -> tuple[int, ...]:
        layers = self.target_layers
        if layers is None:
            layers = tuple(range(max(num_layers - 2, 0), num_layers))
        bad = [i for i in layers if not 0 <= i < num_layers]
        if bad:
            raise ConfigurationError(f"target layers {bad} outside [0, {num_layers})")
        return tuple(layers)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "alpha": self.alpha,
            "target_projections": sorted(self.target_projections),
            "target_layers": None if self.target_layers is None else list(self.target_layers),
            "init_sigma": self.init_sigma,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LoraSpec":
        layers = d.get("target_layers")
        return cls(
            rank=int(d["rank"]),
            alpha=float(d["alpha"]),
            target_projections=frozenset(d.get("target_projections", DEFAULT_TARGETS)),
            target_layers=None if layers is None else tuple(layers),
            init_sigma=float(d.get("init_sigma", 0.02)),
        )


class LoraModule(nn.Module):
    """``delta(x) = (alpha / r) * B (A x)`` with A: r x in, B: out x r."""

    def __init__(self, A: torch.Tensor, B: torch.Tensor, alpha: float):
        super().__init__()
        if A.shape[0] != B.shape[1]:
            raise ConfigurationError(f"rank mismatch: A {tuple(A.shape)}, B {tuple(B.shape)}")
        self.A = nn.Parameter(A)
        self.B = nn.Parameter(B)
        self.alpha = float(alpha)
        self.merged = False

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.A.shape[1]:
            raise ConfigurationError(f"input dim {x.shape[-1]} != adapter in_dim {self.A.shape[1]}")
        return self.scale * ((x @ self.A.T) @ self.B.T)

    def weight_delta(self) -> torch.Tensor:
        return self.scale * (self.B @ self.A)

    def unmerge(self) -> None:
        self.merged = False


def lora_init(spec: LoraSpec, in_dim: int, out_dim: int, seed: int = 0,
              dtype: torch.dtype = torch.float32) -> LoraModule:
    if in_dim < 1 or out_dim < 1:
        raise ConfigurationError("adapter dims must be positive")
    if spec.rank > min(in_dim, out_dim):
        warnings.warn(f"LoRA rank {spec.rank} exceeds min(in, out) = {min(in_dim, out_dim)}", stacklevel=2)
    gen = torch.Generator().manual_seed(int(seed))
    A = torch.randn(spec.rank, in_dim, generator=gen, dtype=dtype) * spec.init_sigma
    B = torch.zeros(out_dim, spec.rank, dtype=dtype)
    return LoraModule(A, B, spec.alpha)


def lora_forward(base_output: torch.Tensor, module: LoraModule, x: torch.Tensor) -> torch.Tensor:
    return base_output + module.delta(x)


def lora_merge(weight: torch.Tensor, module: LoraModule) -> torch.Tensor:
    """Return ``W + (alpha/r) B A``; a module can only be merged once until ``unmerge``."""
    if module.merged:
        raise AlreadyMergedError("already merged")
    if weight.shape != (module.B.shape[0], module.A.shape[1]):
        raise ConfigurationError(f"weight {tuple(weight.shape)} incompatible with adapter")
    module.merged = True
    with torch.no_grad():
        if not module.B.any():
            return weight.detach().clone()
        return weight.detach() + module.weight_delta().to(weight.dtype)


def _key(layer: int, proj: str) -> str:
    return f"layer{layer}_{proj}"


def _parse_key(key: str) -> tuple[int, str]:
    head, proj = key.split("_", 1)
    return int(head[len("layer"):]), proj


class TaskPrimaryAdapterSet(nn.Module):
    """One LoRA group per task; groups never share parameters."""

    def __init__(self, spec: LoraSpec, groups: Mapping[str, Mapping[tuple[int, str], LoraModule]]):
        super().__init__()
        self.spec = spec
        self.groups = nn.ModuleDict(
            {task: nn.ModuleDict({_key(l, p): m for (l, p), m in mods.items()}) for task, mods in groups.items()}
        )
        self._check_disjoint()

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(self.groups.keys())

    def _check_disjoint(self) -> None:
        seen: dict[int, str] = {}
        for task, group in self.groups.items():
            for p in group.parameters():
                if id(p) in seen and seen[id(p)] != task:
                    raise TplfError(f"internal error: parameter shared by {seen[id(p)]} and {task}")
                seen[id(p)] = task

    def modules_for(self, task: str | None, layer: int) -> dict[str, LoraModule]:
        if task is None or task not in self.groups:
            return {}
        prefix = f"layer{layer}_"
        return {k[len(prefix):]: m for k, m in self.groups[task].items() if k.startswith(prefix)}

    def group(self, task: str) -> dict[tuple[int, str], LoraModule]:
        if task not in self.groups:
            return {}
        return {_parse_key(k): m for k, m in self.groups[task].items()}

    def layers(self, task: str) -> set[int]:
        return {l for l, _ in self.group(task)}

    def named_task_parameters(self, task: str) -> dict[str, nn.Parameter]:
        if task not in self.groups:
            return {}
        return {f"{task}.{k}": p for k, p in self.groups[task].named_parameters()}

    def subset(self, tasks: Iterable[str]) -> "TaskPrimaryAdapterSet":
        keep = {t: self.group(t) for t in tasks if t in self.groups}
        return TaskPrimaryAdapterSet(self.spec, keep)


def attach_task_primary(
    encoder: Encoder,
    spec: LoraSpec | None = None,
    tasks: Iterable[str] = TASKS,
    seed: int = 0,
) -> TaskPrimaryAdapterSet:
    """Build disjoint per-task LoRA groups for ``encoder``; the backbone is untouched."""
    spec = spec or LoraSpec()
    layers = spec.resolve_layers(encoder.config.num_layers)
    groups = {}
    for t_idx, task in enumerate(tasks):
        mods = {}
        for layer in layers:
            for p_idx, proj in enumerate(PROJECTIONS):
                if proj not in spec.target_projections:
                    continue
                lin = getattr(encoder.layers[layer], proj)
                child = _derive_seed(seed, t_idx, layer, p_idx)
                mods[(layer, proj)] = lora_init(spec, lin.in_dim, lin.out_dim, seed=child, dtype=encoder.dtype)
        groups[task] = mods
    return TaskPrimaryAdapterSet(spec, groups)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


def init_from_tpl(
    encoder: Encoder,
    spec: LoraSpec,
    tpl: Mapping[tuple[int, str], LoraModule] | None,
    task: str = "NER",
    seed: int = 0,
) -> TaskPrimaryAdapterSet:
    """Fresh single-task adapters; modules present in ``tpl`` start from it.

    The TPL factors occupy the first rows of A / columns of B (rescaled if the
    two scales differ), so the initial delta equals the TPL delta exactly when
    ranks allow; the extra B columns are zero.
    """
    fresh = attach_task_primary(encoder, spec, tasks=(task,), seed=seed)
    if not tpl:
        return fresh
    group = fresh.group(task)
    for key, src in tpl.items():
        if key not in group:
            continue
        dst = group[key]
        r = min(src.rank, dst.rank)
        with torch.no_grad():
            dst.A[:r] = src.A[:r].to(dst.A.dtype)
            dst.B[:, :r] = src.B[:, :r].to(dst.B.dtype) * (src.scale / dst.scale)
    return fresh


def merge_into_encoder(encoder: Encoder, adapters: TaskPrimaryAdapterSet, task: str) -> Encoder:
    """Deep copy of ``encoder`` with ``task``'s adapters folded into the weights."""
    merged = copy.deepcopy(encoder)
    for (layer, proj), mod in adapters.group(task).items():
        lin = getattr(merged.layers[layer], proj)
        new_w = lora_merge(lin.weight, mod)
        mod.unmerge()  # the live adapter stays usable; only the copy carries the merge
        with torch.no_grad():
            lin.weight.copy_(new_w)
    return merged

