"""Individual and multi-task pre-finetuning with task-primary gradient routing.

Each task loss is differentiated separately. Backbone gradients from both
losses are summed (optionally after PCGrad), while each adapter group and the
token head only ever see the gradient of their own task's loss.
"""

from __future__ import annotations

import logging
import math
import signal
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .encoder import Encoder
from .errors import ConfigurationError
from .lora import LoraSpec, TaskPrimaryAdapterSet, attach_task_primary
from .objectives import (
    ContrastiveBatch,
    TokenHead,
    TokenLabeledBatch,
    contrastive_loss,
    token_loss,
)
from .pseudo_label import label_batch
from .tokenizer import WordTokenizer

log = logging.getLogger(__name__)

MODES = ("PF-NER", "PF-TC", "MTPF", "MTPF-TPL", "PF-L")
PARTITIONS = ("backbone", "NER-TPL", "TC-TPL", "heads")
_ADAPTER_MODES = ("MTPF-TPL", "PF-L")


@dataclass
class TrainPlan:
    mode: str = "MTPF-TPL"
    pcgrad: bool = False
    tpl_layers: int | str | None = None
    tpl_rank: int = 8
    tpl_alpha: float = 16.0
    w_ner: float = 1.0
    w_tc: float = 1.0
    ner_batch_size: int = 256
    tc_batch_size: int = 1024
    total_steps: int = 100_000
    lr: float = 2e-5
    weight_decay: float = 0.01
    temperature: float = 0.05
    schedule: str = "joint"  # or "alternating"
    warmup_steps: int = 0
    snapshot_every: int = 0
    num_pseudo_classes: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode in _ADAPTER_MODES:
            if self.tpl_layers is None:
                self.tpl_layers = 2
        elif self.tpl_layers is not None:
            raise ConfigurationError(f"tpl_layers only applies to {_ADAPTER_MODES}, not {self.mode}")
        if self.schedule not in ("joint", "alternating"):
            raise ConfigurationError("schedule must be 'joint' or 'alternating'")
        if self.pcgrad and self.mode not in ("MTPF", "MTPF-TPL"):
            raise ConfigurationError("pcgrad needs two tasks sharing the backbone (MTPF or MTPF-TPL)")
        if min(self.w_ner, self.w_tc) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.temperature <= 0 or self.lr <= 0:
            raise ConfigurationError("temperature and lr must be positive")

    @property
    def uses_ner(self) -> bool:
        return self.mode != "PF-TC" and self.w_ner > 0

    @property
    def uses_tc(self) -> bool:
        return self.mode != "PF-NER" and self.w_tc > 0

    @property
    def uses_adapters(self) -> bool:
        return self.mode in _ADAPTER_MODES

    @property
    def trains_backbone(self) -> bool:
        return self.mode != "PF-L"

    def lora_spec(self, num_layers: int) -> LoraSpec:
        return LoraSpec.last_layers(self.tpl_layers, num_layers, rank=self.tpl_rank, alpha=self.tpl_alpha)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PrefinetuneModel:
    """Everything a pre-finetuning run mutates: backbone, optional TPL groups, token head."""

    encoder: Encoder
    head: TokenHead | None = None
    adapters: TaskPrimaryAdapterSet | None = None

    @classmethod
    def for_plan(cls, encoder: Encoder, plan: TrainPlan) -> "PrefinetuneModel":
        cfg = encoder.config
        head = TokenHead(cfg.hidden_dim, plan.num_pseudo_classes, seed=plan.seed, dtype=encoder.dtype) if plan.uses_ner else None
        adapters = None
        if plan.uses_adapters:
            tasks = [t for t, used in (("NER", plan.uses_ner), ("TC", plan.uses_tc)) if used]
            adapters = attach_task_primary(encoder, plan.lora_spec(cfg.num_layers), tasks, seed=plan.seed)
        return cls(encoder, head, adapters)

    def partitions(self) -> dict[str, dict[str, torch.nn.Parameter]]:
        parts: dict[str, dict[str, torch.nn.Parameter]] = {p: {} for p in PARTITIONS}
        parts["backbone"] = {f"backbone.{n}": p for n, p in self.encoder.named_parameters()}
        if self.adapters is not None:
            for task in ("NER", "TC"):
                parts[f"{task}-TPL"] = {f"tpl.{n}": p for n, p in self.adapters.named_task_parameters(task).items()}
        if self.head is not None:
            parts["heads"] = {f"head.ner.{n}": p for n, p in self.head.named_parameters()}
        return parts

    def named_parameters(self) -> dict[str, torch.nn.Parameter]:
        out = {}
        for part in self.partitions().values():
            out.update(part)
        return out

    def trainable(self, plan: TrainPlan) -> dict[str, torch.nn.Parameter]:
        parts = self.partitions()
        names = ["NER-TPL", "TC-TPL", "heads"] + (["backbone"] if plan.trains_backbone else [])
        out = {}
        for name in names:
            out.update(parts[name])
        return out

    def train(self, mode: bool = True) -> None:
        for m in (self.encoder, self.head, self.adapters):
            if m is not None:
                m.train(mode)


def partition_of(name: str) -> str:
    if name.startswith("backbone."):
        return "backbone"
    if name.startswith("tpl.NER."):
        return "NER-TPL"
    if name.startswith("tpl.TC."):
        return "TC-TPL"
    if name.startswith("head."):
        return "heads"
    raise ConfigurationError(f"parameter {name!r} belongs to no partition")


def pcgrad_project(g_a, g_b):
    """Two-task PCGrad. Each gradient is projected against the other's *raw* gradient
    when they conflict; non-conflicting inputs are returned unchanged (same objects)."""
    dot = float((g_a * g_b).sum())
    if dot >= 0:
        return g_a, g_b
    nb = float((g_b * g_b).sum())
    na = float((g_a * g_a).sum())
    a_out = g_a - (dot / nb) * g_b if nb > 0 else g_a
    b_out = g_b - (dot / na) * g_a if na > 0 else g_b
    return a_out, b_out


class AdamW:
    """Adam with decoupled weight decay over a name → parameter mapping.

    Decay is applied first (``theta *= 1 - lr * wd``), then the bias-corrected
    moment update. Parameters whose gradient is non-finite are skipped for the
    step and counted.
    """

    def __init__(self, params: Mapping[str, torch.Tensor], lr: float = 2e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.skipped_total = 0

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor], lr: float | None = None) -> dict:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        skipped = 0
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                skipped += 1
                continue
            if self.weight_decay:
                p.mul_(1 - lr * self.weight_decay)
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m / bc1, denom, value=-lr)
        self.skipped_total += skipped
        return {"skipped_params": skipped}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"optim.m.{n}"] = self.exp_avg[n].detach().cpu().numpy()
            out[f"optim.v.{n}"] = self.exp_avg_sq[n].detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        for n, p in self.params.items():
            self.exp_avg[n] = torch.as_tensor(np.array(arrays[f"optim.m.{n}"])).to(p.dtype)
            self.exp_avg_sq[n] = torch.as_tensor(np.array(arrays[f"optim.v.{n}"])).to(p.dtype)
        self.step_count = step_count


def optimizer_apply(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: AdamW) -> dict:
    if set(params) != set(state.params):
        raise ConfigurationError("optimizer state does not match the parameter set")
    for n, g in grads.items():
        if n in params and g.shape != params[n].shape:
            raise ConfigurationError(f"gradient shape {tuple(g.shape)} != parameter shape for {n}")
    return state.step(grads)


def hierarchical_sample(registry: Mapping[str, Sequence], batch_size: int, rng: np.random.Generator):
    """Pick a dataset uniformly, then a uniform batch from it.

    Small datasets are sampled with replacement. Returns ``(name, items)``.
    """
    if not registry:
        raise ConfigurationError("empty dataset registry")
    names = list(registry)
    name = names[int(rng.integers(len(names)))]
    data = registry[name]
    if len(data) == 0:
        raise ConfigurationError(f"dataset {name!r} is empty")
    idx = rng.choice(len(data), size=batch_size, replace=len(data) < batch_size)
    return name, [data[int(i)] for i in idx]


@dataclass
class StepResult:
    losses: dict[str, float]
    aborted: bool = False
    diagnostics: dict = field(default_factory=dict)
    grads: dict[str, torch.Tensor] | None = None


def _grads(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor | None]:
    names = list(params)
    got = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return dict(zip(names, got))


def _flat(grads: Mapping[str, torch.Tensor], names: Sequence[str]) -> torch.Tensor:
    return torch.cat([grads[n].reshape(-1) for n in names])


def _unflat(vec: torch.Tensor, like: Mapping[str, torch.Tensor], names: Sequence[str]) -> dict[str, torch.Tensor]:
    out, pos = {}, 0
    for n in names:
        k = like[n].numel()
        out[n] = vec[pos:pos + k].view_as(like[n])
        pos += k
    return out


def compute_task_gradients(model: PrefinetuneModel, plan: TrainPlan, ner_batch: TokenLabeledBatch | None,
                           tc_batch: ContrastiveBatch | None, step: int = 0):
    """Per-task losses and raw gradients over the trainable parameters.

    Returns ``(losses, {task: {name: grad or None}})``; ``None`` means the
    parameter did not take part in that task's graph.
    """
    params = model.trainable(plan)
    run_ner = plan.uses_ner and ner_batch is not None
    run_tc = plan.uses_tc and tc_batch is not None
    if plan.schedule == "alternating" and run_ner and run_tc:
        run_ner, run_tc = step % 2 == 0, step % 2 == 1
    losses, raw = {}, {}
    adapters = model.adapters
    if run_ner:
        loss = token_loss(model.encoder, model.head, ner_batch, adapters, "NER", mode="train")
        losses["loss_ner"] = loss
        raw["NER"] = _grads(loss, params) if torch.isfinite(loss) else None
    if run_tc:
        loss = contrastive_loss(model.encoder, tc_batch, adapters, "TC", plan.temperature, mode="train")
        losses["loss_tc"] = loss
        raw["TC"] = _grads(loss, params) if torch.isfinite(loss) else None
    return losses, raw


def routing_violations(raw: Mapping[str, Mapping[str, torch.Tensor | None]]) -> list[str]:
    """Names of other-task TPL parameters that received a nonzero gradient."""
    bad = []
    for task, grads in raw.items():
        if grads is None:
            continue
        other = "TC-TPL" if task == "NER" else "NER-TPL"
        for n, g in grads.items():
            if partition_of(n) == other and g is not None and bool(g.any()):
                bad.append(f"{task}->{n}")
    return bad


def mtpf_step(model: PrefinetuneModel, ner_batch: TokenLabeledBatch | None, tc_batch: ContrastiveBatch | None,
              plan: TrainPlan, optimizer: AdamW, step: int = 0, lr: float | None = None,
              check_routing: bool = False, keep_grads: bool = False) -> StepResult:
    """One optimizer step of the plan's mode.

    NER gradients reach backbone, NER-TPL and the token head; TC gradients reach
    backbone and TC-TPL. The backbone gets ``w_ner * g_ner + w_tc * g_tc`` with
    PCGrad applied to the raw backbone gradients first when enabled.
    """
    if ner_batch is None and tc_batch is None:
        raise ConfigurationError("mtpf_step needs at least one batch")
    model.train(True)
    losses_t, raw = compute_task_gradients(model, plan, ner_batch, tc_batch, step)
    losses = {k: float(v.detach()) for k, v in losses_t.items()}
    diagnostics: dict = {}
    if any(g is None for g in raw.values()) or not all(math.isfinite(v) for v in losses.values()):
        diagnostics["non_finite_loss"] = sorted(k for k, v in losses.items() if not math.isfinite(v))
        log.warning("step %d aborted: non-finite loss %s", step, losses)
        return StepResult(losses, aborted=True, diagnostics=diagnostics)
    if check_routing:
        diagnostics["routing_violations"] = routing_violations(raw)
    params = model.trainable(plan)
    dense = {t: {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in grads.items()}
             for t, grads in raw.items()}
    if plan.pcgrad and len(dense) == 2:
        names = [n for n in params if partition_of(n) == "backbone"]
        ga, gb = _flat(dense["NER"], names), _flat(dense["TC"], names)
        pa, pb = pcgrad_project(ga, gb)
        diagnostics["cos_backbone"] = float((ga @ gb) / (ga.norm() * gb.norm()).clamp_min(1e-30))
        diagnostics["pcgrad_projected"] = pa is not ga
        dense["NER"].update(_unflat(pa, params, names))
        dense["TC"].update(_unflat(pb, params, names))
    weights = {"NER": plan.w_ner, "TC": plan.w_tc}
    combined: dict[str, torch.Tensor] = {}
    for task, grads in dense.items():
        w = weights[task]
        for n, g in grads.items():
            combined[n] = combined[n] + w * g if n in combined else w * g
    diagnostics.update(optimizer.step(combined, lr=lr))
    return StepResult(losses, diagnostics=diagnostics, grads=combined if keep_grads else None)


def make_optimizer(model: PrefinetuneModel, plan: TrainPlan) -> AdamW:
    return AdamW(model.trainable(plan), lr=plan.lr, weight_decay=plan.weight_decay)


def lr_at(plan: TrainPlan, step: int) -> float:
    if plan.warmup_steps and step < plan.warmup_steps:
        return plan.lr * (step + 1) / plan.warmup_steps
    return plan.lr


# datasets for the training loop: name -> list of examples
#   NER: (words, word_labels)   TC: (anchor_words, positive_words)
NerRegistry = Mapping[str, Sequence[tuple[Sequence[str], Sequence[int]]]]
PairRegistry = Mapping[str, Sequence[tuple[Sequence[str], Sequence[str]]]]


def make_ner_batch(items, tokenizer: WordTokenizer, max_len: int) -> TokenLabeledBatch:
    return label_batch([w for w, _ in items], [l for _, l in items], tokenizer, max_len=max_len)


def make_pair_batch(items, tokenizer: WordTokenizer, max_len: int) -> ContrastiveBatch:
    return ContrastiveBatch(tokenizer.encode([a for a, _ in items], max_len=max_len),
                            tokenizer.encode([p for _, p in items], max_len=max_len))


class StopRequested:
    """Flag set by SIGINT or by the presence of a stop file."""

    def __init__(self, stop_file: Path | None = None):
        self.stop_file = stop_file
        self.flag = False

    def __call__(self) -> bool:
        return self.flag or (self.stop_file is not None and self.stop_file.exists())

    def install(self):
        try:
            return signal.signal(signal.SIGINT, self._handler)
        except ValueError:  # not in main thread
            return None

    def _handler(self, signum, frame):
        self.flag = True


@dataclass
class RunResult:
    model: PrefinetuneModel
    optimizer: AdamW
    steps_done: int
    stopped_early: bool
    history: list[dict]


def pretrain(
    model: PrefinetuneModel,
    plan: TrainPlan,
    tokenizer: WordTokenizer,
    ner_data: NerRegistry | None = None,
    tc_data: PairRegistry | None = None,
    on_metrics: Callable[[int, dict], None] | None = None,
    on_snapshot: Callable[[int, PrefinetuneModel], None] | None = None,
    should_stop: Callable[[], bool] | None = None,
    optimizer: AdamW | None = None,
    start_step: int = 0,
    rng: np.random.Generator | None = None,
    debug_every: int = 0,
) -> RunResult:
    """Run ``plan.total_steps`` steps of pre-finetuning.

    Dataset choice and batch sampling use ``rng`` (seeded from the plan when
    omitted). ``on_snapshot`` fires at step 0 and every ``plan.snapshot_every``
    steps, and after the final step.
    """
    if plan.uses_ner and not ner_data:
        raise ConfigurationError(f"mode {plan.mode} needs NER data")
    if plan.uses_tc and not tc_data:
        raise ConfigurationError(f"mode {plan.mode} needs sentence-pair data")
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    optimizer = optimizer or make_optimizer(model, plan)
    max_len = model.encoder.config.max_seq_len
    history = []
    stopped = False
    step = start_step
    if on_snapshot and plan.snapshot_every:
        on_snapshot(step, model)
    while step < plan.total_steps:
        if should_stop is not None and should_stop():
            stopped = True
            break
        ner_batch = tc_batch = None
        record: dict = {}
        if plan.uses_ner:
            name, items = hierarchical_sample(ner_data, plan.ner_batch_size, rng)
            ner_batch = make_ner_batch(items, tokenizer, max_len)
            record["ner_dataset"] = name
        if plan.uses_tc:
            name, items = hierarchical_sample(tc_data, plan.tc_batch_size, rng)
            tc_batch = make_pair_batch(items, tokenizer, max_len)
            record["tc_dataset"] = name
        check = bool(debug_every) and step % debug_every == 0
        res = mtpf_step(model, ner_batch, tc_batch, plan, optimizer, step=step, lr=lr_at(plan, step),
                        check_routing=check)
        if check and res.diagnostics.get("routing_violations"):
            raise AssertionError(f"routing violated: {res.diagnostics['routing_violations'][:5]}")
        step += 1
        record.update(res.losses)
        record["aborted"] = res.aborted
        if "cos_backbone" in res.diagnostics:
            record["cos_backbone"] = res.diagnostics["cos_backbone"]
        history.append(record)
        if on_metrics:
            on_metrics(step, record)
        if on_snapshot and plan.snapshot_every and (step % plan.snapshot_every == 0 or step == plan.total_steps):
            on_snapshot(step, model)
    return RunResult(model, optimizer, step, stopped, history)
