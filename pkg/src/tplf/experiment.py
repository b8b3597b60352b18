"""Plan-driven experiments: data preparation, pre-finetuning runs, snapshots, downstream scores, sweeps.

A plan is a YAML/JSON mapping validated against :data:`PLAN_SCHEMA` before
anything is computed. Settings resolve as CLI overrides > plan > defaults.
Relative data paths are resolved against ``$TPLF_DATA_DIR`` when set,
otherwise against the plan file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import signal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np
import torch
import yaml

from .adaptation import NerAdaptConfig, adapt_ner, adapt_tc
from .encoder import Encoder, EncoderConfig, SentenceEncoder
from .errors import ConfigurationError
from .evaluation import EntityBank, build_perturbed_set, limited_data_split, perturbation_similarity, token_homogeneity
from .io.checkpoint import save_checkpoint
from .io.conll import NerDataset, load_conll
from .io.labeled import load_labeled_texts
from .io.metrics import MetricsWriter, write_csv
from .io.pairs import load_pairs
from .io.state import encoder_arrays, save_training_state
from .pseudo_label import PseudoLabelConfig, build_pseudo_dataset
from .synthetic import SyntheticWorld
from .tokenizer import WordTokenizer
from .trainer import MODES, PrefinetuneModel, StopRequested, TrainPlan, pretrain

log = logging.getLogger(__name__)

DATA_ENV = "TPLF_DATA_DIR"
PRECISIONS = ("f32", "f64-test")

_path_map = {"type": "object", "additionalProperties": {"type": "string"}, "minProperties": 1}
_tpl_layers = {"anyOf": [{"type": "integer", "minimum": 1}, {"const": "all"}]}

PLAN_SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode"],
    "properties": {
        "mode": {"enum": list(MODES) + ["sweep"]},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "threads": {"type": "integer", "minimum": 1},
        "precision": {"enum": list(PRECISIONS)},
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["tiny", "minilm", "distilbert"]},
                "num_layers": {"type": "integer", "minimum": 0},
                "hidden_dim": {"type": "integer", "minimum": 1},
                "num_heads": {"type": "integer", "minimum": 1},
                "ffn_dim": {"type": "integer", "minimum": 1},
                "max_seq_len": {"type": "integer", "minimum": 3},
                "dropout_rate": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pcgrad": {"type": "boolean"},
                "tpl_layers": _tpl_layers,
                "tpl_rank": {"type": "integer", "minimum": 1},
                "tpl_alpha": {"type": "number", "minimum": 0},
                "w_ner": {"type": "number", "minimum": 0},
                "w_tc": {"type": "number", "minimum": 0},
                "ner_batch_size": {"type": "integer", "minimum": 1},
                "tc_batch_size": {"type": "integer", "minimum": 2},
                "total_steps": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "schedule": {"enum": ["joint", "alternating"]},
                "warmup_steps": {"type": "integer", "minimum": 0},
                "snapshot_every": {"type": "integer", "minimum": 0},
                "save_snapshots": {"type": "boolean"},
            },
        },
        "pseudo_label": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "k": {"type": "integer", "minimum": 2},
                "kmeans_batch": {"type": "integer", "minimum": 2},
                "kmeans_iters": {"type": "integer", "minimum": 1},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ner": _path_map,
                "pairs": _path_map,
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "seed": {"type": "integer", "minimum": 0},
                        "n_ner": {"type": "integer", "minimum": 1},
                        "n_pairs": {"type": "integer", "minimum": 1},
                        "n_entities": {"type": "integer", "minimum": 2},
                        "n_topics": {"type": "integer", "minimum": 1},
                        "pair_style": {"enum": ["entity", "paraphrase"]},
                    },
                },
                "tokenizer": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "min_freq": {"type": "integer", "minimum": 1},
                        "max_words": {"type": ["integer", "null"], "minimum": 0},
                        "lowercase": {"type": "boolean"},
                    },
                },
            },
        },
        "downstream": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ner_train": {"type": "string"},
                "ner_test": {"type": "string"},
                "tc_train": {"type": "string"},
                "tc_test": {"type": "string"},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "n_ner_train": {"type": "integer", "minimum": 1},
                        "n_ner_test": {"type": "integer", "minimum": 1},
                        "n_tc_train": {"type": "integer", "minimum": 1},
                        "n_tc_test": {"type": "integer", "minimum": 1},
                        "tc_task": {"enum": ["entity_group", "topic"]},
                    },
                },
                "adapt": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "head_epochs": {"type": "integer", "minimum": 0},
                        "joint_epochs": {"type": "integer", "minimum": 0},
                        "batch_size": {"type": "integer", "minimum": 1},
                        "lr": {"type": "number", "exclusiveMinimum": 0},
                        "weight_decay": {"type": "number", "minimum": 0},
                        "lora_rank": {"type": "integer", "minimum": 1},
                        "lora_alpha": {"type": "number", "minimum": 0},
                        "train_backbone": {"type": "boolean"},
                    },
                },
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sentences": {"type": "string"},
                "n_sentences": {"type": "integer", "minimum": 1},
                "n_variants": {"type": "integer", "minimum": 1},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["tpl_layers"],
            "properties": {"tpl_layers": {"type": "array", "items": _tpl_layers, "minItems": 1}},
        },
    },
}

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "precision": "f32",
    "encoder": {"preset": "tiny"},
    "train": {
        "pcgrad": False,
        "tpl_rank": 8,
        "tpl_alpha": 16.0,
        "w_ner": 1.0,
        "w_tc": 1.0,
        "ner_batch_size": 256,
        "tc_batch_size": 1024,
        "total_steps": 100_000,
        "lr": 2e-5,
        "weight_decay": 0.01,
        "temperature": 0.05,
        "schedule": "joint",
        "warmup_steps": 0,
        "snapshot_every": 0,
        "save_snapshots": True,
    },
    "pseudo_label": {"enabled": False, "k": 200, "kmeans_batch": 1024, "kmeans_iters": 10},
    "data": {"tokenizer": {"min_freq": 1, "max_words": None, "lowercase": False}},
}
ANALYSIS_DEFAULTS = {"n_sentences": 2000, "n_variants": 4}

_TINY = {"num_layers": 2, "hidden_dim": 32, "num_heads": 4, "ffn_dim": 64, "max_seq_len": 64, "dropout_rate": 0.1}
_PRESETS = {
    "tiny": _TINY,
    "minilm": {"num_layers": 12, "hidden_dim": 384, "num_heads": 12, "ffn_dim": 1536, "max_seq_len": 512},
    "distilbert": {"num_layers": 6, "hidden_dim": 768, "num_heads": 12, "ffn_dim": 3072, "max_seq_len": 512},
}


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_plan(plan: Mapping, partial: bool = False) -> None:
    """Raise :class:`ConfigurationError` naming the first schema violation.

    ``partial`` skips the required-key check, for plans that get their mode
    from the command line.
    """
    schema = {k: v for k, v in PLAN_SCHEMA.items() if k != "required"} if partial else PLAN_SCHEMA
    try:
        jsonschema.validate(plan, schema)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"plan invalid at {where}: {e.message}") from None
    if not partial and plan["mode"] == "sweep" and "sweep" not in plan:
        raise ConfigurationError("plan invalid: mode 'sweep' needs a 'sweep' section")


def load_plan(path) -> dict:
    path = Path(path)
    try:
        plan = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse plan {path}: {e}") from None
    if not isinstance(plan, dict):
        raise ConfigurationError(f"plan {path} must be a mapping")
    return plan


def resolve_plan(plan: Mapping, overrides: Mapping | None = None) -> dict:
    """Validate, then layer defaults < plan < overrides (overrides validated too)."""
    validate_plan(plan, partial=True)
    merged = deep_merge(DEFAULTS, plan)
    if overrides:
        merged = deep_merge(merged, {k: v for k, v in overrides.items() if v is not None})
    validate_plan(merged)
    return merged


def _data_root(plan_dir: Path | None) -> Path:
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return plan_dir if plan_dir is not None else Path.cwd()


def _resolve(path: str, root: Path) -> Path:
    p = Path(os.path.expanduser(path))
    p = p if p.is_absolute() else root / p
    if not p.exists():
        raise ConfigurationError(f"data file not found: {p}")
    return p


@dataclass
class PreparedData:
    """Everything a run consumes, loaded and checked before any training."""

    tokenizer: WordTokenizer
    ner_sentences: dict[str, NerDataset] = field(default_factory=dict)
    pairs: dict[str, list[tuple[list[str], list[str]]]] = field(default_factory=dict)
    ner_train: NerDataset | None = None
    ner_test: NerDataset | None = None
    tc_train: tuple[list[list[str]], list] | None = None
    tc_test: tuple[list[list[str]], list] | None = None
    analysis: NerDataset | None = None
    hashes: dict[str, str] = field(default_factory=dict)

    @property
    def has_downstream(self) -> bool:
        return self.ner_train is not None or self.tc_train is not None


def _pairs_hash(pairs) -> str:
    payload = json.dumps(pairs, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def prepare_data(plan: Mapping, plan_dir: Path | None = None) -> PreparedData:
    root = _data_root(plan_dir)
    data = plan.get("data", {})
    ner: dict[str, NerDataset] = {}
    pairs: dict[str, list] = {}
    prepared_kw: dict[str, Any] = {}
    syn = data.get("synthetic")
    world = None
    if syn is not None:
        sseed = syn.get("seed", plan["seed"])
        world = SyntheticWorld.create(sseed, n_entities=syn.get("n_entities", 40), n_topics=syn.get("n_topics", 8))
        s, t = world.ner_corpus(syn.get("n_ner", 600), seed=sseed + 1)
        ner["synthetic"] = NerDataset(s, t)
        make = world.entity_pair_corpus if syn.get("pair_style", "paraphrase") == "entity" else world.pair_corpus
        for name, items in make(syn.get("n_pairs", 5000), seed=sseed + 2).items():
            pairs[f"synthetic-{name}"] = items
    for name, path in data.get("ner", {}).items():
        ner[name] = load_conll(_resolve(path, root))
    for name, path in data.get("pairs", {}).items():
        pairs[name] = load_pairs(_resolve(path, root)).tokenized()

    ds = plan.get("downstream")
    if ds is not None:
        if "ner_train" in ds or "ner_test" in ds:
            if not ("ner_train" in ds and "ner_test" in ds):
                raise ConfigurationError("downstream needs both ner_train and ner_test")
            prepared_kw["ner_train"] = load_conll(_resolve(ds["ner_train"], root))
            prepared_kw["ner_test"] = load_conll(_resolve(ds["ner_test"], root))
        if "tc_train" in ds or "tc_test" in ds:
            if not ("tc_train" in ds and "tc_test" in ds):
                raise ConfigurationError("downstream needs both tc_train and tc_test")
            tr, te = load_labeled_texts(_resolve(ds["tc_train"], root)), load_labeled_texts(_resolve(ds["tc_test"], root))
            prepared_kw["tc_train"] = (tr.tokenized(), tr.labels)
            prepared_kw["tc_test"] = (te.tokenized(), te.labels)
        dsyn = ds.get("synthetic")
        if dsyn is not None:
            if world is None:
                raise ConfigurationError("downstream.synthetic needs data.synthetic")
            sseed = world.seed
            prepared_kw.setdefault("ner_train", NerDataset(*world.ner_corpus(dsyn.get("n_ner_train", 300), seed=sseed + 3)))
            prepared_kw.setdefault("ner_test", NerDataset(*world.ner_corpus(dsyn.get("n_ner_test", 300), seed=sseed + 4)))
            gen = world.entity_group_classification if dsyn.get("tc_task", "topic") == "entity_group" \
                else world.topic_classification
            prepared_kw.setdefault("tc_train", gen(dsyn.get("n_tc_train", 400), seed=sseed + 5))
            prepared_kw.setdefault("tc_test", gen(dsyn.get("n_tc_test", 400), seed=sseed + 6))
        fraction = ds.get("fraction")
        if fraction is not None and "ner_train" in prepared_kw:
            full = prepared_kw["ner_train"]
            idx = limited_data_split(list(range(len(full))), fraction, seed=plan["seed"],
                                     types_of=lambda i: NerDataset([full.sentences[i]], [full.tags[i]]).entity_types())
            prepared_kw["ner_train"] = full.subset(idx)

    an = plan.get("analysis")
    if an is not None:
        if "sentences" in an:
            prepared_kw["analysis"] = load_conll(_resolve(an["sentences"], root))
        elif world is not None:
            n = an.get("n_sentences", ANALYSIS_DEFAULTS["n_sentences"])
            prepared_kw["analysis"] = NerDataset(*world.ner_corpus(min(n, 500), seed=world.seed + 7))
        else:
            raise ConfigurationError("analysis needs 'sentences' or synthetic data")

    _check_mode_data(plan, ner, pairs)
    texts: list[list[str]] = []
    for d in ner.values():
        texts.extend(d.sentences)
    for items in pairs.values():
        for a, p in items:
            texts.extend([a, p])
    for key in ("ner_train", "ner_test", "analysis"):
        if key in prepared_kw:
            texts.extend(prepared_kw[key].sentences)
    for key in ("tc_train", "tc_test"):
        if key in prepared_kw:
            texts.extend(prepared_kw[key][0])
    if world is not None:
        texts.extend(world.all_words())
    tk = data.get("tokenizer", {})
    tokenizer = WordTokenizer.build(texts, min_freq=tk.get("min_freq", 1), max_words=tk.get("max_words"),
                                    lowercase=tk.get("lowercase", False))
    hashes = {f"ner:{n}": d.content_hash() for n, d in ner.items()}
    hashes.update({f"pairs:{n}": _pairs_hash(p) for n, p in pairs.items()})
    for key in ("ner_train", "ner_test", "analysis"):
        if key in prepared_kw:
            hashes[key] = prepared_kw[key].content_hash()
    for key in ("tc_train", "tc_test"):
        if key in prepared_kw:
            hashes[key] = _pairs_hash([list(prepared_kw[key][0]), [str(x) for x in prepared_kw[key][1]]])
    return PreparedData(tokenizer, ner, pairs, hashes=hashes, **prepared_kw)


def _modes_of(plan: Mapping) -> list[str]:
    return ["MTPF-TPL"] if plan["mode"] == "sweep" else [plan["mode"]]


def _check_mode_data(plan: Mapping, ner: Mapping, pairs: Mapping) -> None:
    for mode in _modes_of(plan):
        needs_ner = mode != "PF-TC"
        needs_tc = mode != "PF-NER"
        if needs_ner and not ner:
            raise ConfigurationError(f"mode {mode} needs NER data (data.ner or data.synthetic)")
        if needs_tc and not pairs:
            raise ConfigurationError(f"mode {mode} needs sentence pairs (data.pairs or data.synthetic)")


def encoder_config(plan: Mapping, vocab_size: int) -> EncoderConfig:
    enc = dict(plan.get("encoder", {}))
    base = dict(_PRESETS[enc.pop("preset", "tiny")])
    base.update(enc)
    return EncoderConfig(vocab_size=vocab_size, seed=int(plan["seed"]) % 2**63, **base)


def train_plan(plan: Mapping, mode: str, num_classes: int, tpl_layers=None) -> TrainPlan:
    kw = {k: v for k, v in plan["train"].items() if k not in ("save_snapshots", "tpl_layers")}
    if mode in ("MTPF-TPL", "PF-L"):
        kw["tpl_layers"] = tpl_layers if tpl_layers is not None else plan["train"].get("tpl_layers", 2)
    if mode not in ("MTPF", "MTPF-TPL"):
        kw["pcgrad"] = False
    return TrainPlan(mode=mode, num_pseudo_classes=num_classes, seed=int(plan["seed"]) % 2**63, **kw)


def ner_registry(plan: Mapping, data: PreparedData, teacher: Encoder) -> tuple[dict, int, list[str] | None]:
    """Word-label datasets for the token objective: k-means pseudo labels, or the files' own tags."""
    pl = plan["pseudo_label"]
    if pl["enabled"]:
        cfg = PseudoLabelConfig(k=pl["k"], kmeans_batch=max(pl["kmeans_batch"], pl["k"]),
                                kmeans_iters=pl["kmeans_iters"], seed=int(plan["seed"]) % 2**63)
        all_sents = [s for d in data.ner_sentences.values() for s in d.sentences]
        corpus = build_pseudo_dataset(all_sents, teacher, data.tokenizer, cfg)
        registry, pos = {}, 0
        for name, d in data.ner_sentences.items():
            n = len(d.sentences)
            registry[name] = list(zip(corpus.sentences[pos:pos + n], corpus.word_labels[pos:pos + n]))
            pos += n
        return registry, cfg.k, None
    schemes = {d.scheme for d in data.ner_sentences.values()}
    if schemes == {"cluster"}:
        registry = {n: list(zip(d.sentences, d.cluster_ids())) for n, d in data.ner_sentences.items()}
        k = 1 + max(max(ids) for items in registry.values() for _, ids in items if ids)
        return registry, max(k, 2), None
    if len(schemes) > 1:
        raise ConfigurationError("NER datasets mix BIO and cluster tags")
    tags = ["O"] + sorted({t for d in data.ner_sentences.values() for seq in d.tags for t in seq} - {"O"})
    index = {t: i for i, t in enumerate(tags)}
    registry = {n: [(s, [index[t] for t in ts]) for s, ts in zip(d.sentences, d.tags)]
                for n, d in data.ner_sentences.items()}
    return registry, max(len(tags), 2), tags


def snapshot_diagnostics(encoder: Encoder, tokenizer: WordTokenizer, analysis: NerDataset,
                         n_variants: int = 4, n_sentences: int = 2000, seed: int = 0) -> dict:
    """Perturbation similarity and token homogeneity of the bare backbone."""
    embedder = SentenceEncoder(encoder, tokenizer)
    out = {"homogeneity": token_homogeneity(embedder, analysis.sentences, n_samples=n_sentences, seed=seed).mean}
    if analysis.scheme == "bio" and analysis.entity_types():
        bank = EntityBank.from_corpus(analysis.sentences, analysis.tags)
        keep = [i for i, t in enumerate(analysis.tags) if any(x != "O" for x in t)][:n_sentences]
        perturbed = build_perturbed_set([analysis.sentences[i] for i in keep], [analysis.tags[i] for i in keep],
                                        bank, n_variants=n_variants, seed=seed)
        out["perturbation_similarity"] = perturbation_similarity(embedder, perturbed).mean
    return out


def downstream_scores(model: PrefinetuneModel, data: PreparedData, plan: Mapping) -> dict:
    """Downstream NER (LoRA adaptation, span F1) and TC (linear probe accuracy)."""
    adapt = plan.get("downstream", {}).get("adapt", {})
    seed = int(plan["seed"]) % 2**63
    scores: dict[str, float] = {}
    adapters = model.adapters
    if data.ner_train is not None:
        cfg = NerAdaptConfig(**adapt, seed=seed)
        tpl = adapters.group("NER") if adapters is not None and "NER" in adapters.tasks else None
        res = adapt_ner(model.encoder, data.tokenizer, data.ner_train.sentences, data.ner_train.tags, cfg, tpl=tpl,
                        eval_data=(data.ner_test.sentences, data.ner_test.tags))
        scores["ner_f1"] = res.stage2_f1
        scores["ner_f1_stage1"] = res.stage1_f1
    if data.tc_train is not None:
        tc = adapters.subset(["TC"]) if adapters is not None and "TC" in adapters.tasks else None
        scores["tc_accuracy"] = adapt_tc(model.encoder, data.tokenizer, data.tc_train, data.tc_test, tpl=tc).test_accuracy
    if "ner_f1" in scores and "tc_accuracy" in scores:
        scores["combined"] = 0.5 * (scores["ner_f1"] + scores["tc_accuracy"])
    return scores


@dataclass
class ExperimentResult:
    out_dir: Path
    plan: dict
    runs: list[dict]

    @property
    def metrics_paths(self) -> list[Path]:
        return [Path(r["metrics"]) for r in self.runs]


RESULT_FIELDS = ["mode", "tpl_layers", "steps", "stopped_early", "ner_f1", "ner_f1_stage1", "tc_accuracy",
                 "combined", "metrics", "checkpoint"]


def _run_one(plan: Mapping, data: PreparedData, out: Path, mode: str, tpl_layers=None,
             should_stop=None) -> dict:
    seed = int(plan["seed"]) % 2**63
    torch.manual_seed(seed)
    dtype = torch.float64 if plan["precision"] == "f64-test" else torch.float32
    serialize = dtype == torch.float32
    encoder = Encoder(encoder_config(plan, data.tokenizer.vocab_size), dtype=dtype)
    registry, k, _ = ner_registry(plan, data, encoder) if mode != "PF-TC" else ({}, 2, None)
    tplan = train_plan(plan, mode, k, tpl_layers)
    model = PrefinetuneModel.for_plan(encoder, tplan)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"mode": mode, "seed": seed, "datasets": data.hashes, "train": tplan.to_dict()}
    summary: dict[str, Any] = {"mode": mode, "metrics": str(out / "metrics.jsonl")}
    if tpl_layers is not None:
        summary["tpl_layers"] = tpl_layers
    with MetricsWriter(out / "metrics.jsonl", deterministic=True, provenance=provenance) as writer:
        def on_metrics(step, record):
            writer.write(step, "train", {k: v for k, v in record.items()})

        def on_snapshot(step, m):
            if serialize and plan["train"]["save_snapshots"]:
                save_checkpoint(out / "snapshots" / f"step_{step:08d}.tplf", encoder_arrays(m.encoder),
                                {"kind": "backbone", "encoder": m.encoder.config.to_dict(),
                                 "tokenizer": data.tokenizer.to_dict(), "step": step})
            if data.analysis is not None:
                an = {**ANALYSIS_DEFAULTS, **plan.get("analysis", {})}
                diag = snapshot_diagnostics(m.encoder, data.tokenizer, data.analysis,
                                            an["n_variants"], an["n_sentences"], seed)
                writer.write(step, "analysis", diag)
                curve_rows.append({"step": step, **diag})

        curve_rows: list[dict] = []
        rng = np.random.default_rng(seed)
        result = pretrain(model, tplan, data.tokenizer, registry or None, data.pairs if tplan.uses_tc else None,
                          on_metrics=on_metrics, on_snapshot=on_snapshot, should_stop=should_stop, rng=rng)
        summary["steps"] = result.steps_done
        if curve_rows:
            write_csv(out / "curves.csv", curve_rows)
        summary["stopped_early"] = result.stopped_early
        if data.has_downstream and not result.stopped_early:
            scores = downstream_scores(model, data, plan)
            writer.write(result.steps_done, "downstream", scores)
            summary.update(scores)
    if serialize:
        save_training_state(out / "final.tplf", model, data.tokenizer, tplan, result.optimizer, result.steps_done, rng)
        summary["checkpoint"] = str(out / "final.tplf")
    else:
        log.info("f64-test precision: checkpoints are not written")
    return summary


def run_experiment(plan_or_path, out_dir, overrides: Mapping | None = None, stop_file=None) -> ExperimentResult:
    """Validate a plan, load its data, then run it (or every setting of a sweep).

    Each run writes ``metrics.jsonl``, snapshots and ``final.tplf`` into its
    own directory; ``results.json`` in ``out_dir`` summarises all runs.
    """
    plan_dir = None
    if isinstance(plan_or_path, (str, Path)):
        plan_dir = Path(plan_or_path).resolve().parent
        raw = load_plan(plan_or_path)
    else:
        raw = dict(plan_or_path)
    plan = resolve_plan(raw, overrides)
    data = prepare_data(plan, plan_dir)
    torch.set_num_threads(plan["threads"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stop = StopRequested(Path(stop_file) if stop_file else out / "STOP")
    previous = stop.install()
    try:
        runs = []
        if plan["mode"] == "sweep":
            for layers in plan["sweep"]["tpl_layers"]:
                runs.append(_run_one(plan, data, out / f"tpl_layers_{layers}", "MTPF-TPL", layers, stop))
        else:
            runs.append(_run_one(plan, data, out, plan["mode"], should_stop=stop))
    finally:
        if previous is not None:
            signal.signal(signal.SIGINT, previous)
    (out / "results.json").write_text(json.dumps({"plan": plan, "runs": runs}, indent=2, sort_keys=True),
                                      encoding="utf-8")
    write_csv(out / "results.csv", runs, RESULT_FIELDS)
    return ExperimentResult(out, plan, runs)
