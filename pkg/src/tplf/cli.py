"""Command-line entry point: ``tplf <subcommand> [options]``.

Every subcommand validates its inputs (plan schema, files, checkpoint
headers) before any training or encoding starts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .errors import TplfError

log = logging.getLogger("tplf")

_MODE_OF = {"pretrain-ner": "PF-NER", "pretrain-tc": "PF-TC"}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="plan file (YAML or JSON)")
    p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--threads", type=int, help="torch intra-op threads (1 gives reproducible metrics)")
    p.add_argument("--precision", choices=("f32", "f64-test"), help="f64-test runs in double and writes no checkpoints")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tplf", description="Multi-task pre-finetuning workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("pretrain-ner", "token-classification pre-finetuning (PF-NER)"),
                        ("pretrain-tc", "contrastive pre-finetuning (PF-TC)")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--steps", type=int, help="override train.total_steps")

    p = sub.add_parser("mtpf", help="multi-task pre-finetuning")
    _common(p)
    p.add_argument("--mode", choices=("MTPF", "MTPF-TPL", "PF-L"), help="default: the plan's mode, else MTPF-TPL")
    p.add_argument("--tpl-layers", help="number of final layers with task-primary adapters, or 'all'")
    p.add_argument("--pcgrad", action="store_true", default=None)
    p.add_argument("--steps", type=int, help="override train.total_steps")

    p = sub.add_parser("sweep", help="MTPF-TPL over several tpl_layers values")
    _common(p)
    p.add_argument("--tpl-layers", help="comma-separated list, e.g. 1,2,4,all")

    p = sub.add_parser("adapt-ner", help="LoRA token-classification fine-tuning + span F1")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="training-state file or deployment bundle")
    p.add_argument("--train", type=Path, required=True, help="CoNLL training file")
    p.add_argument("--test", type=Path, required=True, help="CoNLL test file")
    p.add_argument("--fraction", type=float, help="limited-data fraction of the training set")
    p.add_argument("--head-epochs", type=int)
    p.add_argument("--joint-epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("adapt-tc", help="linear probe on frozen sentence embeddings")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="training-state file or deployment bundle")
    p.add_argument("--train", type=Path, required=True, help="labelled texts (JSONL text/label or TSV)")
    p.add_argument("--test", type=Path, required=True)

    p = sub.add_parser("analyze", help="perturbation similarity + token homogeneity over snapshots")
    _common(p)
    p.add_argument("--snapshots", type=Path, required=True, help="directory of snapshot checkpoints (or one file)")
    p.add_argument("--sentences", type=Path, required=True, help="CoNLL file with BIO tags")
    p.add_argument("--n-variants", type=int, default=4)
    p.add_argument("--n-sentences", type=int, default=2000)

    p = sub.add_parser("export", help="write a deployment bundle from a training-state checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def _parse_layers(text: str):
    return "all" if text == "all" else int(text)


def _overrides(args, mode: str | None = None) -> dict:
    ov: dict = {"seed": args.seed, "threads": args.threads, "precision": args.precision}
    if mode:
        ov["mode"] = mode
    train: dict = {}
    if getattr(args, "steps", None) is not None:
        train["total_steps"] = args.steps
    if getattr(args, "pcgrad", None):
        train["pcgrad"] = True
    if getattr(args, "tpl_layers", None) and args.command == "mtpf":
        train["tpl_layers"] = _parse_layers(args.tpl_layers)
    if getattr(args, "tpl_layers", None) and args.command == "sweep":
        ov["sweep"] = {"tpl_layers": [_parse_layers(x) for x in args.tpl_layers.split(",")]}
    if train:
        ov["train"] = train
    return ov


def _run_plan(args, mode: str | None) -> int:
    from .experiment import load_plan, run_experiment

    if args.config is None:
        raise TplfError(f"{args.command} needs --config <plan>")
    raw = load_plan(args.config)
    if mode is None:
        mode = raw.get("mode") if raw.get("mode") in ("MTPF", "MTPF-TPL", "PF-L") else "MTPF-TPL"
    if args.command == "sweep":
        mode = "sweep"
    result = run_experiment(args.config, args.out, overrides=_overrides(args, mode))
    print(json.dumps(result.runs, indent=2, sort_keys=True))
    return 0


def _load_model(path: Path):
    """(encoder, tokenizer, adapters or None) from a training state or a bundle directory."""
    from .io.bundle import load_backbone, load_task_adapter, open_bundle
    from .io.checkpoint import peek_checkpoint
    from .io.state import load_training_state
    from .lora import TaskPrimaryAdapterSet

    if path.is_dir():
        bundle = open_bundle(path)
        encoder, tokenizer = load_backbone(bundle)
        groups, spec = {}, None
        for task in bundle.tasks:
            adapters, _, _ = load_task_adapter(bundle, task, encoder)
            if adapters is not None:
                spec = adapters.spec
                groups.update({t: adapters.group(t) for t in adapters.tasks})
        return encoder, tokenizer, (TaskPrimaryAdapterSet(spec, groups) if groups else None)
    kind = peek_checkpoint(path).config.get("kind")
    if kind != "training_state":
        raise TplfError(f"{path}: expected a training_state checkpoint or a bundle directory, got {kind!r}")
    model, tokenizer, *_ = load_training_state(path)
    return model.encoder, tokenizer, model.adapters


def _set_threads(args) -> None:
    torch.set_num_threads(args.threads or 1)
    if args.seed is not None:
        torch.manual_seed(args.seed % 2**63)


def _adapt_ner(args) -> int:
    from .adaptation import NerAdaptConfig, adapt_ner
    from .evaluation import limited_data_split
    from .io.conll import load_conll

    train, test = load_conll(args.train), load_conll(args.test)
    if args.fraction is not None:
        idx = limited_data_split(list(range(len(train))), args.fraction, seed=args.seed or 0,
                                 types_of=lambda i: {t[2:] for t in train.tags[i] if t != "O"})
        train = train.subset(idx)
    encoder, tokenizer, adapters = _load_model(args.checkpoint)
    _set_threads(args)
    kw = {k: v for k, v in (("head_epochs", args.head_epochs), ("joint_epochs", args.joint_epochs), ("lr", args.lr))
          if v is not None}
    cfg = NerAdaptConfig(seed=args.seed or 0, **kw)
    tpl = adapters.group("NER") if adapters is not None and "NER" in adapters.tasks else None
    res = adapt_ner(encoder, tokenizer, train.sentences, train.tags, cfg, tpl=tpl,
                    eval_data=(test.sentences, test.tags))
    out = {"ner_f1": res.stage2_f1, "ner_f1_stage1": res.stage1_f1, "n_train": len(train)}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "adapt_ner.json").write_text(json.dumps(out, indent=2), encoding="utf-8")
    print(json.dumps(out))
    return 0


def _adapt_tc(args) -> int:
    from .adaptation import adapt_tc
    from .io.labeled import load_labeled_texts

    train, test = load_labeled_texts(args.train), load_labeled_texts(args.test)
    encoder, tokenizer, adapters = _load_model(args.checkpoint)
    _set_threads(args)
    tc = adapters.subset(["TC"]) if adapters is not None and "TC" in adapters.tasks else None
    res = adapt_tc(encoder, tokenizer, (train.tokenized(), train.labels), (test.tokenized(), test.labels), tpl=tc)
    out = {"tc_accuracy": res.test_accuracy, "train_accuracy": res.train_accuracy, "degenerate": res.degenerate}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "adapt_tc.json").write_text(json.dumps(out, indent=2), encoding="utf-8")
    print(json.dumps(out))
    return 0


def _analyze(args) -> int:
    from .experiment import snapshot_diagnostics
    from .io.checkpoint import load_checkpoint, peek_checkpoint
    from .io.conll import load_conll
    from .io.metrics import MetricsWriter, write_csv
    from .io.state import encoder_from_checkpoint
    from .tokenizer import WordTokenizer

    sentences = load_conll(args.sentences)
    files = sorted(args.snapshots.glob("*.tplf")) if args.snapshots.is_dir() else [args.snapshots]
    if not files:
        raise TplfError(f"no snapshot checkpoints under {args.snapshots}")
    headers = [peek_checkpoint(f).config for f in files]
    for f, cfg in zip(files, headers):
        if "tokenizer" not in cfg or "encoder" not in cfg:
            raise TplfError(f"{f}: not a backbone snapshot")
    _set_threads(args)
    order = sorted(range(len(files)), key=lambda i: (headers[i].get("step", i), files[i].name))
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    with MetricsWriter(args.out / "analysis.jsonl", deterministic=True) as writer:
        for i in order:
            ckpt = load_checkpoint(files[i])
            enc = encoder_from_checkpoint(ckpt.config, ckpt.arrays)
            tok = WordTokenizer.from_dict(ckpt.config["tokenizer"])
            step = int(ckpt.config.get("step", i))
            diag = snapshot_diagnostics(enc, tok, sentences, args.n_variants, args.n_sentences, seed=args.seed or 0)
            writer.write(step, "analysis", diag)
            rows.append({"step": step, "file": files[i].name, **diag})
    write_csv(args.out / "analysis.csv", rows)
    print(json.dumps(rows, indent=2))
    return 0


def _export(args) -> int:
    from .io.bundle import export_deployment, head_arrays
    from .io.checkpoint import peek_checkpoint
    from .io.state import load_training_state

    kind = peek_checkpoint(args.checkpoint).config.get("kind")
    if kind != "training_state":
        raise TplfError(f"{args.checkpoint}: expected a training_state checkpoint, got {kind!r}")
    model, tokenizer, *_ = load_training_state(args.checkpoint)
    heads = {}
    if model.head is not None:
        heads["NER"] = head_arrays(model.head)
    bundle = export_deployment(args.out, model.encoder, tokenizer, model.adapters, heads)
    print(json.dumps({"bundle": str(bundle.root), "tasks": bundle.tasks}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("tplf: error: --threads must be >= 1", file=sys.stderr)
        return 2
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("tplf: error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        if args.command in _MODE_OF:
            return _run_plan(args, _MODE_OF[args.command])
        if args.command in ("mtpf", "sweep"):
            return _run_plan(args, getattr(args, "mode", None))
        return {"adapt-ner": _adapt_ner, "adapt-tc": _adapt_tc, "analyze": _analyze, "export": _export}[args.command](args)
    except (TplfError, ValueError, OSError) as e:
        print(f"tplf: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
