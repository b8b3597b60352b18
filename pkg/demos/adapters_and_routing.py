"""Attach task-primary adapters to a small encoder and watch where gradients go.

    python demos/adapters_and_routing.py
"""

import torch

from tplf.encoder import Encoder, EncoderConfig, encode_tokens
from tplf.synthetic import SyntheticWorld
from tplf.tokenizer import WordTokenizer
from tplf.trainer import (
    PrefinetuneModel,
    TrainPlan,
    compute_task_gradients,
    make_ner_batch,
    make_optimizer,
    make_pair_batch,
    mtpf_step,
    partition_of,
)

torch.set_num_threads(1)
world = SyntheticWorld.create(seed=0, n_entities=12)
tok = WordTokenizer.build(world.all_words(), lowercase=False)
sents, tags = world.ner_corpus(16, seed=1)
tag_ids = {t: i for i, t in enumerate(sorted({t for s in tags for t in s}))}
ner = [(s, [tag_ids[t] for t in ts]) for s, ts in zip(sents, tags)]
pairs = world.entity_pair_corpus(24, seed=2)["synonym"]

cfg = EncoderConfig(num_layers=2, hidden_dim=32, num_heads=4, ffn_dim=64, vocab_size=tok.vocab_size,
                    max_seq_len=40, dropout_rate=0.0)
plan = TrainPlan(mode="MTPF-TPL", tpl_layers="all", ner_batch_size=8, tc_batch_size=8, lr=1e-3,
                 num_pseudo_classes=len(tag_ids))
model = PrefinetuneModel.for_plan(Encoder(cfg), plan)

# B starts at zero, so the adapted encoder is the backbone exactly
batch = tok.encode(sents[:4], max_len=40)
with torch.no_grad():
    gap = (encode_tokens(batch, model.encoder, model.adapters, "NER") - encode_tokens(batch, model.encoder)).abs()
print(f"max |adapted - backbone| at init: {gap.max().item():.1e}")

nb, tb = make_ner_batch(ner[:8], tok, 40), make_pair_batch(pairs[:8], tok, 40)
opt = make_optimizer(model, plan)
for step in range(3):
    res = mtpf_step(model, nb, tb, plan, opt, step=step)
    print(f"step {step}: " + ", ".join(f"{k} {v:.3f}" for k, v in res.losses.items()))

_, raw = compute_task_gradients(model, plan, nb, tb, step=3)
print("\ngradient norm per (loss, partition):")
for task, grads in raw.items():
    norms = {}
    for name, g in grads.items():
        part = partition_of(name)
        norms[part] = norms.get(part, 0.0) + (0.0 if g is None else float(g.pow(2).sum()))
    print(f"  {task:>3}: " + "  ".join(f"{p}={v ** 0.5:.2e}" for p, v in sorted(norms.items())))
