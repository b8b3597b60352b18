"""Compare pre-finetuning modes on a synthetic world.

Trains the same small encoder under each mode and reports how the token
geometry moved: homogeneity (mean pairwise cosine of tokens in a sentence)
and the similarity between a sentence and its entity-swapped variants.
Takes a couple of minutes on one CPU core.

    python demos/prefinetune_geometry.py
"""

import copy

import torch

from tplf.encoder import Encoder, EncoderConfig, SentenceEncoder
from tplf.evaluation import EntityBank, build_perturbed_set, perturbation_similarity, token_homogeneity
from tplf.synthetic import SyntheticWorld
from tplf.tokenizer import WordTokenizer
from tplf.trainer import PrefinetuneModel, TrainPlan, pretrain

torch.set_num_threads(1)
world = SyntheticWorld.create(seed=0)
tok = WordTokenizer.build(world.all_words(), lowercase=False)
sents, tags = world.ner_corpus(400, seed=1)
tag_ids = {t: i for i, t in enumerate(sorted({t for s in tags for t in s}))}
ner = {"bio": [(s, [tag_ids[t] for t in ts]) for s, ts in zip(sents, tags)]}
pairs = world.entity_pair_corpus(3000, seed=2)
probe_sents = sents[:150]
perturbed = build_perturbed_set(probe_sents, tags[:150], EntityBank.from_corpus(sents, tags), n_variants=3)

base = Encoder(EncoderConfig(num_layers=4, hidden_dim=64, num_heads=4, ffn_dim=128, vocab_size=tok.vocab_size,
                             max_seq_len=48, seed=0))


def geometry(encoder):
    emb = SentenceEncoder(encoder, tok)
    return token_homogeneity(emb, probe_sents).mean, perturbation_similarity(emb, perturbed).mean


h0, p0 = geometry(base)
print(f"{'initial':>9}  homogeneity {h0:.3f}  perturbation similarity {p0:.3f}")
for mode in ("PF-NER", "PF-TC", "MTPF", "MTPF-TPL"):
    plan = TrainPlan(mode=mode, ner_batch_size=32, tc_batch_size=64, total_steps=150, lr=1e-3,
                     num_pseudo_classes=len(tag_ids), tpl_layers="all" if mode == "MTPF-TPL" else None)
    model = PrefinetuneModel.for_plan(copy.deepcopy(base), plan)
    pretrain(model, plan, tok, ner if plan.uses_ner else None, pairs if plan.uses_tc else None)
    h, p = geometry(model.encoder)
    print(f"{mode:>9}  homogeneity {h:.3f} ({h - h0:+.3f})  perturbation similarity {p:.3f} ({p - p0:+.3f})")
