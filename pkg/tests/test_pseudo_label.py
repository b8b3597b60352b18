from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from tplf.encoder import Encoder, EncoderConfig
from tplf.errors import ConfigurationError
from tplf.objectives import IGNORE_INDEX
from tplf.pseudo_label import (
    ClusterModel,
    PseudoLabelConfig,
    assign_clusters,
    build_pseudo_dataset,
    iter_pseudo_batches,
    label_batch,
    minibatch_kmeans,
    word_embeddings_from_subtokens,
)
from tplf.synthetic import SyntheticWorld
from tplf.tokenizer import WordTokenizer

from .oracles import lloyd_kmeans, same_partition


def blobs(rng, n=200, sep=20.0, sigma=1.0, dim=3):
    centers = np.zeros((2, dim))
    centers[1, 0] = sep * sigma
    idx = rng.integers(0, 2, size=n)
    return centers[idx] + rng.normal(scale=sigma, size=(n, dim)), centers


class TestConfig:
    def test_defaults(self):
        c = PseudoLabelConfig()
        assert (c.k, c.kmeans_batch, c.kmeans_iters) == (200, 1024, 10)

    @pytest.mark.parametrize("kw", [{"k": 1}, {"k": 10, "kmeans_batch": 5}, {"kmeans_iters": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            PseudoLabelConfig(**kw)


class TestWordEmbeddings:
    def test_single_piece_unchanged(self):
        x = np.arange(6.0).reshape(3, 2)
        assert np.array_equal(word_embeddings_from_subtokens(x, [(1, 2)]), x[1:2])

    def test_average(self):
        x = np.array([[0.0, 2.0], [2.0, 0.0]])
        assert word_embeddings_from_subtokens(x, [(0, 2)]).tolist() == [[1.0, 1.0]]

    def test_row_count(self):
        assert word_embeddings_from_subtokens(torch.randn(5, 4), [(0, 1), (1, 3), (3, 5)]).shape == (3, 4)

    def test_bad_ranges(self):
        with pytest.raises(ConfigurationError):
            word_embeddings_from_subtokens(np.zeros((3, 2)), [(1, 1)])
        with pytest.raises(ConfigurationError):
            word_embeddings_from_subtokens(np.zeros((3, 2)), [(2, 4)])


class TestKMeans:
    def test_k1_is_mean(self, rng):
        # k=1 is outside PseudoLabelConfig's domain; the routine itself only reads the fields
        x = rng.normal(size=(300, 4))
        one = minibatch_kmeans(x, SimpleNamespace(k=1, kmeans_batch=64, kmeans_iters=1, seed=0))
        assert np.allclose(one.centroids[0], x.mean(axis=0), atol=1e-5)

    def test_k_equals_n(self, rng):
        x = rng.normal(size=(12, 3))
        m = minibatch_kmeans(x, PseudoLabelConfig(k=12, kmeans_batch=12, kmeans_iters=3))
        assert m.inertia < 1e-8

    def test_k_exceeds_points(self):
        with pytest.raises(ConfigurationError):
            minibatch_kmeans(np.zeros((3, 2)), PseudoLabelConfig(k=4, kmeans_batch=4))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_lloyd_on_blobs(self, seed):
        rng = np.random.default_rng(seed)
        x, centers = blobs(rng)
        m = minibatch_kmeans(x, PseudoLabelConfig(k=2, kmeans_batch=32, kmeans_iters=5, seed=seed))
        _, oracle, history = lloyd_kmeans(x, centers)
        assert same_partition(assign_clusters(m, x), oracle)
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_no_empty_clusters(self, rng):
        # duplicated points invite empty clusters; re-seeding must fill them
        x = np.concatenate([np.zeros((50, 2)), rng.normal(size=(50, 2)) + 10])
        m = minibatch_kmeans(x, PseudoLabelConfig(k=8, kmeans_batch=16, kmeans_iters=4))
        assert len(np.unique(assign_clusters(m, x))) == 8 or m.inertia == pytest.approx(0, abs=1e-9)

    @given(st.integers(0, 10**6), st.integers(2, 6))
    def test_inertia_trend(self, seed, k):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(120, 3)) + rng.integers(0, 3, size=(120, 1)) * 5
        m = minibatch_kmeans(x, PseudoLabelConfig(k=k, kmeans_batch=20, kmeans_iters=6, seed=seed))
        assert all(b <= a * 1.01 + 1e-9 for a, b in zip(m.history, m.history[1:]))

    def test_deterministic(self, rng):
        x = rng.normal(size=(100, 3))
        cfg = PseudoLabelConfig(k=4, kmeans_batch=16, kmeans_iters=2, seed=9)
        assert np.array_equal(minibatch_kmeans(x, cfg).centroids, minibatch_kmeans(x, cfg).centroids)


class TestAssign:
    model = ClusterModel(np.array([[0.0, 0], [1, 0], [2, 0], [3, 0], [1, 2]]), 0.0)

    def test_exact_centroid(self):
        assert assign_clusters(self.model, [[3.0, 0.0]]).tolist() == [3]

    def test_tie_lowest_index(self):
        assert assign_clusters(self.model, [[1.0, 1.0]]).tolist() == [1]

    def test_empty(self):
        assert assign_clusters(self.model, np.zeros((0, 2))).shape == (0,)

    def test_dim_mismatch(self):
        with pytest.raises(ConfigurationError):
            assign_clusters(self.model, [[1.0, 2.0, 3.0]])


@pytest.fixture
def corpus():
    world = SyntheticWorld.create(seed=0, n_entities=8)
    return world.ner_corpus(10, seed=1)[0]


@pytest.fixture
def teacher_and_tok(corpus):
    tok = WordTokenizer.build(corpus[:6])  # leaves OOV words for sub-token coverage
    cfg = EncoderConfig(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=tok.vocab_size,
                        max_seq_len=96, dropout_rate=0.0)
    return Encoder(cfg).eval(), tok


class TestPseudoDataset:
    def test_labels_in_range(self, corpus, teacher_and_tok):
        teacher, tok = teacher_and_tok
        ds = build_pseudo_dataset(corpus, teacher, tok, PseudoLabelConfig(k=5, kmeans_batch=16))
        assert [len(l) for l in ds.word_labels] == [len(s) for s in corpus]
        assert all(0 <= c < 5 for l in ds.word_labels for c in l)
        assert ds.tags()[0][0].startswith("C")

    def test_deterministic(self, corpus, teacher_and_tok):
        teacher, tok = teacher_and_tok
        cfg = PseudoLabelConfig(k=5, kmeans_batch=16, seed=3)
        assert build_pseudo_dataset(corpus, teacher, tok, cfg).word_labels == \
            build_pseudo_dataset(corpus, teacher, tok, cfg).word_labels

    def test_self_distillation(self, corpus, teacher_and_tok):
        import copy
        student, tok = teacher_and_tok
        teacher = copy.deepcopy(student).requires_grad_(False)
        ds = build_pseudo_dataset(corpus, teacher, tok, PseudoLabelConfig(k=5, kmeans_batch=16))
        for batch in iter_pseudo_batches(ds, tok, batch_size=4):
            assert batch.labels.shape == batch.tokens.token_ids.shape

    def test_dim_mismatch(self, corpus, teacher_and_tok):
        teacher, tok = teacher_and_tok
        bad = ClusterModel(np.zeros((5, 3)), 0.0)
        with pytest.raises(ConfigurationError, match="hidden_dim"):
            build_pseudo_dataset(corpus, teacher, tok, PseudoLabelConfig(k=5, kmeans_batch=16), cluster_model=bad)

    def test_label_inheritance(self, corpus, teacher_and_tok):
        _, tok = teacher_and_tok
        labels = [list(range(len(s))) for s in corpus]
        batch = label_batch(corpus, labels, tok)
        for i, spans in enumerate(batch.tokens.word_alignment):
            for w, (s, e) in enumerate(spans):
                assert batch.labels[i, s:e].tolist() == [w] * (e - s)
        assert (batch.labels[batch.tokens.attention_mask == 0] == IGNORE_INDEX).all()
        assert (batch.labels[:, 0] == IGNORE_INDEX).all()  # [CLS]
        assert any(e - s > 1 for spans in batch.tokens.word_alignment for s, e in spans)

    def test_first_subtoken_only(self, corpus, teacher_and_tok):
        _, tok = teacher_and_tok
        batch = label_batch(corpus, [[1] * len(s) for s in corpus], tok, first_subtoken_only=True)
        for i, spans in enumerate(batch.tokens.word_alignment):
            for s, e in spans:
                assert batch.labels[i, s] == 1 and (batch.labels[i, s + 1:e] == IGNORE_INDEX).all()
