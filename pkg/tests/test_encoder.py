import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tplf.encoder import (
    Encoder,
    EncoderConfig,
    SentenceEncoder,
    cosine_similarity,
    encode_tokens,
    gradient_check,
    l2_normalize,
    pool_mean,
)
from tplf.errors import ConfigurationError, DegenerateEmbeddingError, EmptySequenceError, NumericInstabilityError
from tplf.tokenizer import CLS_ID, PAD_ID, SEP_ID, TokenBatch, WordTokenizer

from .oracles import central_difference

finite = st.floats(-10, 10, allow_nan=False, width=64)


def random_batch(bsz, seq_len, vocab, seed=0, lengths=None):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(4, vocab, (bsz, seq_len), generator=g)
    lengths = lengths or [seq_len] * bsz
    mask = (torch.arange(seq_len)[None] < torch.tensor(lengths)[:, None]).long()
    return TokenBatch(ids * mask, mask)


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(hidden_dim=10, num_heads=3)

    def test_reserved_vocab(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(vocab_size=3)

    def test_round_trip(self):
        cfg = EncoderConfig(num_layers=3, seed=2**40)
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg

    def test_presets(self):
        assert EncoderConfig.minilm_like(1000).hidden_dim == 384
        assert EncoderConfig.distilbert_like(1000).num_layers == 6


class TestEncodeTokens:
    def test_output_shape(self):
        enc = Encoder(EncoderConfig(hidden_dim=16, num_heads=4, vocab_size=50))
        out = encode_tokens(random_batch(3, 7, 50), enc)
        assert out.shape == (3, 7, 16)

    def test_zero_layers_is_embedding_sum(self):
        enc = Encoder(EncoderConfig(num_layers=0, hidden_dim=8, num_heads=2, vocab_size=30))
        batch = random_batch(2, 5, 30)
        out = encode_tokens(batch, enc)
        expected = enc.token_embeddings[batch.token_ids] + enc.position_embeddings[:5][None]
        assert torch.equal(out, expected)

    def test_eval_mode_bitwise_deterministic(self, tiny_config):
        cfg = EncoderConfig(**{**tiny_config.to_dict(), "dropout_rate": 0.3})
        batch = random_batch(3, 7, cfg.vocab_size)
        a = encode_tokens(batch, Encoder(cfg), mode="eval")
        b = encode_tokens(batch, Encoder(cfg), mode="eval")
        assert torch.equal(a, b)

    def test_dropout_active_in_train_mode(self, tiny_config):
        cfg = EncoderConfig(**{**tiny_config.to_dict(), "dropout_rate": 0.5})
        enc = Encoder(cfg)
        batch = random_batch(2, 6, cfg.vocab_size)
        assert not torch.equal(encode_tokens(batch, enc, mode="train"), encode_tokens(batch, enc, mode="train"))

    def test_mode_restored(self, tiny_encoder):
        tiny_encoder.train()
        encode_tokens(random_batch(1, 4, tiny_encoder.config.vocab_size), tiny_encoder, mode="eval")
        assert tiny_encoder.training

    def test_token_id_out_of_range(self, tiny_encoder):
        batch = TokenBatch(torch.tensor([[2, 999, 3]]), torch.ones(1, 3))
        with pytest.raises(ConfigurationError):
            encode_tokens(batch, tiny_encoder)

    def test_sequence_too_long(self, tiny_encoder):
        with pytest.raises(ConfigurationError):
            encode_tokens(random_batch(1, 50, tiny_encoder.config.vocab_size), tiny_encoder)

    def test_nan_reports_layer(self, tiny_encoder):
        with torch.no_grad():
            tiny_encoder.layers[1].ffn_out.weight.fill_(float("nan"))
        with pytest.raises(NumericInstabilityError) as err:
            encode_tokens(random_batch(1, 4, tiny_encoder.config.vocab_size), tiny_encoder)
        assert err.value.layer == 1

    def test_padding_does_not_affect_real_tokens(self, tiny_encoder):
        v = tiny_encoder.config.vocab_size
        short = random_batch(1, 4, v)
        padded = TokenBatch(torch.cat([short.token_ids, torch.tensor([[7, 8, 9]])], 1),
                            torch.cat([short.attention_mask, torch.zeros(1, 3, dtype=torch.long)], 1))
        a = encode_tokens(short, tiny_encoder)
        b = encode_tokens(padded, tiny_encoder)[:, :4]
        assert torch.allclose(a, b, atol=1e-6)

    def test_pure_function_without_dropout(self, tiny_encoder):
        batch = random_batch(2, 5, tiny_encoder.config.vocab_size, seed=3)
        assert torch.equal(encode_tokens(batch, tiny_encoder, mode="train"), encode_tokens(batch, tiny_encoder))


class TestPooling:
    def test_arithmetic_mean(self):
        x = torch.tensor([[[2.0, 0.0], [0.0, 2.0]]])
        assert pool_mean(x, torch.ones(1, 2)).tolist() == [[1.0, 1.0]]

    def test_padding_excluded(self):
        x = torch.tensor([[[1.0, 0.0], [9.0, 9.0]]])
        assert pool_mean(x, torch.tensor([[1, 0]])).tolist() == [[1.0, 0.0]]

    def test_identical_tokens(self):
        v = torch.tensor([0.3, -1.2, 4.0])
        x = v.expand(1, 5, 3)
        assert torch.allclose(pool_mean(x, torch.ones(1, 5)), v[None])

    def test_empty_sequence(self):
        with pytest.raises(EmptySequenceError, match="empty sequence"):
            pool_mean(torch.ones(2, 3, 4), torch.tensor([[1, 1, 0], [0, 0, 0]]))

    @given(arrays(np.float64, (2, 5, 3), elements=finite), arrays(np.float64, (2, 5, 3), elements=finite),
           st.integers(1, 5), st.integers(1, 5))
    def test_invariant_to_masked_values(self, x, noise, n1, n2):
        mask = torch.tensor([[1] * n1 + [0] * (5 - n1), [1] * n2 + [0] * (5 - n2)])
        a = torch.from_numpy(x)
        b = torch.where(mask.bool()[..., None], a, torch.from_numpy(noise))
        assert torch.equal(pool_mean(a, mask), pool_mean(b, mask))


class TestNormalizeAndCosine:
    def test_three_four_five(self):
        assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        u = np.array([0.0, 1.0, 0.0])
        assert np.abs(l2_normalize(u) - u).max() < 1e-7

    def test_degenerate(self):
        with pytest.raises(DegenerateEmbeddingError, match="degenerate embedding"):
            l2_normalize(np.zeros(2))
        with pytest.raises(DegenerateEmbeddingError):
            l2_normalize(torch.zeros(1, 3))

    @given(arrays(np.float64, 4, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3))
    def test_idempotent_and_unit(self, v):
        once = l2_normalize(v)
        assert abs(np.linalg.norm(once) - 1) < 1e-6
        assert np.abs(l2_normalize(once) - once).max() < 1e-6
        assert np.dot(once, v) > 0  # direction preserved

    def test_cosine_examples(self):
        u = np.array([1.0, 2.0])
        assert cosine_similarity(u, u) == pytest.approx(1.0)
        assert cosine_similarity([1, 0], [0, 1]) == 0.0
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-5)

    def test_cosine_degenerate(self):
        with pytest.raises(DegenerateEmbeddingError):
            cosine_similarity([0, 0], [1, 0])

    @given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite))
    def test_cosine_bounded(self, u, v):
        if np.linalg.norm(u) > 1e-6 and np.linalg.norm(v) > 1e-6:
            assert -1.0 <= cosine_similarity(u, v) <= 1.0


class TestGradientCheck:
    def test_quadratic(self):
        x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
        report = gradient_check(lambda: (x ** 2).sum(), x)
        assert report.passed and report.max_rel_error < 1e-6
        assert central_difference(lambda t: t * t, 3.0) == pytest.approx(6.0, abs=1e-6)
        assert torch.autograd.grad((x ** 2).sum(), x)[0].item() == 6.0

    def test_constant_loss(self):
        x = torch.randn(5, dtype=torch.float64, requires_grad=True)
        report = gradient_check(lambda: torch.tensor(2.5, dtype=torch.float64) + 0 * x.sum(), x, max_coords=None)
        assert report.passed and report.max_rel_error == 0.0

    def test_detects_wrong_gradient(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)

        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, t):
                ctx.save_for_backward(t)
                return (t ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                (t,) = ctx.saved_tensors
                return g * 3 * t  # should be 2t

        report = gradient_check(lambda: Bad.apply(x), {"x": x})
        assert not report.passed and report.worst_param == "x"

    def test_encoder_parameters(self, tiny_encoder64):
        batch = random_batch(2, 5, tiny_encoder64.config.vocab_size, lengths=[5, 3])
        params = dict(tiny_encoder64.named_parameters())

        def loss():
            return pool_mean(encode_tokens(batch, tiny_encoder64), batch.attention_mask).pow(2).mean()

        report = gradient_check(loss, params, max_coords=3)
        assert report.passed, report


class TestTokenizer:
    def test_reserved_ids(self, tokenizer):
        assert tokenizer.vocab[:4] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]

    def test_encode_layout(self, tokenizer):
        b = tokenizer.encode([["the", "cat"], ["a"]])
        assert b.token_ids[0, 0] == CLS_ID and b.token_ids[0, 3] == SEP_ID
        assert b.token_ids[1, 3] == PAD_ID
        assert b.attention_mask.tolist() == [[1, 1, 1, 1], [1, 1, 1, 0]]
        assert b.word_alignment == [[(1, 2), (2, 3)], [(1, 2)]]

    def test_oov_character_fallback(self, tokenizer):
        b = tokenizer.encode([["cat", "tac"]])
        assert b.word_alignment[0] == [(1, 2), (2, 5)]

    def test_unknown_characters_map_to_unk(self, tokenizer):
        assert tokenizer.word_pieces("Ωx") == [1, 1]

    def test_truncation_drops_whole_words(self, tokenizer):
        b = tokenizer.encode([["the", "Zzzzz", "cat"]], max_len=5)
        assert b.word_alignment[0] == [(1, 2)]
        assert int(b.lengths[0]) == 3

    def test_round_trip(self, tokenizer):
        again = WordTokenizer.from_dict(tokenizer.to_dict())
        assert again.vocab == tokenizer.vocab

    def test_frequency_ordering(self):
        tok = WordTokenizer.build([["b", "a", "b"], ["c"]], min_freq=1)
        words = [w for w in tok.vocab[4:] if not w.startswith("##")]
        assert words == ["b", "a", "c"]

    def test_batch_validation(self):
        with pytest.raises(ConfigurationError):
            TokenBatch(torch.ones(1, 3), torch.tensor([[1, 0, 1]]))
        with pytest.raises(ConfigurationError):
            TokenBatch(torch.ones(1, 3), torch.tensor([[1, 1, 0]]), [[(1, 3)]])


class TestSentenceEncoder:
    def test_token_embeddings_exclude_special_positions(self, tiny_encoder, tokenizer):
        emb = SentenceEncoder(tiny_encoder, tokenizer)
        toks = emb.token_embeddings([["the", "cat"], ["a", "dog", "ran"]])
        assert [t.shape[0] for t in toks] == [2, 3]

    def test_embed_sentences_matches_pool(self, tiny_encoder, tokenizer):
        sents = [["the", "cat"], ["a", "dog", "ran"]]
        batch = tokenizer.encode(sents)
        expected = pool_mean(encode_tokens(batch, tiny_encoder), batch.attention_mask).double().detach().numpy()
        got = SentenceEncoder(tiny_encoder, tokenizer, batch_size=1).embed_sentences(sents)
        assert np.allclose(got, expected, atol=1e-6)
