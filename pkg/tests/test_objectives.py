import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tplf.encoder import Encoder, gradient_check
from tplf.errors import ConfigurationError, EmptySupervisionError
from tplf.objectives import (
    IGNORE_INDEX,
    ContrastiveBatch,
    TokenHead,
    TokenLabeledBatch,
    contrastive_loss,
    info_nce,
    ner_linear_head,
    token_cross_entropy,
    token_loss,
)

from .conftest import SENTENCES
from .oracles import naive_info_nce, naive_token_ce

E = torch.eye(2, dtype=torch.float64)


class TestInfoNCE:
    def test_single_pair_is_zero(self):
        z = torch.tensor([[0.6, 0.8]])
        assert info_nce(z, torch.tensor([[0.0, 1.0]])).item() == 0.0

    def test_orthonormal_tau_one(self):
        assert info_nce(E, E, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-5)
        assert info_nce(E, E, 1.0).item() == pytest.approx(0.31326, abs=1e-5)

    def test_orthonormal_small_tau_is_stable(self):
        val = info_nce(E, E, 0.05).item()
        assert val == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert 2.0e-9 < val < 2.1e-9

    def test_denominator_uses_positives_only(self):
        # anchors identical: if anchors were negatives the loss would change
        z = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        zp = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        expect = (math.log(math.e + 1) - 1 + math.log(math.e + 1) - 0) / 2
        assert info_nce(z, zp, 1.0).item() == pytest.approx(expect, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            info_nce(torch.zeros(0, 3), torch.zeros(0, 3))
        with pytest.raises(ConfigurationError):
            info_nce(E, E, 0.0)
        with pytest.raises(ConfigurationError):
            info_nce(E, torch.eye(3))

    def test_renormalizes_with_warning(self):
        with pytest.warns(UserWarning, match="normalized"):
            val = info_nce(3 * E, E, 1.0)
        assert val.item() == pytest.approx(info_nce(E, E, 1.0).item(), abs=1e-12)

    @given(st.integers(1, 6), st.integers(2, 5), st.sampled_from([0.05, 0.3, 1.0]), st.integers(0, 10**6))
    def test_matches_naive_oracle(self, n, d, tau, seed):
        g = np.random.default_rng(seed)
        z, zp = g.normal(size=(n, d)), g.normal(size=(n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        zp /= np.linalg.norm(zp, axis=1, keepdims=True)
        got = info_nce(torch.from_numpy(z), torch.from_numpy(zp), tau).item()
        assert got == pytest.approx(naive_info_nce(z, zp, tau), rel=1e-9, abs=1e-9)

    @given(st.integers(2, 8), st.integers(0, 10**6))
    def test_permutation_invariant_and_nonnegative(self, n, seed):
        g = torch.Generator().manual_seed(seed)
        z = torch.nn.functional.normalize(torch.randn(n, 4, generator=g, dtype=torch.float64), dim=1)
        zp = torch.nn.functional.normalize(torch.randn(n, 4, generator=g, dtype=torch.float64), dim=1)
        perm = torch.randperm(n, generator=g)
        a, b = info_nce(z, zp), info_nce(z[perm], zp[perm])
        assert abs(a.item() - b.item()) < 1e-6
        assert a.item() >= 0

    def test_decreases_as_negatives_separate(self):
        vals = []
        for angle in np.linspace(0.2, math.pi, 6):
            zp = torch.tensor([[1.0, 0.0], [math.cos(angle), math.sin(angle)]], dtype=torch.float64)
            vals.append(info_nce(zp, zp, 0.5).item())
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_gradient_check(self):
        z = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        zp = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        fn = lambda: info_nce(torch.nn.functional.normalize(z, dim=1), torch.nn.functional.normalize(zp, dim=1), 0.1)
        assert gradient_check(fn, {"z": z, "zp": zp}, max_coords=None).passed


class TestTokenCE:
    def test_uniform(self):
        logits = torch.zeros(2, 3, 4)
        labels = torch.tensor([[0, 1, 2], [3, IGNORE_INDEX, 0]])
        assert token_cross_entropy(logits, labels).item() == pytest.approx(math.log(4), abs=1e-5)

    def test_saturated(self):
        logits = torch.zeros(1, 2, 5, dtype=torch.float64)
        logits[0, :, 2] = 30.0
        assert token_cross_entropy(logits, torch.tensor([[2, 2]])).item() < 1e-12

    def test_all_ignored(self):
        with pytest.raises(EmptySupervisionError, match="empty supervision"):
            token_cross_entropy(torch.zeros(1, 3, 4), torch.full((1, 3), IGNORE_INDEX))

    def test_label_range_and_k(self):
        with pytest.raises(ConfigurationError):
            token_cross_entropy(torch.zeros(1, 2, 3), torch.tensor([[0, 3]]))
        with pytest.raises(ConfigurationError):
            token_cross_entropy(torch.zeros(1, 2, 1), torch.tensor([[0, 0]]))

    @given(arrays(np.float64, (2, 3, 4), elements=st.floats(-20, 20)), st.floats(-50, 50), st.integers(0, 10**6))
    def test_shift_invariance_and_oracle(self, logits, c, seed):
        g = np.random.default_rng(seed)
        labels = g.integers(0, 4, size=(2, 3))
        labels[0, 0] = IGNORE_INDEX
        t = torch.from_numpy(logits)
        lab = torch.from_numpy(labels)
        base = token_cross_entropy(t, lab).item()
        shift = torch.zeros_like(t)
        shift[1, 2] = c
        assert abs(token_cross_entropy(t + shift, lab).item() - base) < 1e-6
        assert base == pytest.approx(naive_token_ce(logits, labels, IGNORE_INDEX), rel=1e-9, abs=1e-9)


class TestHead:
    def test_zero_head(self):
        out = ner_linear_head(torch.randn(2, 5, 3), torch.zeros(4, 3), torch.zeros(4))
        assert not out.any()

    def test_identity_head(self):
        x = torch.randn(1, 3, 2)
        assert torch.equal(ner_linear_head(x, torch.eye(2)), x)

    def test_shape(self):
        assert TokenHead(8, 9)(torch.randn(2, 5, 8)).shape == (2, 5, 9)

    def test_seeded(self):
        assert torch.equal(TokenHead(8, 3, seed=4).weight, TokenHead(8, 3, seed=4).weight)


class TestBatches:
    def test_contrastive_alignment(self, tokenizer):
        with pytest.raises(ConfigurationError):
            ContrastiveBatch(tokenizer.encode(SENTENCES[:2]), tokenizer.encode(SENTENCES[:3]))

    def test_padding_must_be_ignored(self, tokenizer):
        tokens = tokenizer.encode(SENTENCES)
        with pytest.raises(ConfigurationError, match="padding"):
            TokenLabeledBatch(tokens, torch.zeros_like(tokens.token_ids))
        with pytest.raises(ConfigurationError):
            TokenLabeledBatch(tokens, torch.zeros(1, 1))


class TestEncoderGradients:
    def test_contrastive_loss(self, tokenizer, tiny_encoder64):
        batch = ContrastiveBatch(tokenizer.encode(SENTENCES[:2]), tokenizer.encode(SENTENCES[2:]))
        params = dict(tiny_encoder64.named_parameters())
        report = gradient_check(lambda: contrastive_loss(tiny_encoder64, batch, task=None, temperature=0.05), params,
                                max_coords=4)
        assert report.passed, report

    def test_token_loss(self, tokenizer, tiny_encoder64):
        tokens = tokenizer.encode(SENTENCES)
        labels = torch.where(tokens.attention_mask.bool(), tokens.token_ids % 3, IGNORE_INDEX)
        head = TokenHead(16, 3, dtype=torch.float64)
        params = dict(tiny_encoder64.named_parameters()) | {f"head.{k}": v for k, v in head.named_parameters()}
        report = gradient_check(lambda: token_loss(tiny_encoder64, head, TokenLabeledBatch(tokens, labels), task=None),
                                params, max_coords=4)
        assert report.passed, report

    def test_dropout_makes_train_mode_stochastic(self, tokenizer, tiny_config):
        from dataclasses import replace
        enc = Encoder(replace(tiny_config, dropout_rate=0.3))
        batch = ContrastiveBatch(tokenizer.encode(SENTENCES[:2]), tokenizer.encode(SENTENCES[2:]))
        a = contrastive_loss(enc, batch, task=None, mode="train")
        b = contrastive_loss(enc, batch, task=None, mode="train")
        c = contrastive_loss(enc, batch, task=None, mode="eval")
        assert a.item() != b.item()
        assert c.item() == contrastive_loss(enc, batch, task=None, mode="eval").item()
