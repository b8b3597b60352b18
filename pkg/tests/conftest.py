import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from tplf.encoder import Encoder, EncoderConfig
from tplf.tokenizer import WordTokenizer

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SENTENCES = [
    ["the", "cat", "sat", "on", "the", "mat"],
    ["a", "dog", "ran", "in", "Paris"],
    ["Alice", "met", "Bob", "in", "London", "today"],
    ["cats", "and", "dogs"],
]


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    torch.manual_seed(0)


@pytest.fixture
def tokenizer():
    return WordTokenizer.build(SENTENCES)


@pytest.fixture
def tiny_config(tokenizer):
    return EncoderConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32,
                         vocab_size=tokenizer.vocab_size, max_seq_len=24, dropout_rate=0.0, seed=0)


@pytest.fixture
def tiny_encoder(tiny_config):
    return Encoder(tiny_config).eval()


@pytest.fixture
def tiny_encoder64(tiny_config):
    return Encoder(tiny_config, dtype=torch.float64).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
