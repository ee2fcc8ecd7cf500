from __future__ import annotations

import numpy as np
import pytest
import torch


@pytest.fixture(scope="session")
def tiny_mixtral_dir(tmp_path_factory):
    """A small random-weight Mixtral-style checkpoint saved to disk."""
    from transformers import MixtralConfig, MixtralForCausalLM

    cfg = MixtralConfig(
        hidden_size=32, intermediate_size=48, num_hidden_layers=2,
        num_attention_heads=4, num_key_value_heads=2, num_local_experts=4,
        num_experts_per_tok=2, vocab_size=256, max_position_embeddings=256,
    )
    torch.manual_seed(0)
    model = MixtralForCausalLM(cfg)
    model.eval()
    path = tmp_path_factory.mktemp("models") / "tiny-mixtral"
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory):
    rng = np.random.default_rng(7)
    words = ["the", "expert", "router", "mixes", "tokens", "sparse", "layers",
             "hidden", "states", "flow"]
    text = " ".join(words[i] for i in rng.integers(0, len(words), 4000))
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    path.write_text(text)
    return str(path)
