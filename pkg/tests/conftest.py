from __future__ import annotations

import numpy as np
import pytest

from ctxembed.data import build_vocab, generate_synthetic_corpus
from ctxembed.surrogate import SurrogateConfig, embed_records


@pytest.fixture(scope="session")
def small_corpus():
    """4 domains x 32 pairs; enough structure for directional checks."""
    return generate_synthetic_corpus(seed=11, n_domains=4, pairs_per_domain=32,
                                     vocab_per_domain=48, noise=0.1)


@pytest.fixture(scope="session")
def small_embeddings(small_corpus):
    vocab = build_vocab([r.text for q, d in small_corpus.pairs for r in (q, d)])
    cfg = SurrogateConfig(hash_dim=64)
    phi = embed_records(small_corpus.documents(), vocab, cfg)
    psi = embed_records(small_corpus.queries(), vocab, cfg)
    return vocab, cfg, phi.rows, psi.rows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
