from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxembed.data import build_vocab
from ctxembed.surrogate import (SurrogateConfig, embed_text, fnv1a64, idf,
                                surrogate_score)


class TestIdf:
    def test_df_equals_n(self):
        v = build_vocab(["a b", "b a"])
        assert idf(v, "a") == pytest.approx(1.0)  # ln(3/3) + 1

    def test_df_one_of_two(self):
        v = build_vocab(["a b", "b c"])
        assert idf(v, "a") == pytest.approx(math.log(1.5) + 1.0)

    def test_unseen_term(self):
        v = build_vocab(["a b", "b c"])
        assert idf(v, "zzz") == pytest.approx(math.log(3.0) + 1.0)

    def test_positive_for_all_df(self):
        v = build_vocab(["a"] * 50)
        assert idf(v, "a") > 0.0


class TestEmbedText:
    def test_empty_text_zero_vector(self):
        v = build_vocab(["a b"])
        out = embed_text("", v, SurrogateConfig(hash_dim=16))
        assert not out.any()

    def test_deterministic(self):
        v = build_vocab(["a b c", "b d"])
        cfg = SurrogateConfig(hash_dim=64)
        a = embed_text("a c d", v, cfg)
        b = embed_text("a c d", v, cfg)
        assert np.array_equal(a, b)

    def test_distinct_buckets_give_cosine_below_one(self):
        cfg = SurrogateConfig(hash_dim=256)
        assert fnv1a64("a") % cfg.hash_dim != fnv1a64("b") % cfg.hash_dim
        v = build_vocab(["a a b", "a b"])
        x = embed_text("a a b", v, cfg)
        y = embed_text("a b", v, cfg)
        assert x.any() and y.any()
        cos = surrogate_score(x, y)  # both normalized
        assert cos < 1.0 - 1e-6

    def test_normalized_output_unit(self):
        v = build_vocab(["a b c d"])
        out = embed_text("a b c", v, SurrogateConfig(hash_dim=64))
        assert np.linalg.norm(out.astype(np.float64)) == pytest.approx(1.0, abs=1e-6)

    def test_unnormalized_tf_scaling(self):
        v = build_vocab(["a"])
        cfg = SurrogateConfig(hash_dim=64, normalize=False)
        one = embed_text("a", v, cfg)
        two = embed_text("a a", v, cfg)
        assert np.allclose(two, 2.0 * one)

    def test_hash_dim_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            SurrogateConfig(hash_dim=100)


class TestSurrogateScore:
    def test_identity(self):
        u = np.asarray([1.0, 0.0], dtype=np.float32)
        assert surrogate_score(u, u) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert surrogate_score(np.asarray([1.0, 0.0]), np.asarray([0.0, 1.0])) == 0.0

    def test_direct_arithmetic(self):
        assert surrogate_score(np.asarray([0.6, 0.8]),
                               np.asarray([0.8, 0.6])) == pytest.approx(0.96)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            surrogate_score(np.ones(3), np.ones(4))


class TestNormIdentity:
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 32))
    @settings(max_examples=100, deadline=None)
    def test_unit_norm_distance_dot_identity(self, seed, dim):
        """||u - v||^2 == 2 - 2 u.v for unit vectors, to double precision."""
        rng = np.random.default_rng(seed)
        u = rng.normal(size=dim)
        v = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        lhs = float(((u - v) ** 2).sum())
        rhs = 2.0 - 2.0 * float(np.dot(u, v))
        assert abs(lhs - rhs) < 1e-12
