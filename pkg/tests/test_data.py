from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxembed.data import (CacheFormatError, CacheSizeError, EmbeddingMatrix,
                           build_vocab, generate_synthetic_corpus,
                           load_pairs_jsonl, read_embedding_cache,
                           read_named_sections, tokenize,
                           write_embedding_cache, write_named_sections)


def write_jsonl(tmp_path, lines, name="pairs.jsonl"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestTokenize:
    def test_lowercases_and_splits_punctuation(self):
        assert tokenize("Hello, World!x") == ["hello", "world", "x"]

    def test_unicode_whitespace(self):
        assert tokenize("a b\tc") == ["a", "b", "c"]

    def test_empty(self):
        assert tokenize("") == []
        assert tokenize("...") == []


class TestLoadPairs:
    def test_identity_case(self, tmp_path):
        path = write_jsonl(tmp_path, ['{"query":"q","document":"d","domain":"x"}'])
        ds = load_pairs_jsonl(path)
        assert len(ds) == 1
        q, d = ds[0]
        assert (q.text, d.text) == ("q", "d")
        assert q.domain == d.domain == "x"

    def test_prefixes_prepended(self, tmp_path):
        path = write_jsonl(tmp_path, ['{"query":"q","document":"d","domain":"x"}'])
        ds = load_pairs_jsonl(path, prefix_config={"x": ("search_query", "search_document")})
        q, d = ds[0]
        assert q.text == "search_query: q"
        assert d.text == "search_document: d"
        assert q.raw_text() == "q"
        assert d.raw_text() == "d"

    def test_duplicates_preserved(self, tmp_path):
        line = '{"query":"q","document":"d","domain":"x"}'
        ds = load_pairs_jsonl(write_jsonl(tmp_path, [line, line]))
        assert len(ds) == 2

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = write_jsonl(tmp_path, ['{"query":"q","document":"d","domain":"x"}',
                                      "{not json"])
        with pytest.raises(ValueError, match=":2:"):
            load_pairs_jsonl(path)

    def test_missing_field_named(self, tmp_path):
        path = write_jsonl(tmp_path, ['{"query":"q","domain":"x"}'])
        with pytest.raises(ValueError, match="document"):
            load_pairs_jsonl(path)

    def test_file_order_preserved(self, tmp_path):
        lines = [json.dumps({"query": f"q{i}", "document": f"d{i}", "domain": "x"})
                 for i in range(5)]
        ds = load_pairs_jsonl(write_jsonl(tmp_path, lines))
        assert [q.text for q, _ in ds.pairs] == [f"q{i}" for i in range(5)]


class TestVocab:
    def test_direct_count(self):
        v = build_vocab(["a b", "b c"])
        assert v.n_docs == 2
        assert v.df == {"a": 1, "b": 2, "c": 1}

    def test_single_doc(self):
        v = build_vocab(["x"])
        assert v.n_docs == 1 and v.df == {"x": 1}

    def test_degenerate_empty_texts(self):
        v = build_vocab(["", ""])
        assert v.n_docs == 2 and v.df == {}

    def test_ids_dense(self):
        v = build_vocab(["c a", "b a"])
        assert sorted(v.term_ids.values()) == list(range(len(v.term_ids)))

    @given(st.lists(st.text(alphabet="abc xyz", max_size=20), min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_df_matches_brute_recount(self, texts):
        v = build_vocab(texts)
        for term, df in v.df.items():
            brute = sum(1 for t in texts if term in tokenize(t))
            assert df == brute
        assert v.n_docs == len(texts)


class TestSyntheticCorpus:
    def test_same_seed_identical(self):
        a = generate_synthetic_corpus(7, 2, 8, 16, 0.2)
        b = generate_synthetic_corpus(7, 2, 8, 16, 0.2)
        assert a.content_hash() == b.content_hash()

    def test_different_seed_differs(self):
        a = generate_synthetic_corpus(7, 2, 8, 16, 0.2)
        b = generate_synthetic_corpus(8, 2, 8, 16, 0.2)
        assert a.content_hash() != b.content_hash()

    def test_no_noise_full_subsample_is_subset(self):
        ds = generate_synthetic_corpus(3, 2, 10, 16, noise=0.0, query_subsample=1.0)
        for q, d in ds.pairs:
            assert set(tokenize(q.text)) <= set(tokenize(d.text))

    def test_counts(self):
        ds = generate_synthetic_corpus(5, 4, 64, 16, 0.1)
        assert len(ds) == 256
        assert len(ds.domains) == 4

    def test_domains_agree_within_pairs(self):
        ds = generate_synthetic_corpus(5, 3, 4, 8, 0.1)
        for q, d in ds.pairs:
            assert q.domain == d.domain


class TestEmbeddingMatrix:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            EmbeddingMatrix(dim=3, rows=np.zeros((2, 4)), ids=("a", "b"))

    def test_id_count_validation(self):
        with pytest.raises(ValueError):
            EmbeddingMatrix(dim=2, rows=np.zeros((2, 2)), ids=("a",))

    def test_unit_norm_flag_enforced(self):
        rows = np.asarray([[3.0, 4.0]], dtype=np.float32)
        with pytest.raises(ValueError):
            EmbeddingMatrix(dim=2, rows=rows, ids=("a",), unit_norm=True)
        EmbeddingMatrix(dim=2, rows=rows / 5.0, ids=("a",), unit_norm=True)


class TestEmbeddingCache:
    def test_round_trip(self, tmp_path):
        m = EmbeddingMatrix(dim=3, rows=np.arange(6, dtype=np.float32).reshape(2, 3),
                            ids=("r0", "r1"))
        path = tmp_path / "m.cde"
        write_embedding_cache(m, path)
        back = read_embedding_cache(path)
        assert np.array_equal(back.rows, m.rows)
        assert back.ids == m.ids

    def test_empty_matrix(self, tmp_path):
        m = EmbeddingMatrix(dim=8, rows=np.zeros((0, 8), dtype=np.float32), ids=())
        path = tmp_path / "empty.cde"
        write_embedding_cache(m, path)
        back = read_embedding_cache(path)
        assert back.rows.shape == (0, 8) and back.ids == ()

    def test_corrupt_magic_is_format_error(self, tmp_path):
        path = tmp_path / "bad.cde"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(CacheFormatError):
            read_embedding_cache(path)

    def test_truncated_is_size_error(self, tmp_path):
        m = EmbeddingMatrix(dim=4, rows=np.ones((3, 4), dtype=np.float32),
                            ids=("a", "b", "c"))
        path = tmp_path / "m.cde"
        write_embedding_cache(m, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CacheSizeError):
            read_embedding_cache(path)

    @given(n=st.integers(0, 9), dim=st.integers(1, 6),
           seed=st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, n, dim, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        rows = rng.normal(size=(n, dim)).astype(np.float32)
        m = EmbeddingMatrix(dim=dim, rows=rows,
                            ids=tuple(f"id{i}" for i in range(n)))
        path = tmp_path_factory.mktemp("cache") / "m.cde"
        write_embedding_cache(m, path)
        back = read_embedding_cache(path)
        assert np.array_equal(back.rows, m.rows)
        assert back.ids == m.ids


class TestNamedSections:
    def test_round_trip(self, tmp_path):
        sections = {
            "w": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.asarray([1.5, -2.0], dtype=np.float32),
        }
        path = tmp_path / "params.ckpt"
        write_named_sections(sections, path)
        back = read_named_sections(path)
        assert set(back) == {"w", "b"}
        assert np.array_equal(back["w"], sections["w"])
        assert np.array_equal(back["b"], sections["b"].reshape(1, -1))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(CacheFormatError):
            read_named_sections(path)
