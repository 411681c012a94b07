"""Hashed TF-IDF embedder standing in for a pretrained encoder.

Used for clustering, false-negative filtering, and batch-hardness
measurement. All functions here are pure over an immutable Vocab, so they
are trivially parallel over texts.

Feature hashing uses FNV-1a with the standard 64-bit constants
(offset 0xcbf29ce484222325, prime 0x100000001b3) over UTF-8 bytes; the
bucket is ``hash % hash_dim`` and the sign comes from the hash's top bit.
The constants are fixed so cached vectors are portable across runs.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingMatrix, TextRecord, Vocab, tokenize

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class SurrogateConfig:
    hash_dim: int = 256
    idf_smoothing: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.hash_dim < 2 or self.hash_dim & (self.hash_dim - 1):
            raise ValueError(f"hash_dim must be a power of two >= 2, got {self.hash_dim}")


def idf(vocab: Vocab, term: str) -> float:
    """Smoothed inverse document frequency: ln((1+N)/(1+df)) + 1.

    Unseen terms use df = 0, so the value stays finite and positive.
    """
    df = vocab.df.get(term, 0)
    return math.log((1.0 + vocab.n_docs) / (1.0 + df)) + 1.0


def _term_weight(vocab: Vocab, term: str, cfg: SurrogateConfig) -> float:
    if cfg.idf_smoothing:
        return idf(vocab, term)
    # Unsmoothed variant; unseen terms are treated as df = 1.
    return math.log(max(vocab.n_docs, 1) / max(vocab.df.get(term, 1), 1)) + 1.0


def embed_text(text: str, vocab: Vocab, cfg: SurrogateConfig) -> np.ndarray:
    """Signed hashed TF-IDF vector of length ``cfg.hash_dim`` (float32).

    Each token contributes tf x idf at index hash(token) % hash_dim with a
    sign from the hash. A zero vector stays zero under normalization.
    """
    vec = np.zeros(cfg.hash_dim, dtype=np.float64)
    for term, tf in Counter(tokenize(text)).items():
        h = fnv1a64(term)
        sign = -1.0 if (h >> 63) & 1 else 1.0
        vec[h % cfg.hash_dim] += sign * tf * _term_weight(vocab, term, cfg)
    if cfg.normalize:
        norm = math.sqrt(float(np.dot(vec, vec)))
        if norm > 0.0:
            vec /= norm
    return vec.astype(np.float32)


def embed_records(records: list[TextRecord], vocab: Vocab,
                  cfg: SurrogateConfig, unit_norm: bool | None = None) -> EmbeddingMatrix:
    """Embed a list of records into an EmbeddingMatrix, preserving order."""
    rows = np.zeros((len(records), cfg.hash_dim), dtype=np.float32)
    for i, rec in enumerate(records):
        rows[i] = embed_text(rec.text, vocab, cfg)
    if unit_norm is None:
        unit_norm = False  # zero rows are possible, so do not claim the flag
    return EmbeddingMatrix(dim=cfg.hash_dim, rows=rows,
                           ids=tuple(r.id for r in records), unit_norm=unit_norm)


def surrogate_score(q_vec: np.ndarray, d_vec: np.ndarray) -> float:
    """Dot product score f(d, q); accumulated in float64."""
    q = np.asarray(q_vec, dtype=np.float64)
    d = np.asarray(d_vec, dtype=np.float64)
    if q.shape != d.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {d.shape}")
    return float(np.dot(q, d))
