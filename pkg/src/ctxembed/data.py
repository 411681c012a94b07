"""Corpus ingestion, vocabulary, synthetic data, and the binary embedding cache.

All container types are immutable after construction and safe to share
across threads. File writes are single-writer.
"""

from __future__ import annotations

import hashlib
import json
import re
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"CDE1"
CACHE_VERSION = 1

# Lowercase, then split on unicode whitespace and ASCII punctuation.
_SPLIT_RE = re.compile(r"[\s%s]+" % re.escape(string.punctuation))


class CacheFormatError(ValueError):
    """Raised when an embedding-cache file has a bad magic or version."""


class CacheSizeError(ValueError):
    """Raised when an embedding-cache file is truncated."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on unicode whitespace and ASCII punctuation."""
    return [t for t in _SPLIT_RE.split(text.lower()) if t]


@dataclass(frozen=True)
class TextRecord:
    """A single query or document with its domain label.

    ``text`` holds the final (possibly prefixed) string; ``prefix`` records
    the task prefix that was prepended, if any, so it can be stripped again
    for exact-duplicate comparisons.
    """

    id: str
    text: str
    domain: str
    prefix: str | None = None

    def raw_text(self, sep: str = ": ") -> str:
        """Text with the task prefix stripped off."""
        if self.prefix is None:
            return self.text
        head = self.prefix + sep
        if self.text.startswith(head):
            return self.text[len(head):]
        return self.text


@dataclass(frozen=True)
class PairDataset:
    """Aligned (query, document) pairs; index i addresses pair i stably."""

    pairs: tuple[tuple[TextRecord, TextRecord], ...]
    domains: frozenset[str]
    prefix_sep: str = ": "

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> tuple[TextRecord, TextRecord]:
        return self.pairs[i]

    def queries(self) -> list[TextRecord]:
        return [q for q, _ in self.pairs]

    def documents(self) -> list[TextRecord]:
        return [d for _, d in self.pairs]

    def domain_labels(self) -> list[str]:
        """Per-pair domain label (query and document always agree)."""
        return [q.domain for q, _ in self.pairs]

    def content_hash(self) -> str:
        """Stable hash of the full pair content, for manifests and tests."""
        h = hashlib.sha256()
        for q, d in self.pairs:
            h.update(json.dumps(
                [q.id, q.text, q.domain, d.id, d.text, d.domain],
                ensure_ascii=False).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def make_dataset(pairs: list[tuple[TextRecord, TextRecord]],
                 prefix_sep: str = ": ") -> PairDataset:
    for i, (q, d) in enumerate(pairs):
        if q.domain != d.domain:
            raise ValueError(
                f"pair {i}: query domain {q.domain!r} != document domain {d.domain!r}")
        if not q.text or not d.text:
            raise ValueError(f"pair {i}: empty text after prefixing")
    domains = frozenset(q.domain for q, _ in pairs)
    return PairDataset(pairs=tuple(pairs), domains=domains, prefix_sep=prefix_sep)


@dataclass(frozen=True)
class Vocab:
    """Term ids, document frequencies, and corpus size for IDF statistics."""

    term_ids: dict[str, int]
    df: dict[str, int]
    n_docs: int

    def __len__(self) -> int:
        return len(self.term_ids)


def build_vocab(texts: list[str], tokenizer=tokenize) -> Vocab:
    """Count document frequencies over ``texts``.

    df(t) is the number of texts containing t at least once; an empty text
    contributes no terms.
    """
    if not isinstance(texts, (list, tuple)):
        raise TypeError("texts must be a list of strings")
    term_ids: dict[str, int] = {}
    df: dict[str, int] = {}
    for text in texts:
        for term in set(tokenizer(text)):
            if term not in term_ids:
                term_ids[term] = len(term_ids)
                df[term] = 0
            df[term] += 1
    return Vocab(term_ids=term_ids, df=df, n_docs=len(texts))


def load_pairs_jsonl(path: str | Path,
                     prefix_config: dict[str, tuple[str, str]] | None = None,
                     prefix_sep: str = ": ") -> PairDataset:
    """Load (query, document, domain) pairs from a JSONL file.

    ``prefix_config`` maps a domain to (query_prefix, doc_prefix); configured
    prefixes are prepended as ``"<prefix><sep><text>"``. Duplicate pair lines
    are preserved; deduplication is the negative filter's job.
    """
    path = Path(path)
    pairs: list[tuple[TextRecord, TextRecord]] = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {e}") from e
            for key in ("query", "document", "domain"):
                if key not in obj or not isinstance(obj[key], str):
                    raise ValueError(f"{path}:{lineno}: missing string field {key!r}")
            domain = obj["domain"]
            base = obj.get("id", f"p{lineno}")
            q_prefix = d_prefix = None
            q_text, d_text = obj["query"], obj["document"]
            if prefix_config and domain in prefix_config:
                q_prefix, d_prefix = prefix_config[domain]
                if q_prefix:
                    q_text = f"{q_prefix}{prefix_sep}{q_text}"
                if d_prefix:
                    d_text = f"{d_prefix}{prefix_sep}{d_text}"
            q = TextRecord(id=f"{base}.q", text=q_text, domain=domain,
                           prefix=q_prefix or None)
            d = TextRecord(id=f"{base}.d", text=d_text, domain=domain,
                           prefix=d_prefix or None)
            pairs.append((q, d))
    return make_dataset(pairs, prefix_sep=prefix_sep)


def write_pairs_jsonl(dataset: PairDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for i, (q, d) in enumerate(dataset.pairs):
            f.write(json.dumps({
                "id": f"p{i}",
                "query": q.raw_text(dataset.prefix_sep),
                "document": d.raw_text(dataset.prefix_sep),
                "domain": q.domain,
            }, ensure_ascii=False) + "\n")


def generate_synthetic_corpus(seed: int,
                              n_domains: int,
                              pairs_per_domain: int,
                              vocab_per_domain: int,
                              noise: float,
                              doc_len: int = 12,
                              query_subsample: float = 0.5,
                              shared_vocab_size: int | None = None,
                              shared_fraction: float = 0.25,
                              stopwords_per_domain: int = 8,
                              fillers_per_doc: int = 4) -> PairDataset:
    """Deterministic synthetic corpus with per-domain core vocabularies.

    Each domain draws documents from a disjoint core vocabulary mixed with a
    shared vocabulary (``shared_fraction`` of content tokens). The shared
    vocabulary is partitioned round-robin into per-domain blocks: block g
    supplies domain g's ``fillers_per_doc`` ubiquitous filler tokens while
    serving as ordinary *content* for every other domain. The same surface
    token is therefore uninformative in one domain and discriminative
    elsewhere, so no single global term weighting can be right everywhere;
    term importance is genuinely domain-dependent. A query is a subsampled
    view of its document; each query token is swapped with probability
    ``noise`` for a random token of its own domain (paraphrase-style noise:
    noise tokens are domain-common, so a domain-aware weighting can discount
    them). Gold pairs stay recoverable by lexical overlap.
    """
    if n_domains < 1 or pairs_per_domain < 1 or vocab_per_domain < 1:
        raise ValueError("counts must be >= 1")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be in [0, 1]")
    if shared_vocab_size is None:
        shared_vocab_size = max(vocab_per_domain,
                                n_domains * max(stopwords_per_domain, 1))
    rng = np.random.default_rng(seed)

    shared = [f"sh{t}" for t in range(shared_vocab_size)]
    cores = {g: [f"d{g}w{t}" for t in range(vocab_per_domain)]
             for g in range(n_domains)}
    blocks = {g: [shared[t] for t in range(shared_vocab_size)
                  if t % n_domains == g] for g in range(n_domains)}
    n_stop = min(stopwords_per_domain, min(len(b) for b in blocks.values()))
    stopwords = {g: [blocks[g][int(i)] for i in
                     rng.choice(len(blocks[g]), size=n_stop, replace=False)]
                 for g in range(n_domains)}
    content_shared = {g: [t for h in range(n_domains) if h != g
                          for t in blocks[h]] or shared
                      for g in range(n_domains)}

    pairs: list[tuple[TextRecord, TextRecord]] = []
    for g in range(n_domains):
        domain = f"dom{g:02d}"
        core = cores[g]
        stop = stopwords[g]
        foreign = content_shared[g]
        domain_vocab = core + stop
        for i in range(pairs_per_domain):
            doc_tokens = []
            for _ in range(doc_len):
                if rng.random() < shared_fraction:
                    doc_tokens.append(foreign[rng.integers(len(foreign))])
                else:
                    doc_tokens.append(core[rng.integers(len(core))])
            for _ in range(fillers_per_doc if n_stop else 0):
                doc_tokens.append(stop[rng.integers(len(stop))])
            n_q = max(1, int(round(query_subsample * len(doc_tokens))))
            picked = rng.choice(len(doc_tokens), size=n_q, replace=False)
            q_tokens = [doc_tokens[j] for j in sorted(picked)]
            q_tokens = [domain_vocab[rng.integers(len(domain_vocab))]
                        if rng.random() < noise else t
                        for t in q_tokens]
            q = TextRecord(id=f"{domain}-q{i}", text=" ".join(q_tokens), domain=domain)
            d = TextRecord(id=f"{domain}-d{i}", text=" ".join(doc_tokens), domain=domain)
            pairs.append((q, d))
    return make_dataset(pairs)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense row-major float32 matrix with a row-id sidecar."""

    dim: int
    rows: np.ndarray
    ids: tuple[str, ...] = field(default=())
    unit_norm: bool = False

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ValueError(f"rows must be N x {self.dim}, got {rows.shape}")
        if len(self.ids) != rows.shape[0]:
            raise ValueError(
                f"{rows.shape[0]} rows but {len(self.ids)} ids")
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.unit_norm and rows.shape[0] > 0:
            norms = np.linalg.norm(rows.astype(np.float64), axis=1)
            if not np.all(np.abs(norms - 1.0) <= 1e-5):
                raise ValueError("unit_norm set but a row norm deviates from 1")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def row_for(self, record_id: str) -> np.ndarray:
        return self.rows[self.ids.index(record_id)]


def _write_f32_block(f, name: str | None, rows: np.ndarray) -> None:
    data = np.ascontiguousarray(rows, dtype="<f4")
    if name is not None:
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
    f.write(struct.pack("<I", data.shape[1]))
    f.write(struct.pack("<Q", data.shape[0]))
    f.write(data.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CacheSizeError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_f32_block(f, named: bool) -> tuple[str | None, np.ndarray]:
    name = None
    if named:
        (nlen,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, nlen).decode("utf-8")
    (dim,) = struct.unpack("<I", _read_exact(f, 4))
    (count,) = struct.unpack("<Q", _read_exact(f, 8))
    raw = _read_exact(f, count * dim * 4)
    rows = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    return name, rows


def write_embedding_cache(m: EmbeddingMatrix, path: str | Path) -> None:
    """Write the little-endian binary cache; round-trips bit-exactly."""
    if m.dim < 1:
        raise ValueError("dim must be >= 1")
    path = Path(path)
    with path.open("wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", CACHE_VERSION))
        _write_f32_block(f, None, m.rows)
        for rid in m.ids:
            raw = rid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def read_embedding_cache(path: str | Path) -> EmbeddingMatrix:
    path = Path(path)
    with path.open("rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise CacheFormatError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache version {version}")
        _, rows = _read_f32_block(f, named=False)
        ids = []
        for _ in range(rows.shape[0]):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4))
            ids.append(_read_exact(f, nlen).decode("utf-8"))
    return EmbeddingMatrix(dim=rows.shape[1], rows=rows, ids=tuple(ids))


def write_named_sections(sections: dict[str, np.ndarray], path: str | Path) -> None:
    """Write named float32 sections in the same container as the cache.

    Used for parameter checkpoints: each section is one parameter tensor,
    stored 2-D (vectors as 1 x n).
    """
    path = Path(path)
    with path.open("wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", CACHE_VERSION))
        f.write(struct.pack("<Q", len(sections)))
        for name, rows in sections.items():
            arr = np.asarray(rows, dtype=np.float32)
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            _write_f32_block(f, name, arr)


def read_named_sections(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with path.open("rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise CacheFormatError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", _read_exact(f, 8))
        for _ in range(count):
            name, rows = _read_f32_block(f, named=True)
            out[name] = rows
    return out


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
