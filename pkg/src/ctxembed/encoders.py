"""Toy biencoder and the two-stage contextual document encoder.

The contextual encoder runs in two stages: a first-stage encoder turns each
context document into one embedding (cacheable per corpus), and a
second-stage encoder attends over [context rows ; text token rows] and
pools over text tokens only. Context rows receive no positional encodings,
so the output is invariant under context permutation; absent or dropped
context slots hold a learnable null token, and an all-null context reduces
the model to a plain biencoder of the text.

Queries and documents share all weights; the first and second stages do
not share weights with each other. Token ids come from hashing into a
fixed table (id 0 stays reserved), so there is no out-of-vocabulary case.

Forward passes are pure given parameters; batched inference is
embarrassingly parallel across inputs. Training tapes are single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import read_named_sections, tokenize, write_named_sections
from .surrogate import fnv1a64


@dataclass(frozen=True)
class EncoderConfig:
    table_size: int = 4096
    embed_dim: int = 64
    max_text_tokens: int = 64
    j_max: int = 256
    context_doc_tokens: int = 32
    blocks: int = 1
    dtype: str = "f32"  # f32 | f64
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.table_size < 2 or self.max_text_tokens < 1 or self.j_max < 1:
            raise ValueError("table_size, max_text_tokens, j_max must be positive")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32


def hash_token_id(token: str, table_size: int) -> int:
    """Hash a token into [1, table_size); id 0 stays reserved."""
    return 1 + fnv1a64(token) % (table_size - 1)


def text_token_ids(text: str, cfg: EncoderConfig) -> list[int]:
    tokens = tokenize(text)[:cfg.max_text_tokens]
    if not tokens:
        raise ValueError(f"no tokens after tokenization: {text!r}")
    return [hash_token_id(t, cfg.table_size) for t in tokens]


def context_token_ids(text: str, cfg: EncoderConfig) -> list[int]:
    tokens = tokenize(text)[:cfg.context_doc_tokens]
    if not tokens:
        raise ValueError(f"no tokens after tokenization: {text!r}")
    return [hash_token_id(t, cfg.table_size) for t in tokens]


@dataclass
class BiencoderParams:
    """Token table plus projection, shared between queries and documents."""

    table: Tensor
    proj: Tensor

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}table", self.table), (f"{prefix}proj", self.proj)]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


@dataclass
class CdeParams:
    """Both stages of the contextual encoder.

    ``m1`` embeds context documents; the second stage owns its own token
    table, one attention block (wq/wk/wv) with residual, an output
    projection, the learnable null token, and positional encodings that are
    only ever added at text positions.
    """

    m1: BiencoderParams
    m2_table: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    w_out: Tensor
    v_null: Tensor
    pos_table: Tensor
    j_max: int
    blocks: int = 1

    def named(self) -> list[tuple[str, Tensor]]:
        return self.m1.named("m1.") + [
            ("m2.table", self.m2_table),
            ("m2.wq", self.wq),
            ("m2.wk", self.wk),
            ("m2.wv", self.wv),
            ("m2.w_out", self.w_out),
            ("m2.v_null", self.v_null),
            ("m2.pos", self.pos_table),
        ]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def m2_tensors(self) -> list[Tensor]:
        return [t for name, t in self.named() if name.startswith("m2.")]


def _near_identity(rng, e: int, gain: float = 1.0) -> np.ndarray:
    # projections start near identity so pooled token structure survives init
    return gain * np.eye(e) + rng.normal(0.0, 0.02, (e, e))


def init_biencoder(cfg: EncoderConfig) -> BiencoderParams:
    """Token rows start at unit scale (sigma = 1/sqrt(e)); without layer
    norms this keeps dot products O(1) through the whole stack."""
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    e = cfg.embed_dim
    table = rng.normal(0.0, 1.0 / np.sqrt(e), (cfg.table_size, e))
    proj = _near_identity(rng, e)
    return BiencoderParams(
        table=Tensor(table.astype(dt), requires_grad=True),
        proj=Tensor(proj.astype(dt), requires_grad=True),
    )


def init_cde(cfg: EncoderConfig) -> CdeParams:
    """Second stage starts as a plain text encoder.

    The attention value path is zero-initialized, so context flows in only
    as training grows it. The second-stage token table starts as a copy of
    the first stage's draw (separate parameters; they diverge in training):
    with aligned token spaces and near-identity query/key maps, "this token
    is frequent in the context" is visible to the attention scores from the
    first step. The query/key gain e^(1/4) cancels the attention's
    1/sqrt(e) so initial logits sit at the scale of raw similarities.
    """
    rng = np.random.default_rng((cfg.seed, 1))
    dt = cfg.np_dtype
    e = cfg.embed_dim
    qk_gain = float(e) ** 0.25
    m1 = init_biencoder(cfg)
    return CdeParams(
        m1=m1,
        m2_table=Tensor(m1.table.data.copy().astype(dt), requires_grad=True),
        wq=Tensor(_near_identity(rng, e, qk_gain).astype(dt), requires_grad=True),
        wk=Tensor(_near_identity(rng, e, qk_gain).astype(dt), requires_grad=True),
        wv=Tensor(np.zeros((e, e)).astype(dt), requires_grad=True),
        w_out=Tensor(_near_identity(rng, e).astype(dt), requires_grad=True),
        v_null=Tensor(np.zeros((1, e), dtype=dt), requires_grad=True),
        # learned absolute encodings, zero at init: position carries no
        # signal in bag-of-tokens data, so they grow only if training wants
        pos_table=Tensor(np.zeros((cfg.max_text_tokens, e), dtype=dt),
                         requires_grad=True),
        j_max=cfg.j_max,
        blocks=cfg.blocks,
    )


def biencoder_embed(token_ids: list[int], params: BiencoderParams) -> Tensor:
    """Mean-pooled token embeddings, projected, L2-normalized (1 x e)."""
    if not token_ids:
        raise ValueError("empty token list")
    looked = ag.embedding_lookup(params.table, token_ids)
    pooled = ag.mean_pool(looked, range(len(token_ids)))
    projected = ag.matmul(pooled, params.proj)
    return ag.l2_normalize_rows(projected)


def m1_context_row(token_ids: list[int], params: BiencoderParams) -> Tensor:
    """First-stage embedding of one context doc (1 x e, unit norm).

    Identical computation to the biencoder; kept as its own entry point
    because context rows are an internal surface (cacheable per corpus) with
    their own gradient-injection path during staged backprop.
    """
    return biencoder_embed(token_ids, params)


@dataclass
class ContextSet:
    """First-stage outputs padded to capacity, with null slots marked.

    ``null_row`` snapshots the null-token value the padding was built with;
    the second stage substitutes the live parameter at marked slots, so the
    snapshot only matters for cache round-trips.
    """

    embeddings: np.ndarray
    source_ids: tuple[str, ...]
    null_mask: np.ndarray
    null_row: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        self.null_mask = np.asarray(self.null_mask, dtype=bool)
        if self.embeddings.ndim != 2 or self.null_mask.shape != (self.embeddings.shape[0],):
            raise ValueError("context shape mismatch")
        if self.null_mask.any():
            if not np.array_equal(self.embeddings[self.null_mask],
                                  np.broadcast_to(self.null_row.reshape(1, -1),
                                                  (int(self.null_mask.sum()),
                                                   self.embeddings.shape[1]))):
                raise ValueError("null-marked slots must hold exactly the null row")

    @property
    def capacity(self) -> int:
        return self.embeddings.shape[0]

    def filled(self) -> int:
        return int((~self.null_mask).sum())


def null_context(params: CdeParams) -> ContextSet:
    """All slots null: the encoder's plain-biencoder mode."""
    e = params.v_null.data.shape[1]
    null_row = params.v_null.data.reshape(-1).copy()
    emb = np.tile(null_row, (params.j_max, 1))
    return ContextSet(embeddings=emb, source_ids=(),
                      null_mask=np.ones(params.j_max, dtype=bool),
                      null_row=null_row)


def m1_embed_context(docs: list[list[int]], params: CdeParams,
                     source_ids: tuple[str, ...] | None = None) -> ContextSet:
    """Embed context docs with the first stage, padding to capacity with nulls.

    ``docs`` are token-id lists. Runs without a tape: cache or reuse the
    result freely.
    """
    if not docs:
        raise ValueError("docs must be non-empty; use null_context for an empty context")
    if len(docs) > params.j_max:
        raise ValueError(f"{len(docs)} context docs exceed capacity {params.j_max}")
    rows = [m1_context_row(ids, params.m1).data.reshape(-1) for ids in docs]
    null_row = params.v_null.data.reshape(-1).copy()
    emb = np.tile(null_row, (params.j_max, 1)).astype(rows[0].dtype)
    for i, r in enumerate(rows):
        emb[i] = r
    mask = np.ones(params.j_max, dtype=bool)
    mask[:len(rows)] = False
    if source_ids is None:
        source_ids = tuple(f"ctx{i}" for i in range(len(rows)))
    return ContextSet(embeddings=emb, source_ids=tuple(source_ids),
                      null_mask=mask, null_row=null_row.astype(emb.dtype))


def apply_sequence_dropout(ctx: ContextSet, p: float, seed: int,
                           training: bool) -> ContextSet:
    """Independently null out non-null slots with probability p (training only)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if not training or p == 0.0:
        return ctx
    rng = np.random.default_rng(seed)
    draws = rng.random(ctx.capacity) < p
    drop = draws & ~ctx.null_mask
    emb = ctx.embeddings.copy()
    emb[drop] = ctx.null_row
    return ContextSet(embeddings=emb, source_ids=ctx.source_ids,
                      null_mask=ctx.null_mask | drop, null_row=ctx.null_row)


def pool_text_tokens(sequence: Tensor, text_rows) -> Tensor:
    """Mean over text positions only; context rows never pool directly."""
    rows = list(text_rows)
    if not rows:
        raise ValueError("empty text range")
    return ag.mean_pool(sequence, rows)


def cde_forward(text_ids: list[int], ctx_tensor: Tensor, null_mask: np.ndarray,
                params: CdeParams, attention_enabled: bool = True) -> Tensor:
    """Second-stage forward: text rows attend over context rows -> unit vector.

    ``ctx_tensor`` holds capacity x e context rows; slots flagged in
    ``null_mask`` are replaced by the live null token (gradients included).
    Text token rows (token embedding + positional encoding) act as attention
    queries; context rows, which carry no positional encodings, act as keys
    and values, so the context enters each token's representation as an
    unordered set. Pooling runs over text positions only, then projection
    and normalization. ``attention_enabled`` exists for ablations: with it
    off, the output is the pooled text path alone and cannot depend on
    context.

    Text-to-text attention is deliberately absent: on short texts it adds
    trainable capacity with no counterpart in the data and measurably hurts
    held-out retrieval, while context cross-attention is the mechanism under
    test.
    """
    if not text_ids:
        raise ValueError("empty token list")
    t = len(text_ids)
    ctx_full = ag.dropout_rows(ctx_tensor, null_mask, params.v_null)
    tok = ag.embedding_lookup(params.m2_table, text_ids)
    pos = ag.embedding_lookup(params.pos_table, list(range(t)))
    x = ag.add(tok, pos)
    if attention_enabled:
        for _ in range(params.blocks):
            q = ag.matmul(x, params.wq)
            k = ag.matmul(ctx_full, params.wk)
            v = ag.matmul(ctx_full, params.wv)
            att = ag.scaled_dot_attention(q, k, v)
            x = ag.add(x, att)
    pooled = pool_text_tokens(x, range(t))
    projected = ag.matmul(pooled, params.w_out)
    return ag.l2_normalize_rows(projected)


ROLES = ("document", "query")


def cde_embed(text_ids: list[int], ctx: ContextSet, params: CdeParams,
              role: str = "document") -> Tensor:
    """Embed one text against a (padded) context set; roles share weights."""
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    if ctx.capacity != params.j_max:
        raise ValueError(
            f"context capacity {ctx.capacity} != model capacity {params.j_max}")
    ctx_tensor = Tensor(ctx.embeddings.copy())
    return cde_forward(text_ids, ctx_tensor, ctx.null_mask, params)


# ---------------------------------------------------------------------------
# inference-facing wrappers


@dataclass
class BiencoderModel:
    params: BiencoderParams
    cfg: EncoderConfig

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.cfg.embed_dim), dtype=self.cfg.np_dtype)
        rows = [biencoder_embed(text_token_ids(t, self.cfg), self.params).data.reshape(-1)
                for t in texts]
        return np.stack(rows)


@dataclass
class CdeModel:
    params: CdeParams
    cfg: EncoderConfig

    def null_context(self) -> ContextSet:
        return null_context(self.params)

    def context_from_texts(self, texts: list[str],
                           source_ids: tuple[str, ...] | None = None) -> ContextSet:
        docs = [context_token_ids(t, self.cfg) for t in texts[:self.params.j_max]]
        if source_ids is not None:
            source_ids = tuple(source_ids[:len(docs)])
        return m1_embed_context(docs, self.params, source_ids=source_ids)

    def embed_texts(self, texts: list[str], ctx: ContextSet | None = None,
                    role: str = "document") -> np.ndarray:
        if not texts:
            return np.zeros((0, self.cfg.embed_dim), dtype=self.cfg.np_dtype)
        if ctx is None:
            ctx = self.null_context()
        rows = [cde_embed(text_token_ids(t, self.cfg), ctx, self.params, role).data.reshape(-1)
                for t in texts]
        return np.stack(rows)


# ---------------------------------------------------------------------------
# checkpoints (same binary container as the embedding cache)

_META_KEYS = ("table_size", "embed_dim", "max_text_tokens", "j_max",
              "context_doc_tokens", "blocks", "seed")


def _meta_row(cfg: EncoderConfig) -> np.ndarray:
    return np.asarray([[float(getattr(cfg, k)) for k in _META_KEYS]], dtype=np.float32)


def _cfg_from_meta(row: np.ndarray, dtype: str) -> EncoderConfig:
    vals = {k: int(v) for k, v in zip(_META_KEYS, row.reshape(-1))}
    return EncoderConfig(dtype=dtype, **vals)


def save_biencoder(params: BiencoderParams, cfg: EncoderConfig,
                   path: str | Path) -> None:
    sections = {"__meta__": _meta_row(cfg)}
    sections.update({name: t.data for name, t in params.named()})
    write_named_sections(sections, path)


def load_biencoder(path: str | Path, dtype: str = "f32"
                   ) -> tuple[BiencoderParams, EncoderConfig]:
    sections = read_named_sections(path)
    cfg = _cfg_from_meta(sections.pop("__meta__"), dtype)
    dt = cfg.np_dtype
    params = BiencoderParams(
        table=Tensor(sections["table"].astype(dt), requires_grad=True),
        proj=Tensor(sections["proj"].astype(dt), requires_grad=True),
    )
    return params, cfg


def save_cde(params: CdeParams, cfg: EncoderConfig, path: str | Path) -> None:
    sections = {"__meta__": _meta_row(cfg)}
    sections.update({name: t.data for name, t in params.named()})
    write_named_sections(sections, path)


def load_cde(path: str | Path, dtype: str = "f32") -> tuple[CdeParams, EncoderConfig]:
    sections = read_named_sections(path)
    cfg = _cfg_from_meta(sections.pop("__meta__"), dtype)
    dt = cfg.np_dtype

    def t(name):
        return Tensor(sections[name].astype(dt), requires_grad=True)

    params = CdeParams(
        m1=BiencoderParams(table=t("m1.table"), proj=t("m1.proj")),
        m2_table=t("m2.table"), wq=t("m2.wq"), wk=t("m2.wk"), wv=t("m2.wv"),
        w_out=t("m2.w_out"), v_null=t("m2.v_null"), pos_table=t("m2.pos"),
        j_max=cfg.j_max, blocks=cfg.blocks,
    )
    return params, cfg
