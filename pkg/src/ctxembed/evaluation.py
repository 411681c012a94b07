"""Retrieval evaluation: NDCG@10, hardness measurement, IDF divergence,
test-time context strategies, context-size sweeps, and cross-domain
context matrices.

Ranking is exact over the full corpus (no approximate search) with ties
broken by lower doc id. Relevance is binary; a query's relevant set is its
paired document closed over exact text duplicates. Per-query evaluation is
independent, so parallelism is trivial; report assembly is single-writer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PairDataset, TextRecord, Vocab
from .encoders import (BiencoderModel, CdeModel, ContextSet,
                       context_token_ids, m1_context_row)
from .surrogate import SurrogateConfig, embed_text, idf

DOC_CONTEXTS = ("null", "random_in_domain", "topk", "full_sample")
QUERY_CONTEXTS = ("null", "random_in_domain", "topk")


@dataclass(frozen=True)
class InferenceStrategy:
    doc_context: str = "null"
    query_context: str = "null"
    k: int = 8

    def __post_init__(self):
        if self.doc_context not in DOC_CONTEXTS:
            raise ValueError(f"doc_context must be one of {DOC_CONTEXTS}")
        if self.query_context not in QUERY_CONTEXTS:
            raise ValueError(f"query_context must be one of {QUERY_CONTEXTS}")

    def label(self) -> str:
        return f"{self.doc_context}-{self.query_context}"


@dataclass
class RankedList:
    query_id: str
    doc_ids: list[str]
    scores: list[float]
    relevance: dict[str, int]

    def __post_init__(self):
        for prev, nxt in zip(self.scores, self.scores[1:]):
            if nxt > prev:
                raise ValueError("scores must be non-increasing")


def rank_documents(scores: np.ndarray, doc_ids: list[str]) -> tuple[list[str], list[float]]:
    """Sort by descending score, ties broken by lower doc id."""
    order = sorted(range(len(doc_ids)), key=lambda i: (-float(scores[i]), doc_ids[i]))
    return [doc_ids[i] for i in order], [float(scores[i]) for i in order]


def ndcg_at_k(ranked: RankedList, k: int = 10) -> float | None:
    """NDCG truncated at k; None when the query has no relevant documents."""
    gains = sorted(ranked.relevance.values(), reverse=True)
    if not gains or gains[0] <= 0:
        return None
    dcg = 0.0
    for r, doc_id in enumerate(ranked.doc_ids[:k], start=1):
        rel = ranked.relevance.get(doc_id, 0)
        if rel > 0:
            dcg += rel / math.log2(r + 1)
    idcg = sum(g / math.log2(r + 1)
               for r, g in enumerate(gains[:k], start=1) if g > 0)
    return dcg / idcg


@dataclass
class EvalReport:
    strategy: str
    mean_ndcg10: float
    per_query: list[dict] = field(default_factory=list)
    skipped: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "strategy": self.strategy,
            "mean_ndcg10": self.mean_ndcg10,
            "per_query": self.per_query,
            "skipped": self.skipped,
        }, indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def qrels_from_dataset(dataset: PairDataset,
                       corpus: list[TextRecord]) -> dict[str, set[str]]:
    """query id -> relevant doc ids: the gold pair plus exact text twins."""
    by_text: dict[str, set[str]] = {}
    for d in corpus:
        by_text.setdefault(d.raw_text(dataset.prefix_sep), set()).add(d.id)
    qrels: dict[str, set[str]] = {}
    corpus_ids = {d.id for d in corpus}
    for q, d in dataset.pairs:
        rel = by_text.get(d.raw_text(dataset.prefix_sep), set()) & corpus_ids
        if d.id in corpus_ids:
            rel = rel | {d.id}
        qrels[q.id] = qrels.get(q.id, set()) | rel
    return qrels


def _score_and_report(doc_mat: np.ndarray, query_mat: np.ndarray,
                      corpus: list[TextRecord], queries: list[TextRecord],
                      qrels: dict[str, set[str]], label: str) -> EvalReport:
    doc_ids = [d.id for d in corpus]
    per_query = []
    values = []
    skipped = 0
    scores_all = query_mat.astype(np.float64) @ doc_mat.astype(np.float64).T
    for qi, q in enumerate(queries):
        relevant = qrels.get(q.id, set())
        ranked_ids, ranked_scores = rank_documents(scores_all[qi], doc_ids)
        ranked = RankedList(query_id=q.id, doc_ids=ranked_ids, scores=ranked_scores,
                            relevance={d: 1 for d in relevant})
        value = ndcg_at_k(ranked, 10)
        if value is None:
            skipped += 1
            continue
        values.append(value)
        per_query.append({"query_id": q.id, "ndcg10": value})
    mean = float(np.mean(values)) if values else 0.0
    return EvalReport(strategy=label, mean_ndcg10=mean,
                      per_query=per_query, skipped=skipped)


@dataclass
class SurrogateRetriever:
    """Exact nearest-neighbour handle over surrogate vectors (for top-k context)."""

    vocab: Vocab
    cfg: SurrogateConfig
    doc_matrix: np.ndarray  # corpus docs x hash_dim

    def topk_for_vector(self, vec: np.ndarray, k: int) -> list[int]:
        scores = self.doc_matrix.astype(np.float64) @ np.asarray(vec, dtype=np.float64)
        order = np.argsort(-scores, kind="stable")
        return [int(i) for i in order[:k]]

    def topk_for_text(self, text: str, k: int) -> list[int]:
        return self.topk_for_vector(embed_text(text, self.vocab, self.cfg), k)


def _first_stage_rows(model: CdeModel, corpus: list[TextRecord]) -> np.ndarray:
    """First-stage embedding of every corpus doc; computable once and cacheable."""
    rows = [m1_context_row(context_token_ids(d.text, model.cfg),
                           model.params.m1).data.reshape(-1)
            for d in corpus]
    return np.stack(rows)


def context_from_rows(rows: np.ndarray, model: CdeModel,
                      source_ids: tuple[str, ...] = ()) -> ContextSet:
    """Assemble a padded ContextSet from cached first-stage rows."""
    params = model.params
    if rows.shape[0] > params.j_max:
        rows = rows[:params.j_max]
    null_row = params.v_null.data.reshape(-1).copy()
    emb = np.tile(null_row, (params.j_max, 1)).astype(rows.dtype)
    emb[:rows.shape[0]] = rows
    mask = np.ones(params.j_max, dtype=bool)
    mask[:rows.shape[0]] = False
    return ContextSet(embeddings=emb, source_ids=source_ids, null_mask=mask,
                      null_row=null_row.astype(emb.dtype))


def _domain_context(model: CdeModel, corpus: list[TextRecord], domain: str,
                    stage_rows: np.ndarray, seed: int) -> ContextSet:
    members = [i for i, d in enumerate(corpus) if d.domain == domain]
    if not members:
        return model.null_context()
    rng = np.random.default_rng((seed, hash(domain) & 0xFFFF))
    take = min(model.params.j_max, len(members))
    pick = sorted(int(members[i]) for i in
                  rng.choice(len(members), size=take, replace=False))
    return context_from_rows(stage_rows[pick], model,
                             tuple(corpus[i].id for i in pick))


def evaluate_retrieval(model, corpus: list[TextRecord], queries: list[TextRecord],
                       qrels: dict[str, set[str]], strategy: InferenceStrategy,
                       retriever: SurrogateRetriever | None = None,
                       seed: int = 0) -> EvalReport:
    """Rank the full corpus per query and average NDCG@10.

    Biencoder models ignore the strategy (identical to null-null). For
    contextual models the document side is built per strategy and is fully
    precomputable; null-query strategies add no runtime over a biencoder.
    """
    if isinstance(model, BiencoderModel):
        doc_mat = model.embed_texts([d.text for d in corpus])
        query_mat = model.embed_texts([q.text for q in queries])
        return _score_and_report(doc_mat, query_mat, corpus, queries, qrels,
                                 strategy.label())
    if not isinstance(model, CdeModel):
        raise TypeError(f"unsupported model type {type(model)!r}")

    needs_topk = "topk" in (strategy.doc_context, strategy.query_context)
    if needs_topk and retriever is None:
        raise ValueError("top-k context strategies require a retriever handle")

    stage_rows = None
    if strategy.doc_context != "null" or strategy.query_context != "null":
        stage_rows = _first_stage_rows(model, corpus)

    doc_texts = [d.text for d in corpus]
    if strategy.doc_context == "null":
        doc_mat = model.embed_texts(doc_texts, model.null_context())
    elif strategy.doc_context == "full_sample":
        rng = np.random.default_rng(seed)
        take = min(model.params.j_max, len(corpus))
        pick = sorted(int(i) for i in rng.choice(len(corpus), size=take, replace=False))
        ctx = context_from_rows(stage_rows[pick], model)
        doc_mat = model.embed_texts(doc_texts, ctx)
    elif strategy.doc_context == "random_in_domain":
        doc_mat = np.zeros((len(corpus), model.cfg.embed_dim))
        for domain in sorted({d.domain for d in corpus}):
            ctx = _domain_context(model, corpus, domain, stage_rows, seed)
            members = [i for i, d in enumerate(corpus) if d.domain == domain]
            rows = model.embed_texts([corpus[i].text for i in members], ctx)
            for row, i in zip(rows, members):
                doc_mat[i] = row
    else:  # topk
        doc_mat = np.zeros((len(corpus), model.cfg.embed_dim))
        for i, d in enumerate(corpus):
            top = retriever.topk_for_text(d.text, strategy.k)
            ctx = context_from_rows(stage_rows[top], model)
            doc_mat[i] = model.embed_texts([d.text], ctx)[0]

    if strategy.query_context == "null":
        query_mat = model.embed_texts([q.text for q in queries],
                                      model.null_context(), role="query")
    elif strategy.query_context == "random_in_domain":
        query_mat = np.zeros((len(queries), model.cfg.embed_dim))
        for domain in sorted({q.domain for q in queries}):
            ctx = _domain_context(model, corpus, domain, stage_rows, seed)
            members = [i for i, q in enumerate(queries) if q.domain == domain]
            rows = model.embed_texts([queries[i].text for i in members], ctx,
                                     role="query")
            for row, i in zip(rows, members):
                query_mat[i] = row
    else:  # topk
        query_mat = np.zeros((len(queries), model.cfg.embed_dim))
        for i, q in enumerate(queries):
            top = retriever.topk_for_text(q.text, strategy.k)
            ctx = context_from_rows(stage_rows[top], model)
            query_mat[i] = model.embed_texts([q.text], ctx, role="query")[0]

    return _score_and_report(doc_mat, query_mat, corpus, queries, qrels,
                             strategy.label())


def batch_hardness(batch_indices, phi_hat: np.ndarray, psi_hat: np.ndarray) -> float:
    """Mean off-diagonal surrogate score within a batch."""
    idx = np.asarray(batch_indices, dtype=np.intp)
    if idx.size < 2:
        raise ValueError("batch must have at least 2 pairs")
    s = psi_hat[idx].astype(np.float64) @ phi_hat[idx].astype(np.float64).T
    return float((s.sum() - np.trace(s)) / (idx.size * (idx.size - 1)))


def idf_divergence(vocab_a: Vocab, vocab_b: Vocab, measure: str = "cosine") -> float:
    """Distance between IDF statistics over the union vocabulary.

    Cosine distance by default (symmetric, bounded); mean absolute
    difference behind measure="l1". Unseen terms take the unseen-IDF value.
    """
    if len(vocab_a) == 0 or len(vocab_b) == 0:
        raise ValueError("empty vocabulary")
    union = sorted(set(vocab_a.term_ids) | set(vocab_b.term_ids))
    va = np.asarray([idf(vocab_a, t) for t in union], dtype=np.float64)
    vb = np.asarray([idf(vocab_b, t) for t in union], dtype=np.float64)
    if measure == "cosine":
        denom = float(np.linalg.norm(va) * np.linalg.norm(vb))
        if denom == 0.0:
            raise ValueError("degenerate IDF vectors")
        return float(1.0 - float(np.dot(va, vb)) / denom)
    if measure == "l1":
        return float(np.abs(va - vb).mean())
    raise ValueError(f"unknown measure {measure!r}")


def context_size_sweep(model: CdeModel, corpus: list[TextRecord],
                       queries: list[TextRecord], qrels: dict[str, set[str]],
                       sizes: list[int], seed: int = 0) -> list[tuple[int, float]]:
    """Evaluate with the first J docs of a fixed sample as context, per size.

    Size 0 equals the null-null evaluation exactly; unused slots hold the
    null token. The sample permutation is fixed by the seed, so sizes nest.
    """
    stage_rows = _first_stage_rows(model, corpus)
    rng = np.random.default_rng(seed)
    perm = [int(i) for i in rng.permutation(len(corpus))]
    curve = []
    for size in sizes:
        if size > model.params.j_max:
            raise ValueError(f"size {size} exceeds capacity {model.params.j_max}")
        if size == 0:
            ctx = model.null_context()
        else:
            pick = sorted(perm[:size])
            ctx = context_from_rows(stage_rows[pick], model)
        doc_mat = model.embed_texts([d.text for d in corpus], ctx)
        query_mat = model.embed_texts([q.text for q in queries], ctx, role="query")
        report = _score_and_report(doc_mat, query_mat, corpus, queries, qrels,
                                   f"ctx{size}")
        curve.append((size, report.mean_ndcg10))
    return curve


def write_sweep_csv(curve: list[tuple[int, float]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        f.write("context_size,mean_ndcg10\n")
        for size, value in curve:
            f.write(f"{size},{value:.6f}\n")


def cross_domain_context_matrix(model: CdeModel, dataset: PairDataset,
                                corpus: list[TextRecord],
                                queries: list[TextRecord],
                                qrels: dict[str, set[str]],
                                seed: int = 0,
                                highlight_margin: float = 0.01
                                ) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Mean NDCG@10 per (context-domain row, eval-domain column).

    Cell (i, j) evaluates domain j's queries over domain j's corpus slice
    with random context drawn from domain i. The highlight mask marks cells
    within one NDCG point (0.01) of their column max.
    """
    domains = sorted({d.domain for d in corpus})
    if not domains:
        raise ValueError("no domains to evaluate")
    stage_rows = _first_stage_rows(model, corpus)
    matrix = np.zeros((len(domains), len(domains)))
    for j, eval_dom in enumerate(domains):
        dom_docs = [d for d in corpus if d.domain == eval_dom]
        dom_queries = [q for q in queries if q.domain == eval_dom]
        for i, ctx_dom in enumerate(domains):
            ctx = _domain_context(model, corpus, ctx_dom, stage_rows, seed)
            doc_mat = model.embed_texts([d.text for d in dom_docs], ctx)
            query_mat = model.embed_texts([q.text for q in dom_queries], ctx,
                                          role="query")
            report = _score_and_report(doc_mat, query_mat, dom_docs, dom_queries,
                                       qrels, f"{ctx_dom}->{eval_dom}")
            matrix[i, j] = report.mean_ndcg10
    col_max = matrix.max(axis=0, keepdims=True)
    highlight = matrix >= (col_max - highlight_margin)
    return domains, matrix, highlight


def write_matrix_csv(domains: list[str], matrix: np.ndarray,
                     highlight: np.ndarray, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        f.write("context_domain," + ",".join(domains) + "\n")
        for i, dom in enumerate(domains):
            f.write(dom + "," + ",".join(f"{v:.6f}" for v in matrix[i]) + "\n")
        f.write("highlight," + ",".join("" for _ in domains) + "\n")
        for i, dom in enumerate(domains):
            f.write(dom + "," + ",".join(str(int(v)) for v in highlight[i]) + "\n")


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two equally sized samples of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = float(np.sqrt((xc * xc).sum() * (yc * yc).sum()))
    if denom == 0.0:
        return 0.0
    return float((xc * yc).sum() / denom)
