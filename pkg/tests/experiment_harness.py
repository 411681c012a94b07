"""Shared paired-seed experiments behind the directional acceptance checks.

Two experiment families, each with its own corpus profile:

- ``run_batching_seed``: biencoder trained on clustered-and-packed batches
  vs the same biencoder trained on uniformly random batches (equal batch
  size and step count), scored by within-domain NDCG@10 on held-out
  queries (the per-dataset protocol). The corpus favors fine-grained
  discrimination: moderate vocabulary sharing, dense domains.

- ``run_context_seed``: biencoder and contextual encoder trained
  identically on clustered batches, scored by union NDCG@10 over the full
  multi-domain corpus (the domain-adaptation protocol) under three context
  policies: matched in-domain sample, mixed out-of-domain sample
  (cross-domain context), and all-null. The corpus leans on shared
  vocabulary whose meaning is domain-dependent, so corpus context carries
  real signal.

Training hyperparameters here are deliberately toy-tuned (higher learning
rate, softer temperature, scaled-down warmup); the library defaults stay
at the production-scale values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ctxembed.cluster import ClusterConfig, cluster_pairs
from ctxembed.data import (PairDataset, build_vocab, generate_synthetic_corpus,
                           make_dataset)
from ctxembed.encoders import (BiencoderModel, CdeModel, EncoderConfig,
                               context_token_ids, init_biencoder, init_cde,
                               m1_context_row)
from ctxembed.evaluation import (RankedList, context_from_rows, ndcg_at_k,
                                 qrels_from_dataset, rank_documents)
from ctxembed.filtering import FilterConfig
from ctxembed.packing import PackingConfig, pack_batches, random_plan
from ctxembed.surrogate import SurrogateConfig, embed_records
from ctxembed.training import (TokenizedPairs, TrainConfig, train_biencoder,
                               train_cde)

ENC = EncoderConfig(table_size=1024, embed_dim=64, max_text_tokens=24,
                    j_max=16, context_doc_tokens=24, dtype="f32", seed=0)
FILTER = FilterConfig(epsilon=0.0, enabled=True, collision_mode="exact_text")
SURROGATE = SurrogateConfig(hash_dim=64)
BATCH_SIZE = 48
K_PER_DOMAIN = 3
CTX_SIZE = 16

BATCHING_CORPUS = dict(n_domains=4, pairs_per_domain=128, vocab_per_domain=48,
                       noise=0.25, doc_len=10, query_subsample=0.4,
                       shared_fraction=0.25, stopwords_per_domain=12,
                       fillers_per_doc=10, shared_vocab_size=48)
BATCHING_TRAIN_PER_DOMAIN = 96
BATCHING_TRAIN = TrainConfig(temperature=0.05, lr_peak=0.02, warmup_steps=1000,
                             epochs=16, seq_dropout_p=0.3, context_k=CTX_SIZE,
                             seed=0)

CONTEXT_CORPUS = dict(n_domains=4, pairs_per_domain=112, vocab_per_domain=48,
                      noise=0.25, doc_len=10, query_subsample=0.4,
                      shared_fraction=0.4, stopwords_per_domain=12,
                      fillers_per_doc=10, shared_vocab_size=48)
CONTEXT_TRAIN_PER_DOMAIN = 80
CONTEXT_TRAIN = TrainConfig(temperature=0.05, lr_peak=0.016, warmup_steps=1000,
                            epochs=24, seq_dropout_p=0.3, context_k=CTX_SIZE,
                            seed=0)


def split_train_eval(ds: PairDataset, train_per_domain: int):
    train, held = [], []
    for dom in sorted(ds.domains):
        dom_pairs = [p for p in ds.pairs if p[0].domain == dom]
        train += dom_pairs[:train_per_domain]
        held += dom_pairs[train_per_domain:]
    return make_dataset(train), make_dataset(held)


def mean_ndcg_union(doc_mat, query_mat, corpus, queries, qrels) -> float:
    """Every query ranks the full multi-domain corpus."""
    ids = [d.id for d in corpus]
    scores = query_mat.astype(np.float64) @ doc_mat.astype(np.float64).T
    vals = []
    for qi, q in enumerate(queries):
        rel = qrels.get(q.id, set())
        if not rel:
            continue
        ranked_ids, ss = rank_documents(scores[qi], ids)
        vals.append(ndcg_at_k(RankedList(q.id, ranked_ids, ss, {d: 1 for d in rel})))
    return float(np.mean(vals))


def mean_ndcg_within(doc_mat, query_mat, corpus, queries, qrels) -> float:
    """Every query ranks only its own domain's corpus slice (per-dataset)."""
    vals = []
    for qi, q in enumerate(queries):
        rel = qrels.get(q.id, set())
        if not rel:
            continue
        idx = [i for i, d in enumerate(corpus) if d.domain == q.domain]
        ids = [corpus[i].id for i in idx]
        scores = query_mat[qi].astype(np.float64) @ doc_mat[idx].astype(np.float64).T
        ranked_ids, ss = rank_documents(scores, ids)
        vals.append(ndcg_at_k(RankedList(q.id, ranked_ids, ss, {d: 1 for d in rel})))
    return float(np.mean(vals))


def _prepare(seed: int, corpus_kw: dict, train_per_domain: int):
    full = generate_synthetic_corpus(seed=seed, **corpus_kw)
    train_ds, held_ds = split_train_eval(full, train_per_domain)
    corpus = full.documents()
    queries = held_ds.queries()
    qrels = qrels_from_dataset(held_ds, corpus)
    vocab = build_vocab([r.text for q, d in train_ds.pairs for r in (q, d)])
    phi = embed_records(train_ds.documents(), vocab, SURROGATE).rows
    psi = embed_records(train_ds.queries(), vocab, SURROGATE).rows
    return full, train_ds, corpus, queries, qrels, phi, psi


def clustered_plans(train_ds, phi, psi, seed, epochs):
    assignment = cluster_pairs(
        phi, psi,
        ClusterConfig(k=K_PER_DOMAIN, max_iters=50, restarts=2, seed=seed),
        domains=train_ds.domain_labels())
    pack_cfg = PackingConfig(batch_size=BATCH_SIZE, seed=seed)
    plans = [pack_batches(assignment, replace(pack_cfg, seed=seed + ep))
             for ep in range(epochs)]
    return assignment, plans


def random_plans(n_pairs, seed, epochs):
    return [random_plan(n_pairs, BATCH_SIZE, seed=seed * 1009 + ep)
            for ep in range(epochs)]


@dataclass
class BatchingOutcome:
    clustered_ndcg: float
    random_ndcg: float


def run_batching_seed(seed: int) -> BatchingOutcome:
    """Criterion: clustered-and-packed batches beat random batches."""
    _, train_ds, corpus, queries, qrels, phi, psi = _prepare(
        seed, BATCHING_CORPUS, BATCHING_TRAIN_PER_DOMAIN)
    tcfg = replace(BATCHING_TRAIN, seed=seed)
    enc = replace(ENC, seed=seed)
    tok = TokenizedPairs.from_dataset(train_ds, enc)
    _, plans_c = clustered_plans(train_ds, phi, psi, seed, tcfg.epochs)
    plans_r = random_plans(len(train_ds), seed, tcfg.epochs)

    scores = {}
    for name, plans in (("clustered", plans_c), ("random", plans_r)):
        params = init_biencoder(enc)
        train_biencoder(train_ds, tok, params, None, None, tcfg, phi, psi,
                        FILTER, plans=plans)
        model = BiencoderModel(params=params, cfg=enc)
        d = model.embed_texts([x.text for x in corpus])
        q = model.embed_texts([x.text for x in queries])
        scores[name] = mean_ndcg_within(d, q, corpus, queries, qrels)
    return BatchingOutcome(clustered_ndcg=scores["clustered"],
                           random_ndcg=scores["random"])


@dataclass
class ContextOutcome:
    biencoder_union: float
    cde_in_domain: float
    cde_cross_domain: float
    cde_null: float


def first_stage_rows(model: CdeModel, corpus) -> np.ndarray:
    rows = [m1_context_row(context_token_ids(d.text, model.cfg),
                           model.params.m1).data.reshape(-1)
            for d in corpus]
    return np.stack(rows)


def domain_context_maps(model: CdeModel, corpus, seed):
    """One in-domain and one mixed out-of-domain context sample per domain."""
    stage = first_stage_rows(model, corpus)
    rng = np.random.default_rng(seed)
    domains = sorted({d.domain for d in corpus})
    ctx_in, ctx_cross = {}, {}
    for dom in domains:
        own = [i for i, d in enumerate(corpus) if d.domain == dom]
        pick = sorted(int(own[i]) for i in
                      rng.choice(len(own), size=min(CTX_SIZE, len(own)), replace=False))
        ctx_in[dom] = context_from_rows(stage[pick], model)
        other = [i for i, d in enumerate(corpus) if d.domain != dom]
        pickf = sorted(int(other[i]) for i in
                       rng.choice(len(other), size=min(CTX_SIZE, len(other)),
                                  replace=False))
        ctx_cross[dom] = context_from_rows(stage[pickf], model)
    return ctx_in, ctx_cross


def embed_with_domain_contexts(model: CdeModel, corpus, queries, ctx_map=None):
    e = model.cfg.embed_dim
    doc_mat = np.zeros((len(corpus), e))
    query_mat = np.zeros((len(queries), e))
    for dom in sorted({d.domain for d in corpus}):
        ctx = model.null_context() if ctx_map is None else ctx_map[dom]
        di = [i for i, d in enumerate(corpus) if d.domain == dom]
        rows = model.embed_texts([corpus[i].text for i in di], ctx)
        for r, i in zip(rows, di):
            doc_mat[i] = r
        qi = [i for i, q in enumerate(queries) if q.domain == dom]
        rows = model.embed_texts([queries[i].text for i in qi], ctx, role="query")
        for r, i in zip(rows, qi):
            query_mat[i] = r
    return doc_mat, query_mat


def run_context_seed(seed: int) -> ContextOutcome:
    """Criteria: contextual encoder vs biencoder, and context policies."""
    _, train_ds, corpus, queries, qrels, phi, psi = _prepare(
        seed, CONTEXT_CORPUS, CONTEXT_TRAIN_PER_DOMAIN)
    tcfg = replace(CONTEXT_TRAIN, seed=seed)
    enc = replace(ENC, seed=seed)
    tok = TokenizedPairs.from_dataset(train_ds, enc)
    _, plans = clustered_plans(train_ds, phi, psi, seed, tcfg.epochs)

    bi = init_biencoder(enc)
    train_biencoder(train_ds, tok, bi, None, None, tcfg, phi, psi, FILTER,
                    plans=plans)
    bi_model = BiencoderModel(params=bi, cfg=enc)
    d = bi_model.embed_texts([x.text for x in corpus])
    q = bi_model.embed_texts([x.text for x in queries])
    bi_union = mean_ndcg_union(d, q, corpus, queries, qrels)

    cde = init_cde(enc)
    train_cde(train_ds, tok, cde, None, None, tcfg, phi, psi, FILTER,
              plans=plans)
    model = CdeModel(params=cde, cfg=enc)
    ctx_in, ctx_cross = domain_context_maps(model, corpus, seed)
    d_in, q_in = embed_with_domain_contexts(model, corpus, queries, ctx_in)
    d_x, q_x = embed_with_domain_contexts(model, corpus, queries, ctx_cross)
    d_0, q_0 = embed_with_domain_contexts(model, corpus, queries, None)
    return ContextOutcome(
        biencoder_union=bi_union,
        cde_in_domain=mean_ndcg_union(d_in, q_in, corpus, queries, qrels),
        cde_cross_domain=mean_ndcg_union(d_x, q_x, corpus, queries, qrels),
        cde_null=mean_ndcg_union(d_0, q_0, corpus, queries, qrels))
