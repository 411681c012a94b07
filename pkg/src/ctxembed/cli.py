"""Operator surface: subcommands over the pipeline with run manifests.

Every run writes a manifest JSON (effective config, seeds, input hashes,
tool version) next to its outputs, and any subcommand can be re-run from
its manifest alone by passing the manifest as ``--config``. Config files
are flat key=value text; CLI ``--set key=value`` flags override file
values; unknown keys are rejected.

Exit codes: 0 success, 2 missing input, 3 config error, 4 numerical
failure. Errors print one machine-parsable line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import (ClusterAssignment, ClusterConfig, Centroid, cluster_pairs,
                      read_cluster_file, write_cluster_file)
from .data import (PairDataset, build_vocab, generate_synthetic_corpus,
                   load_pairs_jsonl, read_embedding_cache, sha256_file,
                   write_embedding_cache, write_pairs_jsonl)
from .encoders import (BiencoderModel, CdeModel, EncoderConfig, init_biencoder,
                       init_cde, load_biencoder, load_cde, save_biencoder,
                       save_cde)
from .evaluation import (InferenceStrategy, SurrogateRetriever,
                         context_size_sweep, cross_domain_context_matrix,
                         evaluate_retrieval, idf_divergence, pearson,
                         qrels_from_dataset, write_matrix_csv, write_sweep_csv)
from .filtering import FilterConfig, mask_stats
from .packing import (BatchPlan, Batch, PackingConfig, pack_batches,
                      read_plan_jsonl, write_drop_report, write_plan_jsonl)
from .surrogate import SurrogateConfig, embed_records
from .training import (TokenizedPairs, TrainConfig, batch_mask, train_biencoder,
                       train_cde, write_train_log)

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


KNOWN_KEYS = {
    "data.seed": "7", "data.domains": "4", "data.pairs_per_domain": "256",
    "data.vocab_per_domain": "64", "data.noise": "0.1",
    "data.doc_len": "12", "data.query_subsample": "0.5",
    "data.shared_fraction": "0.25", "data.shared_vocab_size": "64",
    "data.stopwords_per_domain": "8", "data.fillers_per_doc": "4",
    "embed.hash_dim": "256", "embed.normalize": "true",
    "cluster.k": "8", "cluster.max_iters": "100", "cluster.restarts": "3",
    "cluster.seed": "0", "cluster.per_domain": "true", "cluster.tol": "1e-4",
    "pack.batch_size": "32", "pack.strategy": "random", "pack.seed": "0",
    "pack.allow_cross_domain": "false",
    "filter.epsilon": "0.0", "filter.enabled": "true",
    "filter.collision_mode": "exact_text",
    "train.temperature": "0.02", "train.lr_peak": "2e-5",
    "train.warmup_steps": "1000", "train.epochs": "1",
    "train.seq_dropout_p": "0.2", "train.context_k": "256",
    "train.gradcache": "false", "train.seed": "0", "train.symmetric": "false",
    "model.table_size": "4096", "model.embed_dim": "64",
    "model.max_text_tokens": "64", "model.j_max": "64",
    "model.context_doc_tokens": "32", "model.blocks": "1", "model.seed": "0",
    "eval.doc_context": "null", "eval.query_context": "null", "eval.k": "8",
    "eval.seed": "0", "eval.sizes": "0,4,16,64",
}


class RunConfig:
    """Flat key=value config with defaults; unknown keys are rejected."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = dict(KNOWN_KEYS)
        for k, v in (values or {}).items():
            if k not in KNOWN_KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = str(v)

    def set(self, key: str, value: str) -> None:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = str(value)

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as e:
            raise ConfigError(f"{key}: expected integer, got {self.values[key]!r}") from e

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as e:
            raise ConfigError(f"{key}: expected float, got {self.values[key]!r}") from e

    def get_bool(self, key: str) -> bool:
        v = self.values[key].strip().lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {self.values[key]!r}")

    def get_str(self, key: str) -> str:
        return self.values[key]


def load_config_file(path: str | Path) -> dict[str, str]:
    """Read key=value text or pull the config echo out of a manifest JSON."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(str(path))
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        manifest = json.loads(text)
        if "config" not in manifest:
            raise ConfigError(f"{path}: JSON config must be a run manifest")
        return {str(k): str(v) for k, v in manifest["config"].items()}
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def write_manifest(out_dir: Path, command: str, cfg: RunConfig,
                   inputs: dict[str, Path], outputs: list[str],
                   seed: int | None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": dict(sorted(cfg.values.items())),
        "inputs": {str(p): sha256_file(p) for p in sorted(inputs.values(), key=str)
                   if Path(p).exists()},
        "outputs": sorted(outputs),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = out_dir / f"{command.replace(' ', '_')}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what}: {p}")
    return p


def _load_dataset(path: str | Path) -> PairDataset:
    return load_pairs_jsonl(_require(path, "pairs file"))


def _surrogate_cfg(cfg: RunConfig) -> SurrogateConfig:
    return SurrogateConfig(hash_dim=cfg.get_int("embed.hash_dim"),
                           normalize=cfg.get_bool("embed.normalize"))


def _embed_dataset(dataset: PairDataset, cfg: RunConfig):
    vocab = build_vocab([r.text for q, d in dataset.pairs for r in (q, d)])
    scfg = _surrogate_cfg(cfg)
    phi = embed_records(dataset.documents(), vocab, scfg)
    psi = embed_records(dataset.queries(), vocab, scfg)
    return vocab, scfg, phi, psi


def _encoder_cfg(cfg: RunConfig, dtype: str = "f32") -> EncoderConfig:
    return EncoderConfig(
        table_size=cfg.get_int("model.table_size"),
        embed_dim=cfg.get_int("model.embed_dim"),
        max_text_tokens=cfg.get_int("model.max_text_tokens"),
        j_max=cfg.get_int("model.j_max"),
        context_doc_tokens=cfg.get_int("model.context_doc_tokens"),
        blocks=cfg.get_int("model.blocks"),
        seed=cfg.get_int("model.seed"),
        dtype=dtype,
    )


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        temperature=cfg.get_float("train.temperature"),
        lr_peak=cfg.get_float("train.lr_peak"),
        warmup_steps=cfg.get_int("train.warmup_steps"),
        epochs=cfg.get_int("train.epochs"),
        seq_dropout_p=cfg.get_float("train.seq_dropout_p"),
        context_k=cfg.get_int("train.context_k"),
        gradcache=cfg.get_bool("train.gradcache"),
        seed=cfg.get_int("train.seed"),
        symmetric=cfg.get_bool("train.symmetric"),
    )


def _filter_cfg(cfg: RunConfig) -> FilterConfig:
    return FilterConfig(epsilon=cfg.get_float("filter.epsilon"),
                        enabled=cfg.get_bool("filter.enabled"),
                        collision_mode=cfg.get_str("filter.collision_mode"))


def _assignment_from_files(dataset: PairDataset, clusters_path: Path,
                           phi_rows: np.ndarray, psi_rows: np.ndarray
                           ) -> ClusterAssignment:
    """Rebuild a ClusterAssignment from the cluster file plus embeddings.

    Centroids are recomputed as the mean of member u/v views, which is the
    same update rule the solver uses.
    """
    records = read_cluster_file(clusters_path)
    n = len(dataset)
    assignment = np.full(n, -1, dtype=np.int64)
    u = np.hstack([phi_rows, psi_rows]).astype(np.float64)
    v = np.hstack([psi_rows, phi_rows]).astype(np.float64)
    centroids: list[Centroid] = []
    for rec in sorted(records, key=lambda r: r["cluster"]):
        members = np.asarray(rec["pairs"], dtype=np.intp)
        assignment[members] = rec["cluster"]
        if members.size:
            c = (u[members].sum(axis=0) + v[members].sum(axis=0)) / (2.0 * members.size)
        else:
            c = np.zeros(u.shape[1])
        centroids.append(Centroid(c=c.astype(np.float32), member_count=int(members.size)))
    if np.any(assignment < 0):
        raise ConfigError("cluster file does not cover every pair")
    return ClusterAssignment(assignment=assignment, k=len(centroids), objective=0.0,
                             centroids=centroids, domains=dataset.domain_labels())


def _plan_from_file(plan_path: Path, dataset: PairDataset) -> BatchPlan:
    rows = read_plan_jsonl(plan_path)
    batches = [Batch(tuple(r["pair_indices"]), frozenset(), r["domain"])
               for r in rows]
    covered = {i for b in batches for i in b.pair_indices}
    dropped = sorted(set(range(len(dataset))) - covered)
    size = max((len(b.pair_indices) for b in batches), default=0)
    return BatchPlan(batches=batches, dropped=dropped, batch_size=size, seed=0)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate_synthetic_corpus(
        seed=cfg.get_int("data.seed"),
        n_domains=cfg.get_int("data.domains"),
        pairs_per_domain=cfg.get_int("data.pairs_per_domain"),
        vocab_per_domain=cfg.get_int("data.vocab_per_domain"),
        noise=cfg.get_float("data.noise"),
        doc_len=cfg.get_int("data.doc_len"),
        query_subsample=cfg.get_float("data.query_subsample"),
        shared_fraction=cfg.get_float("data.shared_fraction"),
        shared_vocab_size=cfg.get_int("data.shared_vocab_size"),
        stopwords_per_domain=cfg.get_int("data.stopwords_per_domain"),
        fillers_per_doc=cfg.get_int("data.fillers_per_doc"),
    )
    pairs_path = out_dir / "pairs.jsonl"
    write_pairs_jsonl(dataset, pairs_path)
    write_manifest(out_dir, "synth-data", cfg, {}, [pairs_path.name],
                   cfg.get_int("data.seed"))
    print(f"wrote {len(dataset)} pairs to {pairs_path}")
    return EXIT_OK


def cmd_embed(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    vocab, scfg, phi, psi = _embed_dataset(dataset, cfg)
    doc_path = out_dir / "doc_vectors.cde"
    query_path = out_dir / "query_vectors.cde"
    write_embedding_cache(phi, doc_path)
    write_embedding_cache(psi, query_path)
    vocab_path = out_dir / "vocab.json"
    vocab_path.write_text(json.dumps({
        "n_docs": vocab.n_docs,
        "df": dict(sorted(vocab.df.items())),
    }, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out_dir, "embed", cfg, {"pairs": Path(args.pairs)},
                   [doc_path.name, query_path.name, vocab_path.name], None)
    print(f"embedded {len(dataset)} pairs at hash_dim={scfg.hash_dim}")
    return EXIT_OK


def _read_vectors(vectors_dir: str | Path) -> tuple[np.ndarray, np.ndarray]:
    vdir = Path(vectors_dir)
    phi = read_embedding_cache(_require(vdir / "doc_vectors.cde", "doc vectors"))
    psi = read_embedding_cache(_require(vdir / "query_vectors.cde", "query vectors"))
    return phi.rows, psi.rows


def cmd_cluster(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    phi_rows, psi_rows = _read_vectors(args.vectors)
    ccfg = ClusterConfig(k=cfg.get_int("cluster.k"),
                         max_iters=cfg.get_int("cluster.max_iters"),
                         restarts=cfg.get_int("cluster.restarts"),
                         seed=args.seed if args.seed is not None else cfg.get_int("cluster.seed"),
                         per_domain=cfg.get_bool("cluster.per_domain"),
                         tol=cfg.get_float("cluster.tol"))
    assignment = cluster_pairs(phi_rows, psi_rows, ccfg,
                               domains=dataset.domain_labels())
    clusters_path = out_dir / "clusters.jsonl"
    write_cluster_file(assignment, clusters_path)
    write_manifest(out_dir, "cluster", cfg,
                   {"pairs": Path(args.pairs),
                    "doc_vectors": Path(args.vectors) / "doc_vectors.cde",
                    "query_vectors": Path(args.vectors) / "query_vectors.cde"},
                   [clusters_path.name], ccfg.seed)
    print(f"clustered {len(dataset)} pairs into {assignment.k} clusters "
          f"(objective {assignment.objective:.4f})")
    return EXIT_OK


def cmd_pack(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    phi_rows, psi_rows = _read_vectors(args.vectors)
    assignment = _assignment_from_files(dataset, _require(args.clusters, "cluster file"),
                                        phi_rows, psi_rows)
    pcfg = PackingConfig(batch_size=cfg.get_int("pack.batch_size"),
                         strategy=cfg.get_str("pack.strategy"),
                         seed=args.seed if args.seed is not None else cfg.get_int("pack.seed"),
                         allow_cross_domain=cfg.get_bool("pack.allow_cross_domain"))
    plan = pack_batches(assignment, pcfg)
    plan_path = out_dir / "plan.jsonl"
    drops_path = out_dir / "drops.json"
    write_plan_jsonl(plan, plan_path)
    write_drop_report(plan, drops_path)
    write_manifest(out_dir, "pack", cfg,
                   {"pairs": Path(args.pairs), "clusters": Path(args.clusters)},
                   [plan_path.name, drops_path.name], pcfg.seed)
    print(f"packed {len(plan.batches)} batches, dropped {len(plan.dropped)} pairs")
    return EXIT_OK


def cmd_filter_stats(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    phi_rows, psi_rows = _read_vectors(args.vectors)
    plan = _plan_from_file(_require(args.plan, "plan file"), dataset)
    fcfg = _filter_cfg(cfg)
    masks = [batch_mask(b.pair_indices, dataset, phi_rows, psi_rows, fcfg)
             for b in plan.batches]
    stats = mask_stats(masks)
    stats_path = out_dir / "filter_stats.json"
    stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    write_manifest(out_dir, "filter-stats", cfg,
                   {"pairs": Path(args.pairs), "plan": Path(args.plan)},
                   [stats_path.name], None)
    print(json.dumps(stats))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    phi_rows, psi_rows = _read_vectors(args.vectors)
    assignment = _assignment_from_files(dataset, _require(args.clusters, "cluster file"),
                                        phi_rows, psi_rows)
    tcfg = _train_cfg(cfg)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    pcfg = PackingConfig(batch_size=cfg.get_int("pack.batch_size"),
                         strategy=cfg.get_str("pack.strategy"),
                         seed=cfg.get_int("pack.seed"),
                         allow_cross_domain=cfg.get_bool("pack.allow_cross_domain"))
    fcfg = _filter_cfg(cfg)
    enc_cfg = _encoder_cfg(cfg)
    tok = TokenizedPairs.from_dataset(dataset, enc_cfg)

    if args.arch == "biencoder":
        params = init_biencoder(enc_cfg)
        ckpt = out_dir / "biencoder.ckpt"

        def checkpoint(epoch):
            save_biencoder(params, enc_cfg, out_dir / f"biencoder_ep{epoch:03d}.ckpt")

        result = train_biencoder(dataset, tok, params, assignment, pcfg, tcfg,
                                 phi_rows, psi_rows, fcfg, on_epoch_end=checkpoint)
        save_biencoder(params, enc_cfg, ckpt)
    else:
        params = init_cde(enc_cfg)
        ckpt = out_dir / "cde.ckpt"

        def checkpoint(epoch):
            save_cde(params, enc_cfg, out_dir / f"cde_ep{epoch:03d}.ckpt")

        result = train_cde(dataset, tok, params, assignment, pcfg, tcfg,
                           phi_rows, psi_rows, fcfg, on_epoch_end=checkpoint)
        save_cde(params, enc_cfg, ckpt)

    if any(not np.isfinite(r.loss) for r in result.log):
        raise FloatingPointError("non-finite loss during training")
    log_path = out_dir / "train_log.csv"
    write_train_log(result.log, log_path)
    write_manifest(out_dir, f"train {args.arch}", cfg,
                   {"pairs": Path(args.pairs), "clusters": Path(args.clusters)},
                   [ckpt.name, log_path.name], tcfg.seed)
    final = result.log[-1].loss if result.log else float("nan")
    print(f"trained {args.arch}: {len(result.log)} steps, final loss {final:.4f}")
    return EXIT_OK


def _load_model(args, cfg: RunConfig):
    ckpt = _require(args.checkpoint, "checkpoint")
    if args.arch == "biencoder":
        params, enc_cfg = load_biencoder(ckpt)
        return BiencoderModel(params=params, cfg=enc_cfg)
    params, enc_cfg = load_cde(ckpt)
    return CdeModel(params=params, cfg=enc_cfg)


def cmd_eval(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    corpus_dataset = _load_dataset(args.corpus_pairs) if args.corpus_pairs else dataset
    model = _load_model(args, cfg)
    corpus = corpus_dataset.documents()
    queries = dataset.queries()
    qrels = qrels_from_dataset(dataset, corpus)
    strategy = InferenceStrategy(doc_context=cfg.get_str("eval.doc_context"),
                                 query_context=cfg.get_str("eval.query_context"),
                                 k=cfg.get_int("eval.k"))
    retriever = None
    if "topk" in (strategy.doc_context, strategy.query_context):
        vocab = build_vocab([r.text for q, d in corpus_dataset.pairs for r in (q, d)])
        scfg = _surrogate_cfg(cfg)
        retriever = SurrogateRetriever(vocab=vocab, cfg=scfg,
                                       doc_matrix=embed_records(corpus, vocab, scfg).rows)
    report = evaluate_retrieval(model, corpus, queries, qrels, strategy,
                                retriever=retriever, seed=cfg.get_int("eval.seed"))
    report_path = out_dir / "eval_report.json"
    report.write(report_path)
    write_manifest(out_dir, "eval", cfg,
                   {"pairs": Path(args.pairs), "checkpoint": Path(args.checkpoint)},
                   [report_path.name], cfg.get_int("eval.seed"))
    print(f"{strategy.label()}: mean NDCG@10 {report.mean_ndcg10:.4f} "
          f"({len(report.per_query)} queries, {report.skipped} skipped)")
    return EXIT_OK


def cmd_sweep_context(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    model = _load_model(args, cfg)
    if not isinstance(model, CdeModel):
        raise ConfigError("sweep-context requires a contextual checkpoint")
    corpus = dataset.documents()
    queries = dataset.queries()
    qrels = qrels_from_dataset(dataset, corpus)
    sizes = [int(s) for s in cfg.get_str("eval.sizes").split(",") if s.strip()]
    curve = context_size_sweep(model, corpus, queries, qrels, sizes,
                               seed=cfg.get_int("eval.seed"))
    sweep_path = out_dir / "context_sweep.csv"
    write_sweep_csv(curve, sweep_path)
    write_manifest(out_dir, "sweep-context", cfg,
                   {"pairs": Path(args.pairs), "checkpoint": Path(args.checkpoint)},
                   [sweep_path.name], cfg.get_int("eval.seed"))
    for size, value in curve:
        print(f"context {size}: NDCG@10 {value:.4f}")
    return EXIT_OK


def cmd_domain_matrix(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    model = _load_model(args, cfg)
    if not isinstance(model, CdeModel):
        raise ConfigError("domain-matrix requires a contextual checkpoint")
    corpus = dataset.documents()
    queries = dataset.queries()
    qrels = qrels_from_dataset(dataset, corpus)
    domains, matrix, highlight = cross_domain_context_matrix(
        model, dataset, corpus, queries, qrels, seed=cfg.get_int("eval.seed"))
    matrix_path = out_dir / "domain_matrix.csv"
    write_matrix_csv(domains, matrix, highlight, matrix_path)
    write_manifest(out_dir, "domain-matrix", cfg,
                   {"pairs": Path(args.pairs), "checkpoint": Path(args.checkpoint)},
                   [matrix_path.name], cfg.get_int("eval.seed"))
    print(f"wrote {len(domains)}x{len(domains)} matrix to {matrix_path}")
    return EXIT_OK


def cmd_analyze_idf(args, cfg: RunConfig) -> int:
    """Per-domain IDF divergence vs NDCG gap to the lexical baseline."""
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    model = _load_model(args, cfg)
    corpus = dataset.documents()
    qrels = qrels_from_dataset(dataset, corpus)
    scfg = _surrogate_cfg(cfg)
    train_vocab = build_vocab([r.text for q, d in dataset.pairs for r in (q, d)])

    rows = []
    for domain in sorted(dataset.domains):
        dom_docs = [d for d in corpus if d.domain == domain]
        dom_queries = [q for q in dataset.queries() if q.domain == domain]
        dom_vocab = build_vocab([r.text for r in dom_docs + dom_queries])
        divergence = idf_divergence(train_vocab, dom_vocab)

        if isinstance(model, CdeModel):
            strategy = InferenceStrategy(doc_context="random_in_domain",
                                         query_context="random_in_domain")
        else:
            strategy = InferenceStrategy()
        model_report = evaluate_retrieval(model, dom_docs, dom_queries, qrels,
                                          strategy, seed=cfg.get_int("eval.seed"))
        lex_vectors = embed_records(dom_docs, train_vocab, scfg).rows
        lex_queries = embed_records(dom_queries, train_vocab, scfg).rows
        from .evaluation import _score_and_report
        lex_report = _score_and_report(lex_vectors, lex_queries, dom_docs,
                                       dom_queries, qrels, "lexical")
        rows.append({
            "domain": domain,
            "idf_divergence": divergence,
            "model_ndcg10": model_report.mean_ndcg10,
            "lexical_ndcg10": lex_report.mean_ndcg10,
            "delta_ndcg10": model_report.mean_ndcg10 - lex_report.mean_ndcg10,
        })

    scatter_path = out_dir / "idf_scatter.csv"
    with scatter_path.open("w", encoding="utf-8") as f:
        f.write("domain,idf_divergence,model_ndcg10,lexical_ndcg10,delta_ndcg10\n")
        for r in rows:
            f.write(f"{r['domain']},{r['idf_divergence']:.6f},{r['model_ndcg10']:.6f},"
                    f"{r['lexical_ndcg10']:.6f},{r['delta_ndcg10']:.6f}\n")
    corr = (pearson([r["idf_divergence"] for r in rows],
                    [r["delta_ndcg10"] for r in rows])
            if len(rows) >= 2 else 0.0)
    summary_path = out_dir / "idf_summary.json"
    summary_path.write_text(json.dumps({"pearson": corr, "domains": len(rows)},
                                       indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    write_manifest(out_dir, "analyze-idf", cfg,
                   {"pairs": Path(args.pairs), "checkpoint": Path(args.checkpoint)},
                   [scatter_path.name, summary_path.name], cfg.get_int("eval.seed"))
    print(f"pearson(divergence, delta NDCG) = {corr:.4f} over {len(rows)} domains")
    return EXIT_OK


def cmd_inspect_plan(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args.pairs)
    plan = _plan_from_file(_require(args.plan, "plan file"), dataset)
    covered = plan.covered()
    report = {
        "pairs": len(dataset),
        "batches": len(plan.batches),
        "covered": len(covered),
        "dropped": len(plan.dropped),
        "coverage_plus_drops_equals_pairs":
            len(covered) + len(plan.dropped) == len(dataset),
        "batch_sizes": sorted({len(b.pair_indices) for b in plan.batches}),
    }
    report_path = out_dir / "plan_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    write_manifest(out_dir, "inspect-plan", cfg,
                   {"pairs": Path(args.pairs), "plan": Path(args.plan)},
                   [report_path.name], None)
    print(json.dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxembed",
        description="Hard-batch contrastive training and contextual embedding pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, pairs=True, vectors=False, clusters=False, plan=False,
               checkpoint=False, arch=False):
        p.add_argument("--config", help="key=value config file or a run manifest JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS parallelism (recorded in the manifest)")
        if pairs:
            p.add_argument("--pairs", required=True, help="pairs JSONL file")
        if vectors:
            p.add_argument("--vectors", required=True,
                           help="directory with doc_vectors.cde / query_vectors.cde")
        if clusters:
            p.add_argument("--clusters", required=True, help="clusters JSONL file")
        if plan:
            p.add_argument("--plan", required=True, help="batch plan JSONL file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if arch:
            p.add_argument("--arch", choices=("biencoder", "cde"), default="cde")

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    common(p, pairs=False)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("embed", help="surrogate-embed a pairs file")
    common(p)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("cluster", help="paired K-Means over surrogate embeddings")
    common(p, vectors=True)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("pack", help="pack clusters into fixed-size batches")
    common(p, vectors=True, clusters=True)
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("filter-stats", help="mask statistics over a batch plan")
    common(p, vectors=True, plan=True)
    p.set_defaults(fn=cmd_filter_stats)

    p = sub.add_parser("train", help="contrastive training")
    common(p, vectors=True, clusters=True)
    p.add_argument("arch", choices=("biencoder", "cde"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="retrieval evaluation (NDCG@10)")
    common(p, checkpoint=True, arch=True)
    p.add_argument("--corpus-pairs", default=None,
                   help="separate corpus pairs file (defaults to --pairs)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep-context", help="NDCG vs context size curve")
    common(p, checkpoint=True, arch=True)
    p.set_defaults(fn=cmd_sweep_context)

    p = sub.add_parser("domain-matrix", help="context-domain x eval-domain NDCG matrix")
    common(p, checkpoint=True, arch=True)
    p.set_defaults(fn=cmd_domain_matrix)

    p = sub.add_parser("analyze-idf", help="IDF divergence vs NDCG gap scatter")
    common(p, checkpoint=True, arch=True)
    p.set_defaults(fn=cmd_analyze_idf)

    p = sub.add_parser("inspect-plan", help="coverage report for a batch plan")
    common(p, plan=True)
    p.set_defaults(fn=cmd_inspect_plan)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "threads", None):
            os.environ["OMP_NUM_THREADS"] = str(args.threads)
            os.environ["OPENBLAS_NUM_THREADS"] = str(args.threads)
        values = load_config_file(args.config) if args.config else {}
        cfg = RunConfig(values)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, _, value = item.partition("=")
            cfg.set(key.strip(), value.strip())
        return args.fn(args, cfg)
    except MissingInputError as e:
        print(f"error: missing-input: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ConfigError, ValueError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as e:
        print(f"error: numerical: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
