"""Turn variable-size clusters into fixed-size, domain-pure training batches.

Oversized clusters are randomly permuted and chunked; undersized remainder
fragments are merged with the nearest-centroid fragment of the same domain
until full, truncating any overflow back into the pool. A terminal fragment
smaller than half the batch size is dropped (and reported); one at least
half-full survives as the single allowed undersized batch of its domain.

Pure function of (assignment, config); single-threaded; re-packing with a
fresh seed yields a new plan over the same clusters, which is how
multi-epoch reshuffling is implemented.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import ClusterAssignment


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class PackingConfig:
    batch_size: int
    strategy: str = "random"  # random | tsp
    seed: int = 0
    allow_cross_domain: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise PackingError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.strategy not in ("random", "tsp"):
            raise PackingError(f"unknown strategy {self.strategy!r}")


@dataclass(frozen=True)
class Batch:
    pair_indices: tuple[int, ...]
    source_clusters: frozenset[int]
    domain: str


@dataclass
class BatchPlan:
    batches: list[Batch]
    dropped: list[int]
    batch_size: int
    seed: int

    def covered(self) -> set[int]:
        out: set[int] = set()
        for b in self.batches:
            out.update(b.pair_indices)
        return out

    def size_multiset(self) -> tuple[int, ...]:
        return tuple(sorted(len(b.pair_indices) for b in self.batches))


@dataclass
class _Fragment:
    indices: list[int]
    domain: str
    centroid: np.ndarray
    clusters: set[int]
    uid: int


def split_oversized(pair_indices, batch_size: int, seed: int) -> list[list[int]]:
    """Randomly permute then chunk; at most one remainder chunk.

    An exact-fit cluster passes through unpermuted.
    """
    if batch_size < 2:
        raise PackingError("batch_size must be >= 2")
    indices = [int(i) for i in pair_indices]
    if len(indices) == batch_size:
        return [indices]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(indices))
    shuffled = [indices[int(i)] for i in perm]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def merge_undersized(fragments: list[_Fragment], cfg: PackingConfig
                     ) -> tuple[list[Batch], list[int]]:
    """Greedy nearest-centroid merging of remainder fragments.

    Returns (batches, dropped_indices). Fragments must all share a domain
    unless cfg.allow_cross_domain.
    """
    pool = sorted(fragments, key=lambda f: f.uid)
    next_uid = max((f.uid for f in pool), default=0) + 1
    batches: list[Batch] = []
    dropped: list[int] = []

    def nearest(frag: _Fragment, others: list[_Fragment]) -> _Fragment:
        best = None
        best_key = None
        for o in others:
            d = float(np.linalg.norm(frag.centroid.astype(np.float64)
                                     - o.centroid.astype(np.float64)))
            key = (d, o.uid)
            if best_key is None or key < best_key:
                best, best_key = o, key
        return best

    while len(pool) >= 2:
        frag = pool.pop(0)
        mates = [o for o in pool
                 if cfg.allow_cross_domain or o.domain == frag.domain]
        if not mates:
            # nothing compatible: this fragment is terminal for its domain
            if len(frag.indices) * 2 >= cfg.batch_size:
                batches.append(Batch(tuple(frag.indices),
                                     frozenset(frag.clusters), frag.domain))
            else:
                dropped.extend(frag.indices)
            continue
        mate = nearest(frag, mates)
        pool.remove(mate)
        total = len(frag.indices) + len(mate.indices)
        weight = np.float64(len(frag.indices)) / total
        merged = _Fragment(
            indices=frag.indices + mate.indices,
            domain=frag.domain if frag.domain == mate.domain else "*mixed*",
            centroid=(frag.centroid.astype(np.float64) * weight
                      + mate.centroid.astype(np.float64) * (1.0 - weight)).astype(np.float32),
            clusters=frag.clusters | mate.clusters,
            uid=next_uid,
        )
        next_uid += 1
        if len(merged.indices) >= cfg.batch_size:
            batches.append(Batch(tuple(merged.indices[:cfg.batch_size]),
                                 frozenset(merged.clusters), merged.domain))
            overflow = merged.indices[cfg.batch_size:]
            if overflow:
                pool.append(_Fragment(indices=overflow, domain=merged.domain,
                                      centroid=merged.centroid,
                                      clusters=set(merged.clusters), uid=next_uid))
                next_uid += 1
        else:
            pool.insert(0, merged)

    for frag in pool:
        if len(frag.indices) * 2 >= cfg.batch_size:
            batches.append(Batch(tuple(frag.indices),
                                 frozenset(frag.clusters), frag.domain))
        else:
            dropped.extend(frag.indices)
    return batches, dropped


def order_clusters_greedy_tsp(centroids: dict[int, np.ndarray], seed: int) -> list[int]:
    """Nearest-neighbour walk over cluster centroids; ties go to lower id."""
    ids = sorted(centroids)
    if not ids:
        raise PackingError("need at least one centroid")
    rng = np.random.default_rng(seed)
    current = ids[int(rng.integers(len(ids)))]
    order = [current]
    remaining = set(ids) - {current}
    while remaining:
        cur_c = centroids[current].astype(np.float64)
        best = min(remaining,
                   key=lambda cid: (float(np.linalg.norm(cur_c - centroids[cid].astype(np.float64))), cid))
        order.append(best)
        remaining.remove(best)
        current = best
    return order


def walk_length(centroids: dict[int, np.ndarray], order: list[int]) -> float:
    total = 0.0
    for a, b in zip(order, order[1:]):
        total += float(np.linalg.norm(centroids[a].astype(np.float64)
                                      - centroids[b].astype(np.float64)))
    return total


def pack_batches(assignment: ClusterAssignment, cfg: PackingConfig) -> BatchPlan:
    """Order clusters, split oversized ones, merge remainders into batches.

    Every surviving pair appears in exactly one batch; a new seed reshuffles
    the plan over the same clusters.
    """
    if assignment.domains is None:
        domains = ["*all*"] * assignment.assignment.shape[0]
    else:
        domains = list(assignment.domains)
    n = assignment.assignment.shape[0]

    by_domain: dict[str, int] = {}
    for d in domains:
        by_domain[d] = by_domain.get(d, 0) + 1
    largest_domain, largest = max(by_domain.items(), key=lambda kv: kv[1])
    if cfg.batch_size > largest:
        raise PackingError(
            f"batch_size {cfg.batch_size} exceeds largest domain "
            f"{largest_domain!r} population {largest}")

    cluster_domain: dict[int, str] = {}
    cluster_members: dict[int, np.ndarray] = {}
    cluster_centroid: dict[int, np.ndarray] = {}
    for b in range(assignment.k):
        members = assignment.members(b)
        if not members.size:
            continue
        cluster_members[b] = members
        cluster_domain[b] = domains[int(members[0])]
        cluster_centroid[b] = assignment.centroids[b].c

    rng = np.random.default_rng(cfg.seed)
    batches: list[Batch] = []
    dropped: list[int] = []
    domain_labels = sorted(set(cluster_domain.values()))
    cross_pool: list[_Fragment] = []
    uid = 0
    for dom in domain_labels:
        cluster_ids = sorted(cid for cid, d in cluster_domain.items() if d == dom)
        if cfg.strategy == "tsp":
            ordered = order_clusters_greedy_tsp(
                {cid: cluster_centroid[cid] for cid in cluster_ids},
                seed=int(rng.integers(2 ** 31)))
        else:
            perm = rng.permutation(len(cluster_ids))
            ordered = [cluster_ids[int(i)] for i in perm]

        pool: list[_Fragment] = []
        for cid in ordered:
            chunks = split_oversized(cluster_members[cid], cfg.batch_size,
                                     seed=int(rng.integers(2 ** 31)))
            for chunk in chunks:
                if len(chunk) == cfg.batch_size:
                    batches.append(Batch(tuple(chunk), frozenset({cid}), dom))
                else:
                    pool.append(_Fragment(indices=chunk, domain=dom,
                                          centroid=cluster_centroid[cid],
                                          clusters={cid}, uid=uid))
                    uid += 1
        if cfg.allow_cross_domain:
            cross_pool.extend(pool)
        else:
            merged, dropped_dom = merge_undersized(pool, cfg)
            batches.extend(merged)
            dropped.extend(dropped_dom)

    if cfg.allow_cross_domain and cross_pool:
        merged, dropped_all = merge_undersized(cross_pool, cfg)
        batches.extend(merged)
        dropped.extend(dropped_all)

    plan = BatchPlan(batches=batches, dropped=sorted(dropped),
                     batch_size=cfg.batch_size, seed=cfg.seed)
    covered = plan.covered()
    if len(covered) + len(plan.dropped) != n or covered & set(plan.dropped):
        raise RuntimeError("packing lost or duplicated pair indices")
    return plan


def random_plan(n_pairs: int, batch_size: int, seed: int) -> BatchPlan:
    """Uniformly random batches of equal size (the non-adversarial baseline).

    Batches may mix domains. A remainder smaller than the batch size is
    dropped so all batches stay comparable.
    """
    if batch_size < 2:
        raise PackingError("batch_size must be >= 2")
    if batch_size > n_pairs:
        raise PackingError(f"batch_size {batch_size} exceeds {n_pairs} pairs")
    rng = np.random.default_rng(seed)
    perm = [int(i) for i in rng.permutation(n_pairs)]
    batches = []
    for i in range(0, n_pairs - batch_size + 1, batch_size):
        chunk = perm[i:i + batch_size]
        batches.append(Batch(tuple(chunk), frozenset(), "*random*"))
    dropped = perm[len(batches) * batch_size:]
    return BatchPlan(batches=batches, dropped=sorted(dropped),
                     batch_size=batch_size, seed=seed)


def write_plan_jsonl(plan: BatchPlan, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for i, b in enumerate(plan.batches):
            f.write(json.dumps({
                "batch_id": i,
                "pair_indices": list(b.pair_indices),
                "domain": b.domain,
            }) + "\n")


def write_drop_report(plan: BatchPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps({
        "dropped": len(plan.dropped),
        "indices": plan.dropped,
    }, indent=2) + "\n", encoding="utf-8")


def read_plan_jsonl(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
