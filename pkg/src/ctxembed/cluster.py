"""Hard pseudo-domain mining via asymmetric paired K-Means.

Each (query, document) pair is represented twice, as the concatenations
u = phi(d) (+) psi(q) and v = psi(q) (+) phi(d). Both views of a pair are
assigned jointly to one cluster (sum-of-costs argmin), so every pair lands
in exactly one training batch. Centroid updates average the u and v views
of all member pairs.

Cost uses squared Euclidean distance (standard K-Means): the mean-centroid
update is exact only for squared distances, and near/far assignment
ordering is preserved. Objectives accumulate in float64 over float32
storage. The assignment step is vectorized over pairs and deterministic
given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class PairPoint:
    """One pair's two concatenated views plus its dataset index."""

    u: np.ndarray
    v: np.ndarray
    pair_index: int

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        if u.shape != v.shape or u.ndim != 1 or u.shape[0] % 2:
            raise ClusterError(f"u/v must be equal-length even vectors, got {u.shape}/{v.shape}")
        d = u.shape[0] // 2
        if not (np.array_equal(u[:d], v[d:]) and np.array_equal(u[d:], v[:d])):
            raise ClusterError("u and v must be swapped halves of each other")

    @classmethod
    def from_embeddings(cls, phi_d: np.ndarray, psi_q: np.ndarray,
                        pair_index: int) -> "PairPoint":
        phi_d = np.asarray(phi_d, dtype=np.float32)
        psi_q = np.asarray(psi_q, dtype=np.float32)
        if phi_d.shape != psi_q.shape:
            raise ClusterError(f"dimension mismatch {phi_d.shape} vs {psi_q.shape}")
        return cls(u=np.concatenate([phi_d, psi_q]),
                   v=np.concatenate([psi_q, phi_d]),
                   pair_index=pair_index)

    @property
    def phi(self) -> np.ndarray:
        return self.u[:self.u.shape[0] // 2]

    @property
    def psi(self) -> np.ndarray:
        return self.u[self.u.shape[0] // 2:]


@dataclass(frozen=True)
class Centroid:
    c: np.ndarray
    member_count: int = 0

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float32)
        object.__setattr__(self, "c", c)
        if not np.all(np.isfinite(c)):
            raise ClusterError("centroid has non-finite entries")


@dataclass(frozen=True)
class ClusterConfig:
    k: int
    max_iters: int = 100
    restarts: int = 3
    seed: int = 0
    per_domain: bool = True
    tol: float = 1e-4

    def __post_init__(self):
        if self.k < 1 or self.max_iters < 1 or self.restarts < 1:
            raise ClusterError("k, max_iters, restarts must all be >= 1")


@dataclass
class ClusterAssignment:
    """Pair index -> cluster id, with the recomputed objective.

    ``objective_trace`` holds the per-iteration objectives of the winning
    restart (Lloyd monotonicity is also asserted while iterating).
    ``domains`` echoes the per-pair domain labels so packing can stay
    domain-pure without re-reading the dataset.
    """

    assignment: np.ndarray
    k: int
    objective: float
    centroids: list[Centroid]
    domains: list[str] | None = None
    objective_trace: list[float] = field(default_factory=list)
    objective_by_cluster: np.ndarray | None = None
    degenerate_init: bool = False

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster_id)


def pair_metric(a: PairPoint, b: PairPoint) -> float:
    """Cross distance ||phi_a - psi_b|| + ||phi_b - psi_a|| (unsquared, symmetric)."""
    if a.u.shape != b.u.shape:
        raise ClusterError(f"dimension mismatch {a.u.shape} vs {b.u.shape}")
    pa, sa = a.phi.astype(np.float64), a.psi.astype(np.float64)
    pb, sb = b.phi.astype(np.float64), b.psi.astype(np.float64)
    return float(np.linalg.norm(pa - sb) + np.linalg.norm(pb - sa))


def point_to_centroid_cost(p: PairPoint, c: Centroid) -> float:
    """Squared cost ||u - c||^2 + ||v - c||^2 of assigning a pair to a centroid."""
    cv = c.c.astype(np.float64)
    if cv.shape != p.u.shape:
        raise ClusterError(f"dimension mismatch {p.u.shape} vs centroid {cv.shape}")
    du = p.u.astype(np.float64) - cv
    dv = p.v.astype(np.float64) - cv
    return float(np.dot(du, du) + np.dot(dv, dv))


def _pair_views(phi: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phi = np.asarray(phi, dtype=np.float32)
    psi = np.asarray(psi, dtype=np.float32)
    if phi.shape != psi.shape or phi.ndim != 2:
        raise ClusterError(f"phi/psi must be equal-shape matrices, got {phi.shape}/{psi.shape}")
    u = np.hstack([phi, psi])
    v = np.hstack([psi, phi])
    return u, v


def kmeans_init(points: np.ndarray, k: int, seed: int) -> tuple[list[Centroid], bool]:
    """k-means++ seeding over the stacked 2N multiset of u and v views.

    ``points`` is the 2N x D stack. Returns (centroids, degenerate) where
    degenerate flags a fallback to sampling with duplicates because fewer
    than k distinct vectors exist.
    """
    points = np.asarray(points, dtype=np.float32)
    n = points.shape[0]
    if k > n:
        raise ClusterError(f"k={k} exceeds {n} available vectors")
    rng = np.random.default_rng(seed)
    distinct = np.unique(points, axis=0)
    degenerate = distinct.shape[0] < k

    pts64 = points.astype(np.float64)
    first = int(rng.integers(n))
    chosen = [first]
    d2 = ((pts64 - pts64[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at zero distance: duplicate sampling
            chosen.append(int(rng.integers(n)))
        else:
            idx = int(rng.choice(n, p=d2 / total))
            chosen.append(idx)
            d2 = np.minimum(d2, ((pts64 - pts64[idx]) ** 2).sum(axis=1))
            continue
        d2 = np.minimum(d2, ((pts64 - pts64[chosen[-1]]) ** 2).sum(axis=1))
    cents = [Centroid(c=points[i].copy(), member_count=0) for i in chosen]
    return cents, degenerate


def _pair_costs(u64: np.ndarray, v64: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """N x k matrix of joint assignment costs ||u-c||^2 + ||v-c||^2."""
    u_sq = (u64 * u64).sum(axis=1, keepdims=True)
    v_sq = (v64 * v64).sum(axis=1, keepdims=True)
    c_sq = (centers * centers).sum(axis=1)
    cost = (u_sq - 2.0 * (u64 @ centers.T) + c_sq) \
         + (v_sq - 2.0 * (v64 @ centers.T) + c_sq)
    return np.maximum(cost, 0.0)


def _lloyd(u: np.ndarray, v: np.ndarray, k: int, cfg: ClusterConfig,
           seed: int) -> tuple[np.ndarray, np.ndarray, float, list[float], bool]:
    n = u.shape[0]
    stacked = np.vstack([u, v])
    cents, degenerate = kmeans_init(stacked, k, seed)
    centers = np.stack([c.c for c in cents]).astype(np.float64)
    u64 = u.astype(np.float64)
    v64 = v.astype(np.float64)

    assign = np.zeros(n, dtype=np.int64)
    trace: list[float] = []
    prev_obj = np.inf
    for _ in range(cfg.max_iters):
        cost = _pair_costs(u64, v64, centers)
        assign = cost.argmin(axis=1)
        obj = float(cost[np.arange(n), assign].sum())
        if obj > prev_obj * (1.0 + 1e-9) + 1e-12:
            raise RuntimeError(
                f"Lloyd objective increased: {prev_obj} -> {obj}")
        trace.append(obj)
        # update: mean over each cluster's u and v views
        for b in range(k):
            members = np.flatnonzero(assign == b)
            if members.size:
                centers[b] = (u64[members].sum(axis=0) + v64[members].sum(axis=0)) \
                             / (2.0 * members.size)
            else:
                per_pair = cost[np.arange(n), assign]
                worst = int(per_pair.argmax())
                # reseed to the worst pair's farther view
                du = float(((u64[worst] - centers[assign[worst]]) ** 2).sum())
                dv = float(((v64[worst] - centers[assign[worst]]) ** 2).sum())
                centers[b] = u64[worst] if du >= dv else v64[worst]
        if prev_obj < np.inf and obj >= prev_obj * (1.0 - cfg.tol):
            prev_obj = obj
            break
        prev_obj = obj

    # final assignment against the updated centers
    cost = _pair_costs(u64, v64, centers)
    assign = cost.argmin(axis=1)
    obj = float(cost[np.arange(n), assign].sum())
    if trace and obj > trace[-1] * (1.0 + 1e-9) + 1e-12:
        raise RuntimeError(f"Lloyd objective increased at finalize: {trace[-1]} -> {obj}")
    trace.append(obj)
    return assign, centers, obj, trace, degenerate


def cluster_pairs(phi: np.ndarray, psi: np.ndarray, cfg: ClusterConfig,
                  domains: list[str] | None = None) -> ClusterAssignment:
    """Cluster pairs by Lloyd iterations with restarts; best objective wins.

    ``phi`` and ``psi`` are row-aligned with the dataset pairs. When
    ``cfg.per_domain`` and ``domains`` is given, each domain is clustered
    independently into ``cfg.k`` clusters with globally unique cluster ids.
    """
    u, v = _pair_views(phi, psi)
    n = u.shape[0]
    if n == 0:
        raise ClusterError("empty dataset")
    if cfg.k > n:
        raise ClusterError(f"k={cfg.k} larger than pair count {n}")

    groups: list[tuple[str | None, np.ndarray]]
    if cfg.per_domain and domains is not None:
        if len(domains) != n:
            raise ClusterError(f"{len(domains)} domain labels for {n} pairs")
        labels = sorted(set(domains))
        dom_arr = np.asarray(domains)
        groups = [(lab, np.flatnonzero(dom_arr == lab)) for lab in labels]
    else:
        groups = [(None, np.arange(n))]

    assignment = np.full(n, -1, dtype=np.int64)
    all_centroids: list[Centroid] = []
    total_obj = 0.0
    best_trace: list[float] = []
    per_cluster: list[float] = []
    degenerate = False
    next_id = 0
    for gi, (_, idx) in enumerate(groups):
        if cfg.k > idx.size:
            raise ClusterError(
                f"k={cfg.k} larger than pair count {idx.size} in group {gi}")
        best = None
        for r in range(cfg.restarts):
            seed = int(np.random.default_rng((cfg.seed, gi, r)).integers(2 ** 31))
            result = _lloyd(u[idx], v[idx], cfg.k, cfg, seed)
            if best is None or result[2] < best[2]:
                best = result
        assign_g, centers, obj, trace, degen = best
        assignment[idx] = assign_g + next_id
        counts = np.bincount(assign_g, minlength=cfg.k)
        cost = _pair_costs(u[idx].astype(np.float64), v[idx].astype(np.float64), centers)
        own = cost[np.arange(idx.size), assign_g]
        per_cluster.extend(float(own[assign_g == b].sum()) for b in range(cfg.k))
        all_centroids.extend(
            Centroid(c=centers[b].astype(np.float32), member_count=int(counts[b]))
            for b in range(cfg.k))
        total_obj += obj
        best_trace.extend(trace)
        degenerate = degenerate or degen
        next_id += cfg.k

    return ClusterAssignment(assignment=assignment, k=next_id, objective=total_obj,
                             centroids=all_centroids, domains=list(domains) if domains else None,
                             objective_trace=best_trace,
                             objective_by_cluster=np.asarray(per_cluster),
                             degenerate_init=degenerate)


def clustering_objective(phi: np.ndarray, psi: np.ndarray,
                         assignment: np.ndarray,
                         centroids: list[Centroid]) -> float:
    """Recompute the total cost independently of the solver."""
    u, v = _pair_views(phi, psi)
    assignment = np.asarray(assignment)
    if assignment.shape[0] != u.shape[0]:
        raise ClusterError(f"{assignment.shape[0]} assignments for {u.shape[0]} pairs")
    if np.any(assignment < 0) or np.any(assignment >= len(centroids)):
        raise ClusterError("unassigned pair or out-of-range cluster id")
    centers = np.stack([c.c for c in centroids]).astype(np.float64)
    u64, v64 = u.astype(np.float64), v.astype(np.float64)
    du = u64 - centers[assignment]
    dv = v64 - centers[assignment]
    return float((du * du).sum() + (dv * dv).sum())


def batch_adversarial_score(batch_indices, phi: np.ndarray, psi: np.ndarray) -> float:
    """Cross-pair score sum over ordered distinct pairs in the batch.

    Convention: every ordered pair (i, j), i != j, contributes
    phi(d_i).psi(q_j) + phi(d_j).psi(q_i), i.e. each unordered pair is
    counted from both sides.
    """
    idx = np.asarray(batch_indices, dtype=np.intp)
    if idx.size == 0:
        raise ClusterError("batch must be non-empty")
    if idx.size == 1:
        return 0.0
    d = np.asarray(phi, dtype=np.float64)[idx]
    q = np.asarray(psi, dtype=np.float64)[idx]
    s = d @ q.T  # s[i, j] = phi(d_i) . psi(q_j)
    return float(2.0 * (s.sum() - np.trace(s)))


def brute_force_best_partition(phi: np.ndarray, psi: np.ndarray,
                               k: int = 2) -> tuple[np.ndarray, float]:
    """Exhaustive optimal K-Means partition for tiny instances (oracle).

    Enumerates every assignment of pairs to k groups, placing each group's
    centroid at the mean of its member u/v views. Exponential; intended for
    <= 8 pairs in tests.
    """
    u, v = _pair_views(phi, psi)
    n = u.shape[0]
    if n > 12:
        raise ClusterError("brute force oracle limited to small instances")
    u64, v64 = u.astype(np.float64), v.astype(np.float64)
    best_obj = np.inf
    best_assign = None
    for code in range(k ** n):
        assign = np.array([(code // (k ** i)) % k for i in range(n)], dtype=np.int64)
        obj = 0.0
        for b in range(k):
            members = np.flatnonzero(assign == b)
            if not members.size:
                continue
            center = (u64[members].sum(axis=0) + v64[members].sum(axis=0)) / (2.0 * members.size)
            du = u64[members] - center
            dv = v64[members] - center
            obj += float((du * du).sum() + (dv * dv).sum())
        if obj < best_obj:
            best_obj = obj
            best_assign = assign
    return best_assign, best_obj


def write_cluster_file(assignment: ClusterAssignment, path: str | Path) -> None:
    """Emit JSONL lines {"cluster": id, "pairs": [...], "objective_share": x}."""
    path = Path(path)
    total = assignment.objective if assignment.objective > 0 else 1.0
    with path.open("w", encoding="utf-8") as f:
        for b in range(assignment.k):
            members = assignment.members(b)
            share = 0.0
            if assignment.objective_by_cluster is not None:
                share = float(assignment.objective_by_cluster[b]) / total
            f.write(json.dumps({
                "cluster": int(b),
                "pairs": [int(i) for i in members],
                "objective_share": share,
                "domain": (assignment.domains[members[0]]
                           if assignment.domains is not None and members.size else None),
            }) + "\n")


def read_cluster_file(path: str | Path) -> list[dict]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
