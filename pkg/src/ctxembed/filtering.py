"""Per-batch score masks removing false negatives and duplicate collisions.

A masked cell (i, j) is excluded from the contrastive normalizer of row i.
Exclusion from the normalizer is mathematically identical to setting the
score to a large negative number, without the magic constant. Equivalence
classes are computed within the batch only: the loss never sees candidates
outside it. Pure per-batch computation, parallel across batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PairDataset

COLLISION_MODES = ("exact_text", "exact_id", "off")


@dataclass(frozen=True)
class FilterConfig:
    epsilon: float = 0.0
    enabled: bool = True
    collision_mode: str = "exact_text"

    def __post_init__(self):
        if not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite")
        if self.collision_mode not in COLLISION_MODES:
            raise ValueError(f"collision_mode must be one of {COLLISION_MODES}")


@dataclass
class LossMask:
    """B x B boolean matrix; True excludes the cell from the row normalizer.

    Rows index queries, columns index documents. The diagonal (gold pairs)
    is never masked.
    """

    mask: np.ndarray
    masked_count: int
    equivalence_cells: int = 0
    collision_cells: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or self.mask.shape[0] != self.mask.shape[1]:
            raise ValueError(f"mask must be square, got {self.mask.shape}")
        if np.any(np.diag(self.mask)):
            raise ValueError("gold (diagonal) cells must stay unmasked")
        if self.masked_count != int(self.mask.sum()):
            raise ValueError("masked_count inconsistent with mask")

    @classmethod
    def empty(cls, size: int) -> "LossMask":
        return cls(mask=np.zeros((size, size), dtype=bool), masked_count=0)


def equivalence_class(q_index: int, batch_size: int, scores_row: np.ndarray,
                      gold_score: float, epsilon: float) -> set[int]:
    """Candidates a surrogate scores at least epsilon above gold.

    S = { j != q_index : scores_row[j] >= gold_score + epsilon }; the gold
    document itself is excluded by definition.
    """
    scores_row = np.asarray(scores_row, dtype=np.float64)
    if scores_row.shape != (batch_size,):
        raise ValueError(f"expected {batch_size} scores, got {scores_row.shape}")
    hits = np.flatnonzero(scores_row >= float(gold_score) + float(epsilon))
    return {int(j) for j in hits if j != q_index}


def detect_collisions(batch_indices, dataset: PairDataset,
                      mode: str) -> set[tuple[int, int]]:
    """Exact query- or document-duplicate cells within a batch.

    Cell (i, j), i != j, is a collision when document j duplicates
    document i, or query i duplicates query j (text compared after prefix
    stripping for exact_text; ids compared for exact_id).
    """
    if mode == "off":
        raise ValueError("detect_collisions requires mode != off")
    if mode not in COLLISION_MODES:
        raise ValueError(f"unknown collision mode {mode!r}")
    idx = [int(i) for i in batch_indices]
    sep = dataset.prefix_sep
    if mode == "exact_text":
        q_keys = [dataset[i][0].raw_text(sep) for i in idx]
        d_keys = [dataset[i][1].raw_text(sep) for i in idx]
    else:
        q_keys = [dataset[i][0].id for i in idx]
        d_keys = [dataset[i][1].id for i in idx]

    out: set[tuple[int, int]] = set()
    n = len(idx)
    for i in range(n):
        for j in range(n):
            if i != j and (d_keys[i] == d_keys[j] or q_keys[i] == q_keys[j]):
                out.add((i, j))
    return out


def build_loss_mask(batch_indices, surrogate_scores: np.ndarray,
                    cfg: FilterConfig,
                    dataset: PairDataset | None = None) -> LossMask:
    """Union of equivalence-class and collision cells, diagonal kept clear.

    ``surrogate_scores[i, j]`` must be the surrogate score of query i
    against document j for the batch members, in batch order.
    """
    idx = [int(i) for i in batch_indices]
    n = len(idx)
    s = np.asarray(surrogate_scores, dtype=np.float64)
    if s.shape != (n, n):
        raise ValueError(f"surrogate score matrix must be {n}x{n}, got {s.shape}")

    mask = np.zeros((n, n), dtype=bool)
    eq_cells = 0
    if cfg.enabled:
        for i in range(n):
            for j in equivalence_class(i, n, s[i], s[i, i], cfg.epsilon):
                mask[i, j] = True
                eq_cells += 1

    col_cells = 0
    if cfg.collision_mode != "off":
        if dataset is None:
            raise ValueError("collision detection requires the dataset")
        for (i, j) in detect_collisions(idx, dataset, cfg.collision_mode):
            if not mask[i, j]:
                col_cells += 1
            mask[i, j] = True

    np.fill_diagonal(mask, False)
    return LossMask(mask=mask, masked_count=int(mask.sum()),
                    equivalence_cells=eq_cells, collision_cells=col_cells)


def mask_stats(masks: list[LossMask]) -> dict:
    """Aggregate report across batches."""
    if not masks:
        return {"batches": 0, "mean_masked_per_row": 0.0, "collision_cells": 0}
    per_row = [m.masked_count / m.mask.shape[0] for m in masks]
    return {
        "batches": len(masks),
        "mean_masked_per_row": float(np.mean(per_row)),
        "collision_cells": int(sum(m.collision_cells for m in masks)),
    }
