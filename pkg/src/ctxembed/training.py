"""Contrastive training: masked InfoNCE, Adam with warmup/linear decay,
shared-context construction with subsampling, and two-stage gradient caching.

Loss direction is query-over-documents softmax; a symmetric two-direction
variant sits behind ``TrainConfig.symmetric`` (off by default). The loop is
single-threaded over steps; parameter updates are applied by one writer in
a fixed order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .cluster import ClusterAssignment
from .data import PairDataset
from .encoders import (BiencoderParams, CdeParams, EncoderConfig,
                       biencoder_embed, cde_forward, context_token_ids,
                       m1_context_row, text_token_ids)
from .filtering import FilterConfig, LossMask, build_loss_mask
from .packing import BatchPlan, PackingConfig, pack_batches


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.02
    lr_peak: float = 2e-5
    warmup_steps: int = 1000
    epochs: int = 1
    seq_dropout_p: float = 0.2
    context_k: int = 256
    gradcache: bool = False
    seed: int = 0
    symmetric: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")


class AdamState:
    """First/second moment buffers; beta1=0.9, beta2=0.999, eps=1e-8."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        self.step = 0


def adam_step(params: list[Tensor], state: AdamState, lr: float) -> None:
    """One Adam update; parameters without grads are left untouched."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        if lr == 0.0:
            continue
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.data = (p.data.astype(np.float64)
                  - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def info_nce_loss(scores: Tensor, mask: LossMask | None, tau: float) -> Tensor:
    """Masked InfoNCE, mean over rows, log-sum-exp stabilized.

    Row i's normalizer runs over unmasked columns only; the diagonal (gold)
    is always included. A row where only the gold survives contributes zero
    loss. Raises on non-finite scores.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s = scores.data
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"scores must be square, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score matrix")
    n = s.shape[0]
    allowed = np.ones((n, n), dtype=bool) if mask is None else ~mask.mask
    np.fill_diagonal(allowed, True)

    x = s.astype(np.float64) / tau
    neg_inf = -np.inf
    masked_x = np.where(allowed, x, neg_inf)
    row_max = masked_x.max(axis=1, keepdims=True)
    ex = np.exp(masked_x - row_max)
    lse = np.log(ex.sum(axis=1, keepdims=True)) + row_max
    diag = np.diag(x).reshape(-1, 1)
    loss_val = float((lse - diag).mean())
    probs = ex / ex.sum(axis=1, keepdims=True)

    out = Tensor(np.asarray(loss_val, dtype=s.dtype))

    def backward(g):
        coeff = float(g) / (tau * n)
        grad = probs.copy()
        grad[np.arange(n), np.arange(n)] -= 1.0
        return ((grad * coeff).astype(s.dtype),)

    return ag.record_op(out, (scores,), backward)


def contrastive_loss(scores: Tensor, mask: LossMask | None,
                     cfg: TrainConfig) -> Tensor:
    if not cfg.symmetric:
        return info_nce_loss(scores, mask, cfg.temperature)
    fwd = info_nce_loss(scores, mask, cfg.temperature)
    mask_t = None
    if mask is not None:
        mask_t = LossMask(mask=mask.mask.T.copy(), masked_count=mask.masked_count)
    bwd = info_nce_loss(ag.transpose(scores), mask_t, cfg.temperature)
    return ag.scale(ag.add(fwd, bwd), 0.5)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over warmup, then linear decay to 0."""
    if total_steps <= cfg.warmup_steps:
        raise ValueError(
            f"total_steps {total_steps} must exceed warmup_steps {cfg.warmup_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak * (total_steps - step) / (total_steps - cfg.warmup_steps)


def scale_warmup(cfg: TrainConfig, total_steps: int) -> TrainConfig:
    """Shrink warmup to 10% of the run when the run is short.

    The stock warmup length targets multi-day runs; desk-scale runs would
    otherwise never leave the ramp.
    """
    if total_steps >= 2 * cfg.warmup_steps:
        return cfg
    return replace(cfg, warmup_steps=max(1, round(0.1 * total_steps)))


def subsample_context(doc_indices, k: int, seed: int) -> list[int]:
    """Uniform sample without replacement when more than k docs are offered."""
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = [int(i) for i in doc_indices]
    if len(idx) <= k:
        return idx
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(idx), size=k, replace=False)
    return [idx[i] for i in sorted(pick)]


def _derive_seed(*parts: int) -> int:
    return int(np.random.default_rng(parts).integers(2 ** 31))


@dataclass
class TokenizedPairs:
    """Pre-hashed token ids for every pair, shared across steps."""

    query_ids: list[list[int]]
    doc_ids: list[list[int]]
    ctx_ids: list[list[int]]

    @classmethod
    def from_dataset(cls, dataset: PairDataset, cfg: EncoderConfig) -> "TokenizedPairs":
        queries = [text_token_ids(q.text, cfg) for q, _ in dataset.pairs]
        docs = [text_token_ids(d.text, cfg) for _, d in dataset.pairs]
        ctx = [context_token_ids(d.text, cfg) for _, d in dataset.pairs]
        return cls(query_ids=queries, doc_ids=docs, ctx_ids=ctx)


@dataclass
class TrainLogRow:
    step: int
    lr: float
    loss: float
    masked_cells: int
    batch_hardness: float


def write_train_log(rows: list[TrainLogRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss", "masked_cells", "batch_hardness"])
        for r in rows:
            w.writerow([r.step, f"{r.lr:.10g}", f"{r.loss:.10g}",
                        r.masked_cells, f"{r.batch_hardness:.10g}"])


def _surrogate_hardness(batch, phi_hat, psi_hat) -> float:
    idx = np.asarray(batch, dtype=np.intp)
    if idx.size < 2:
        return 0.0
    s = psi_hat[idx].astype(np.float64) @ phi_hat[idx].astype(np.float64).T
    off = s.sum() - np.trace(s)
    return float(off / (idx.size * (idx.size - 1)))


def batch_mask(batch, dataset, phi_hat, psi_hat,
                filter_cfg: FilterConfig | None) -> LossMask:
    if filter_cfg is None or (not filter_cfg.enabled
                              and filter_cfg.collision_mode == "off"):
        return LossMask.empty(len(batch))
    idx = np.asarray(batch, dtype=np.intp)
    s_hat = psi_hat[idx].astype(np.float64) @ phi_hat[idx].astype(np.float64).T
    return build_loss_mask(batch, s_hat, filter_cfg, dataset)


def train_step_biencoder(batch, tok: TokenizedPairs, params: BiencoderParams,
                         opt: AdamState, cfg: TrainConfig, lr: float,
                         mask: LossMask | None) -> float:
    """One batch: embed all pairs, masked InfoNCE, Adam update."""
    tensors = params.tensors()
    ag.zero_grads(tensors)
    with Tape() as tape:
        q_rows = [biencoder_embed(tok.query_ids[i], params) for i in batch]
        d_rows = [biencoder_embed(tok.doc_ids[i], params) for i in batch]
        q_mat = ag.concat_rows(q_rows)
        d_mat = ag.concat_rows(d_rows)
        scores = ag.matmul(q_mat, ag.transpose(d_mat))
        loss = contrastive_loss(scores, mask, cfg)
        tape.backward(loss)
    adam_step(tensors, opt, lr)
    return loss.item()


def _build_context(batch, tok: TokenizedPairs, params: CdeParams,
                   cfg: TrainConfig, step: int
                   ) -> tuple[list[int], np.ndarray]:
    """Pick the shared per-batch context docs and the per-step null mask.

    Returns (context pair indices, combined null mask over capacity): pad
    slots beyond the sampled docs plus sequence-dropout draws.
    """
    k = min(cfg.context_k, params.j_max)
    ctx_pairs = subsample_context(batch, k, _derive_seed(cfg.seed, step, 17))
    j_real = len(ctx_pairs)
    mask = np.ones(params.j_max, dtype=bool)
    mask[:j_real] = False
    if cfg.seq_dropout_p > 0.0:
        rng = np.random.default_rng(_derive_seed(cfg.seed, step, 31))
        draws = rng.random(params.j_max) < cfg.seq_dropout_p
        mask[:j_real] |= draws[:j_real]
    return ctx_pairs, mask


def _cde_all_embeddings(batch, tok: TokenizedPairs, ctx_tensor: Tensor,
                        null_mask: np.ndarray, params: CdeParams
                        ) -> tuple[Tensor, Tensor]:
    q_rows = [cde_forward(tok.query_ids[i], ctx_tensor, null_mask, params)
              for i in batch]
    d_rows = [cde_forward(tok.doc_ids[i], ctx_tensor, null_mask, params)
              for i in batch]
    return ag.concat_rows(q_rows), ag.concat_rows(d_rows)


def _padded_context_tensor(ctx_rows: list[Tensor], params: CdeParams) -> Tensor:
    """Stack taped context rows and zero-pad to capacity.

    Pad rows are placeholders: the null mask routes them through the live
    null token inside the forward, so their values never matter.
    """
    e = params.v_null.data.shape[1]
    parts: list[Tensor] = list(ctx_rows)
    pad = params.j_max - len(ctx_rows)
    if pad > 0:
        parts.append(Tensor(np.zeros((pad, e), dtype=params.v_null.data.dtype)))
    return ag.concat_rows(parts)


def train_step_cde(batch, tok: TokenizedPairs, params: CdeParams,
                   opt: AdamState, cfg: TrainConfig, lr: float,
                   mask: LossMask | None, step: int) -> float:
    """One contextual batch with a shared context set.

    Gradients flow into the second stage, the null token, positional table,
    and through the context rows into the first stage. With
    ``cfg.gradcache`` the same gradients are produced by staged
    recomputation instead of one end-to-end tape.
    """
    tensors = params.tensors()
    ag.zero_grads(tensors)
    ctx_pairs, null_mask = _build_context(batch, tok, params, cfg, step)
    if cfg.gradcache:
        loss_val = gradcache_backward(batch, tok, params, cfg, ctx_pairs,
                                      null_mask, mask)
    else:
        with Tape() as tape:
            ctx_rows = [m1_context_row(tok.ctx_ids[i], params.m1)
                        for i in ctx_pairs]
            ctx_tensor = _padded_context_tensor(ctx_rows, params)
            q_mat, d_mat = _cde_all_embeddings(batch, tok, ctx_tensor,
                                               null_mask, params)
            scores = ag.matmul(q_mat, ag.transpose(d_mat))
            loss = contrastive_loss(scores, mask, cfg)
            tape.backward(loss)
        loss_val = loss.item()
    adam_step(tensors, opt, lr)
    return loss_val


def gradcache_backward(batch, tok: TokenizedPairs, params: CdeParams,
                       cfg: TrainConfig, ctx_pairs: list[int],
                       null_mask: np.ndarray, mask: LossMask | None) -> float:
    """Two-stage gradient caching; populates ``grad`` on all parameters.

    Stage A: first-stage forward, no tape. Stage B: second-stage forward
    plus loss on frozen embeddings, caching loss gradients w.r.t. the
    second-stage outputs. Stage C: re-run the second stage per example with
    a tape, injecting the cached gradients, accumulating second-stage
    parameter gradients and context-row gradients. Stage D: re-run the
    first stage per context doc, injecting the context-row gradients.
    Matches direct backprop; peak live tensors stay lower because each
    stage's tape is released before the next.
    """
    dt = params.v_null.data.dtype
    e = params.v_null.data.shape[1]

    # stage A: frozen context rows
    ctx_values = np.zeros((params.j_max, e), dtype=dt)
    for slot, i in enumerate(ctx_pairs):
        ctx_values[slot] = m1_context_row(tok.ctx_ids[i], params.m1).data.reshape(-1)

    # stage B: frozen embeddings, loss-side gradients
    b = len(batch)
    q_frozen = np.zeros((b, e), dtype=dt)
    d_frozen = np.zeros((b, e), dtype=dt)
    for row, i in enumerate(batch):
        ctx_const = Tensor(ctx_values)
        q_frozen[row] = cde_forward(tok.query_ids[i], ctx_const, null_mask,
                                    params).data.reshape(-1)
        d_frozen[row] = cde_forward(tok.doc_ids[i], ctx_const, null_mask,
                                    params).data.reshape(-1)
    q_leaf = Tensor(q_frozen, requires_grad=True)
    d_leaf = Tensor(d_frozen, requires_grad=True)
    with Tape() as tape:
        scores = ag.matmul(q_leaf, ag.transpose(d_leaf))
        loss = contrastive_loss(scores, mask, cfg)
        tape.backward(loss)
    loss_val = loss.item()
    dq = q_leaf.grad
    dd = d_leaf.grad
    if dq is None or dd is None or dq.shape != q_frozen.shape:
        raise RuntimeError("gradcache stage B produced inconsistent gradients")

    # stage C: re-run second stage with tape, inject output grads
    ctx_grad = np.zeros_like(ctx_values)
    for row, i in enumerate(batch):
        for ids, cot in ((tok.query_ids[i], dq[row]), (tok.doc_ids[i], dd[row])):
            ctx_in = Tensor(ctx_values, requires_grad=True)
            with Tape() as tape:
                out = cde_forward(ids, ctx_in, null_mask, params)
                tape.backward_from([out], [cot.reshape(1, -1)])
            if ctx_in.grad is not None:
                if ctx_in.grad.shape != ctx_values.shape:
                    raise RuntimeError("gradcache stage C shape mismatch")
                ctx_grad += ctx_in.grad

    # stage D: re-run first stage with tape, inject context-row grads
    for slot, i in enumerate(ctx_pairs):
        g_row = ctx_grad[slot]
        if not np.any(g_row):
            continue
        with Tape() as tape:
            row_out = m1_context_row(tok.ctx_ids[i], params.m1)
            tape.backward_from([row_out], [g_row.reshape(1, -1)])
    return loss_val


def _epochs_plans(assignment: ClusterAssignment, pack_cfg: PackingConfig,
                  epochs: int) -> list[BatchPlan]:
    """Re-pack per epoch with a fresh seed (re-clustering stays off)."""
    return [pack_batches(assignment, replace(pack_cfg, seed=pack_cfg.seed + ep))
            for ep in range(epochs)]


@dataclass
class TrainResult:
    log: list[TrainLogRow] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.log]


def _run_loop(step_fn, plans: list[BatchPlan], cfg: TrainConfig,
              dataset: PairDataset, phi_hat: np.ndarray, psi_hat: np.ndarray,
              filter_cfg: FilterConfig | None,
              on_epoch_end=None) -> TrainResult:
    total = sum(len(p.batches) for p in plans)
    cfg_eff = scale_warmup(cfg, total)
    result = TrainResult()
    step = 0
    for epoch, plan in enumerate(plans):
        for b in plan.batches:
            lr = lr_at(min(step + 1, total), total, cfg_eff)
            mask = batch_mask(b.pair_indices, dataset, phi_hat, psi_hat, filter_cfg)
            loss = step_fn(list(b.pair_indices), lr, mask, step)
            result.log.append(TrainLogRow(
                step=step, lr=lr, loss=loss, masked_cells=mask.masked_count,
                batch_hardness=_surrogate_hardness(b.pair_indices, phi_hat, psi_hat)))
            step += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    return result


def train_biencoder(dataset: PairDataset, tok: TokenizedPairs,
                    params: BiencoderParams, assignment: ClusterAssignment,
                    pack_cfg: PackingConfig, cfg: TrainConfig,
                    phi_hat: np.ndarray, psi_hat: np.ndarray,
                    filter_cfg: FilterConfig | None = None,
                    plans: list[BatchPlan] | None = None,
                    on_epoch_end=None) -> TrainResult:
    if plans is None:
        plans = _epochs_plans(assignment, pack_cfg, cfg.epochs)
    opt = AdamState(params.tensors())

    def step_fn(batch, lr, mask, step):
        return train_step_biencoder(batch, tok, params, opt, cfg, lr, mask)

    return _run_loop(step_fn, plans, cfg, dataset, phi_hat, psi_hat, filter_cfg,
                     on_epoch_end=on_epoch_end)


def train_cde(dataset: PairDataset, tok: TokenizedPairs, params: CdeParams,
              assignment: ClusterAssignment, pack_cfg: PackingConfig,
              cfg: TrainConfig, phi_hat: np.ndarray, psi_hat: np.ndarray,
              filter_cfg: FilterConfig | None = None,
              plans: list[BatchPlan] | None = None,
              on_epoch_end=None) -> TrainResult:
    if plans is None:
        plans = _epochs_plans(assignment, pack_cfg, cfg.epochs)
    opt = AdamState(params.tensors())

    def step_fn(batch, lr, mask, step):
        return train_step_cde(batch, tok, params, opt, cfg, lr, mask, step)

    return _run_loop(step_fn, plans, cfg, dataset, phi_hat, psi_hat, filter_cfg,
                     on_epoch_end=on_epoch_end)
