"""Minimal reverse-mode automatic differentiation over numpy arrays.

Design constraints:

- float32 tensors by default, with reductions accumulated in float64; a
  float64-everywhere mode exists for gradient checks (pass f64 arrays in).
- No broadcasting beyond row-vector-to-matrix; every pattern is explicit.
- A tape is single-threaded. Ops record onto the innermost active tape;
  with no active tape, forwards are plain numpy and nothing is retained.
- Reductions over attention keys are computed in sorted order, so outputs
  are bitwise invariant under permutations of the key rows.

Live-tensor accounting (``measure_peak``) relies on CPython refcounting:
tensors never reference the tape, so dropping a tape frees its
intermediates immediately.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_LIVE = 0
_PEAK = 0
_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A numpy array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        global _LIVE, _PEAK
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        _LIVE += 1
        if _LIVE > _PEAK:
            _PEAK = _LIVE

    def __del__(self):
        global _LIVE
        _LIVE -= 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def live_tensor_count() -> int:
    return _LIVE


@dataclass
class PeakStats:
    peak: int = 0


@contextmanager
def measure_peak():
    """Track the peak number of simultaneously live tensors in the block."""
    global _PEAK
    stats = PeakStats()
    _PEAK = _LIVE
    try:
        yield stats
    finally:
        stats.peak = _PEAK


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Execution-ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable from loss.

        Leaves recorded on the tape but unreachable from the loss get a zero
        gradient. Gradients accumulate into existing ``grad`` buffers.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        seed = np.ones_like(loss.data, dtype=loss.data.dtype)
        self.backward_from([loss], [seed])

    def backward_from(self, tensors: Sequence[Tensor],
                      cotangents: Sequence[np.ndarray]) -> None:
        """Run the reverse sweep from externally supplied output gradients.

        This is the injection point for two-stage gradient caching: the
        caller provides d(loss)/d(tensor) for each seed tensor.
        """
        grads: dict[int, np.ndarray] = {}
        keep: dict[int, Tensor] = {}
        for t, g in zip(tensors, cotangents):
            g = np.asarray(g, dtype=t.data.dtype)
            if g.shape != t.data.shape:
                raise ValueError(
                    f"cotangent shape {g.shape} != tensor shape {t.data.shape}")
            _accumulate(grads, t, g)
            keep[id(t)] = t

        produced = {id(rec.output) for rec in self.records}
        for rec in reversed(self.records):
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            in_grads = rec.backward_fn(g_out)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None:
                    continue
                _accumulate(grads, inp, g)
                keep[id(inp)] = inp

        for rec in self.records:
            for inp in rec.inputs:
                keep.setdefault(id(inp), inp)
        for tid, t in keep.items():
            if not t.requires_grad or tid in produced:
                continue
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(t.data)
            if t.grad is None:
                t.grad = np.asarray(g, dtype=t.data.dtype).copy()
            else:
                t.grad = t.grad + np.asarray(g, dtype=t.data.dtype)


def _accumulate(grads: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    prev = grads.get(id(t))
    grads[id(t)] = g if prev is None else prev + g


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Register a custom differentiable op on the active tape, if any."""
    tape = active_tape()
    if tape is not None:
        tape.records.append(_Record(output, inputs, backward_fn))
    return output


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _result_dtype(*tensors: Tensor):
    return np.float64 if any(t.data.dtype == np.float64 for t in tensors) else np.float32


def _acc_matmul(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    """Matrix product accumulated in float64, cast to the result dtype."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(out_dtype)


def _sorted_sum(arr: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` in ascending value order.

    Sorting first makes the result a function of the value multiset only,
    so permuting the input along that axis cannot change the rounding.
    """
    return np.sort(arr, axis=axis).sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a row vector broadcast over rows of ``a``."""
    dtype = _result_dtype(a, b)
    broadcast = a.data.shape != b.data.shape
    if broadcast:
        if b.data.ndim > 2 or b.data.shape[-1] != a.data.shape[-1] or (
                b.data.ndim == 2 and b.data.shape[0] != 1):
            raise ValueError(f"add: cannot broadcast {b.data.shape} onto {a.data.shape}")
    out = Tensor((a.data.astype(dtype) + b.data.astype(dtype)).astype(dtype))

    def backward(g):
        ga = g
        if broadcast:
            gb = g.sum(axis=0, keepdims=(b.data.ndim == 2))
        else:
            gb = g
        return ga, gb

    return record_op(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(s))

    def backward(g):
        return (g * a.data.dtype.type(s),)

    return record_op(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    dtype = _result_dtype(a, b)
    out = Tensor(_acc_matmul(a.data, b.data, dtype))

    def backward(g):
        ga = _acc_matmul(g, b.data.T, a.data.dtype)
        gb = _acc_matmul(a.data.T, g, b.data.dtype)
        return ga, gb

    return record_op(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy())

    def backward(g):
        return (g.T.copy(),)

    return record_op(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def backward(g):
        return (g / a.data,)

    return record_op(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.astype(np.float64).sum(), dtype=a.data.dtype))

    def backward(g):
        return (np.full_like(a.data, g),)

    return record_op(out, (a,), backward)


def rowwise_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"rowwise_softmax: need 2-D input, got {a.data.shape}")
    x = a.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    ex = np.exp(x)
    p = (ex / ex.sum(axis=1, keepdims=True)).astype(a.data.dtype)
    out = Tensor(p)

    def backward(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return record_op(out, (a,), backward)


def mean_pool(a: Tensor, rows: Sequence[int]) -> Tensor:
    """Mean over the given row indices; output is 1 x cols."""
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size == 0:
        raise ValueError("mean_pool: empty row subset")
    pooled = a.data[rows].astype(np.float64).mean(axis=0, keepdims=True)
    out = Tensor(pooled.astype(a.data.dtype))

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, (g / rows.size).astype(a.data.dtype))
        return (ga,)

    return record_op(out, (a,), backward)


_NORM_EPS = 1e-12


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Normalize each row to unit L2 norm; rows with ~zero norm pass through."""
    x = a.data.astype(np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(norms > _NORM_EPS, norms, 1.0)
    y = (x / safe).astype(a.data.dtype)
    out = Tensor(y)

    def backward(g):
        g64 = g.astype(np.float64)
        y64 = y.astype(np.float64)
        inner = (g64 * y64).sum(axis=1, keepdims=True)
        ga = (g64 - y64 * inner) / safe
        ga = np.where(norms > _NORM_EPS, ga, g64)
        return (ga.astype(a.data.dtype),)

    return record_op(out, (a,), backward)


def scaled_dot_attention(queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Single-head attention softmax(QK^T / sqrt(e)) V.

    The softmax normalizer and the value reduction are summed in sorted
    order, making the output bitwise invariant under permutations of the
    key/value rows (attention is the only place row order could leak in).
    """
    if queries.data.ndim != 2 or keys.data.ndim != 2 or values.data.ndim != 2:
        raise ValueError("scaled_dot_attention: inputs must be 2-D")
    if queries.data.shape[1] != keys.data.shape[1]:
        raise ValueError(
            f"scaled_dot_attention: query dim {queries.data.shape} vs key dim {keys.data.shape}")
    if keys.data.shape[0] != values.data.shape[0]:
        raise ValueError(
            f"scaled_dot_attention: {keys.data.shape[0]} keys vs {values.data.shape[0]} values")
    dtype = _result_dtype(queries, keys, values)
    inv_scale = 1.0 / np.sqrt(float(queries.data.shape[1]))

    q64 = queries.data.astype(np.float64)
    k64 = keys.data.astype(np.float64)
    v64 = values.data.astype(np.float64)
    # lane-wise scores: each (query, key) reduction runs over its own
    # contiguous lane, so a key-row permutation permutes score columns
    # bitwise (a GEMM's column blocking would round position-dependently)
    scores = (q64[:, None, :] * k64[None, :, :]).sum(axis=2) * inv_scale
    shifted = scores - scores.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    denom = _sorted_sum(ex, axis=1, keepdims=True)
    probs = ex / denom
    contrib = probs[:, :, None] * v64[None, :, :]
    out64 = _sorted_sum(contrib, axis=1)
    out = Tensor(out64.astype(dtype))

    def backward(g):
        g64 = g.astype(np.float64)
        gv = probs.T @ g64
        gp = g64 @ v64.T
        inner = (gp * probs).sum(axis=1, keepdims=True)
        gs = probs * (gp - inner)
        gq = (gs @ k64) * inv_scale
        gk = (gs.T @ q64) * inv_scale
        return (gq.astype(queries.data.dtype),
                gk.astype(keys.data.dtype),
                gv.astype(values.data.dtype))

    return record_op(out, (queries, keys, values), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("embedding_lookup: ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ValueError(
            f"embedding_lookup: id out of range for table of {table.data.shape[0]} rows")
    out = Tensor(table.data[ids].copy())

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record_op(out, (table,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_rows: empty part list")
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != cols:
            raise ValueError(
                f"concat_rows: all parts need {cols} columns, got {p.data.shape}")
    dtype = _result_dtype(*parts)
    out = Tensor(np.vstack([p.data for p in parts]).astype(dtype))
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]].astype(p.data.dtype)
            for i, p in enumerate(parts))

    return record_op(out, tuple(parts), backward)


def dropout_rows(a: Tensor, drop_mask: np.ndarray, fill_row: Tensor) -> Tensor:
    """Replace rows of ``a`` where ``drop_mask`` is set with ``fill_row``.

    Gradients of replaced rows flow to ``fill_row`` (summed); kept rows pass
    through. The mask itself is a constant.
    """
    mask = np.asarray(drop_mask, dtype=bool)
    if mask.shape != (a.data.shape[0],):
        raise ValueError(
            f"dropout_rows: mask shape {mask.shape} vs {a.data.shape[0]} rows")
    fill = fill_row.data.reshape(-1)
    if fill.shape[0] != a.data.shape[1]:
        raise ValueError(
            f"dropout_rows: fill width {fill.shape[0]} vs {a.data.shape[1]} columns")
    dtype = _result_dtype(a, fill_row)
    out_data = a.data.astype(dtype).copy()
    out_data[mask] = fill.astype(dtype)
    out = Tensor(out_data)

    def backward(g):
        ga = g.astype(a.data.dtype).copy()
        ga[mask] = 0.0
        gf = g[mask].sum(axis=0).reshape(fill_row.data.shape).astype(fill_row.data.dtype)
        return ga, gf

    return record_op(out, (a, fill_row), backward)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = 1e-5) -> float:
    """Max relative error between analytic grads of ``fn`` and central differences.

    ``fn`` must be a deterministic scalar function of ``params`` (reading
    their current ``.data``). Intended for float64 parameters; float32 works
    but the attainable tolerance is correspondingly loose.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    zero_grads(params)
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(an.reshape(-1)[i])
            denom = max(abs(a), abs(fd), 1e-6)
            worst = max(worst, abs(a - fd) / denom)
    return worst
