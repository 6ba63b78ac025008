"""Block-sparse local attention: pooled block scoring, per-row top-K mask
construction, and masked attention through an online softmax.

The online accumulation (running row max, running normalizer, rescaled
partial output) visits only active blocks, so inactive blocks contribute
exactly nothing and the result equals dense attention with -inf scores on
the inactive blocks, independent of visit order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, ShapeError


@dataclass(frozen=True)
class BlockConfig:
    block_q: int
    block_kv: int
    keep_ratio: float
    forced_blocks: frozenset = field(default_factory=frozenset)  # key-block indices

    def __post_init__(self):
        if self.block_q < 1 or self.block_kv < 1:
            raise ShapeError("block sizes must be >= 1")
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ValueError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")


@dataclass
class BlockMask:
    """Boolean [query blocks x key blocks] activity matrix for one head."""

    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if self.active.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.active.shape}")
        if self.active.shape[0] > 0 and not self.active.any(axis=1).all():
            raise ContractViolationError("every query row needs at least one active block")

    @property
    def shape(self):
        return self.active.shape

    def active_count(self) -> int:
        return int(self.active.sum())


def _split_blocks(x: np.ndarray, block: int, what: str) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n % block != 0:
        raise ShapeError(f"{what} length {n} not divisible by block size {block}")
    return x.reshape(n // block, block, d)


def pad_to_block(x: np.ndarray, block: int) -> tuple[np.ndarray, int]:
    """Pad token rows with zeros up to a block multiple; returns (padded, n_valid)."""
    n = x.shape[0]
    rem = n % block
    if rem == 0:
        return x, n
    pad = np.zeros((block - rem, x.shape[1]), dtype=x.dtype)
    return np.concatenate([x, pad], axis=0), n


def block_scores(q: np.ndarray, k: np.ndarray, cfg: BlockConfig) -> np.ndarray:
    """Pooled importance scores: mean of each query block dotted with the
    mean of each key block. Raw scores are returned; any row-monotone
    transform (e.g. a softmax) selects the same top-K set."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"head dims differ: {q.shape} vs {k.shape}")
    qb = _split_blocks(q, cfg.block_q, "q").mean(axis=1)  # [T_m, d]
    kb = _split_blocks(k, cfg.block_kv, "k").mean(axis=1)  # [T_n, d]
    return qb @ kb.T


def build_mask(scores: np.ndarray, cfg: BlockConfig) -> BlockMask:
    """Activate forced blocks plus the highest-scoring remainder per query row.

    The per-row quota is max(forced count, ceil(keep_ratio * T_n)); forced
    blocks count toward it. Score ties break toward the lower key-block
    index, so masks are deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {scores.shape}")
    t_m, t_n = scores.shape
    forced = sorted(cfg.forced_blocks)
    if forced and (forced[0] < 0 or forced[-1] >= t_n):
        raise ShapeError(f"forced block {forced} out of range for {t_n} key blocks")
    quota = max(len(forced), math.ceil(cfg.keep_ratio * t_n))
    active = np.zeros((t_m, t_n), dtype=bool)
    active[:, forced] = True
    for i in range(t_m):
        need = quota - len(forced)
        if need <= 0:
            continue
        # stable sort on (-score, index): descending score, index tie-break
        order = np.lexsort((np.arange(t_n), -scores[i]))
        taken = 0
        for j in order:
            if active[i, j]:
                continue
            active[i, j] = True
            taken += 1
            if taken == need:
                break
    return BlockMask(active)


def sparse_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: BlockMask,
    scale: float | None = None,
    visit_order=None,
    valid_kv: int | None = None,
    counters=None,
) -> np.ndarray:
    """Masked attention over active blocks via online softmax.

    visit_order optionally permutes the key-block iteration; the result is
    unchanged up to rounding. valid_kv masks trailing padded key tokens out
    of the softmax; a forced block that is entirely padding is skipped.
    counters, when given, gets `score_evals` bumped by b_q * b_kv per
    visited block (the exact number of S entries computed).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    t_m, t_n = mask.shape
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-D")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k and v token counts differ: {k.shape[0]} vs {v.shape[0]}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"head dims differ: {q.shape} vs {k.shape}")
    if t_m == 0 or q.shape[0] % t_m != 0 or k.shape[0] % t_n != 0:
        raise ShapeError(
            f"mask {mask.shape} incompatible with {q.shape[0]} queries / {k.shape[0]} keys"
        )
    b_q = q.shape[0] // t_m
    b_kv = k.shape[0] // t_n
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    n_valid = k.shape[0] if valid_kv is None else int(valid_kv)
    order = list(range(t_n)) if visit_order is None else [int(j) for j in visit_order]
    if sorted(order) != list(range(t_n)):
        raise ShapeError("visit_order must be a permutation of the key blocks")
    if not mask.active.any(axis=1).all():
        raise ContractViolationError("a query row has no active blocks")

    d_v = v.shape[1]
    out = np.empty((q.shape[0], d_v), dtype=np.float64)
    for i in range(t_m):
        qi = q[i * b_q:(i + 1) * b_q]
        m = np.full(b_q, -np.inf)
        l = np.zeros(b_q)
        acc = np.zeros((b_q, d_v))
        for j in order:
            if not mask.active[i, j]:
                continue
            lo = j * b_kv
            hi = min((j + 1) * b_kv, n_valid)
            if hi <= lo:
                continue  # fully padded block
            s = (qi @ k[lo:lo + b_kv].T) * scale
            if counters is not None:
                counters.score_evals += b_q * b_kv
            if hi - lo < b_kv:
                s[:, hi - lo:] = -np.inf
            m_new = np.maximum(m, s.max(axis=1))
            alpha = np.exp(m - m_new)
            p = np.exp(s - m_new[:, None])
            l = alpha * l + p.sum(axis=1)
            acc = alpha[:, None] * acc + p @ v[lo:lo + b_kv]
            m = m_new
        if not np.all(l > 0):
            raise ContractViolationError(
                f"query block {i} saw no valid keys (all active blocks padded out)"
            )
        out[i * b_q:(i + 1) * b_q] = acc / l[:, None]
    return out
