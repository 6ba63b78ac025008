"""Compressed history pathway: a constant-size linear-attention state over
evicted cache entries.

Per head the state is a feature-space accumulator L (sum over evicted
tokens of rotate(phi(k))^T v) and a normalizer vector H (sum over evicted
chunks of the per-chunk mean of phi(k), kept unrotated). Queries read the
state as projection(rotate(phi(q)) L / (phi(q) . H + eps)), so memory and
query cost never grow with how much has been evicted.

Note the deliberate asymmetry: the rotation enters L and the query
numerator but not H or the denominator, and H averages within each evicted
chunk before summing across chunks.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics
from .errors import FormatError, ShapeError
from .rope import RoPEConfig, apply_rope

EPS_DIV = 1e-6  # denominator guard for adversarial queries


class FeatureMap(Enum):
    """Elementwise activation applied to queries/keys in the linear pathway.

    ELU_PLUS_ONE and EXP are strictly positive everywhere, which keeps the
    normalizer meaningful. IDENTITY exists for closed-form tests on positive
    inputs only.
    """

    ELU_PLUS_ONE = "elu1"
    EXP = "exp"
    IDENTITY = "identity"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self is FeatureMap.ELU_PLUS_ONE:
            return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
        if self is FeatureMap.EXP:
            return np.exp(x)
        return x.copy()


@dataclass
class LinearState:
    """Per-head (L, H) summary of everything evicted so far, plus the fixed
    output projection applied after heads are concatenated."""

    L: np.ndarray        # [heads, head_dim, head_dim]
    H: np.ndarray        # [heads, head_dim]
    evicted_tokens: int
    projection: np.ndarray  # [model_dim, model_dim]
    feature_map: FeatureMap = FeatureMap.ELU_PLUS_ONE

    @classmethod
    def zeros(cls, heads: int, head_dim: int, projection: np.ndarray,
              feature_map: FeatureMap = FeatureMap.ELU_PLUS_ONE) -> "LinearState":
        projection = np.asarray(projection, dtype=np.float64)
        model_dim = heads * head_dim
        if projection.shape != (model_dim, model_dim):
            raise ShapeError(
                f"projection must be [{model_dim}, {model_dim}], got {projection.shape}"
            )
        return cls(
            L=np.zeros((heads, head_dim, head_dim)),
            H=np.zeros((heads, head_dim)),
            evicted_tokens=0,
            projection=projection,
            feature_map=feature_map,
        )

    @property
    def heads(self) -> int:
        return self.L.shape[0]

    @property
    def head_dim(self) -> int:
        return self.L.shape[1]

    @property
    def model_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def nbytes(self) -> int:
        """State footprint; independent of how many tokens were absorbed."""
        return self.L.nbytes + self.H.nbytes + self.projection.nbytes + 8

    def copy(self) -> "LinearState":
        return LinearState(self.L.copy(), self.H.copy(), self.evicted_tokens,
                           self.projection.copy(), self.feature_map)

    # -- serialization (exact f64, used by cache snapshots) -----------------

    def to_stream(self, f) -> None:
        numerics.write_f64_tensor(f, self.L)
        numerics.write_f64_tensor(f, self.H)
        numerics.write_f64_tensor(f, self.projection)

    @classmethod
    def from_stream(cls, f, evicted_tokens: int, feature_map: FeatureMap) -> "LinearState":
        L = numerics.read_f64_tensor(f)
        H = numerics.read_f64_tensor(f)
        projection = numerics.read_f64_tensor(f)
        if L.ndim != 3 or H.ndim != 2 or projection.ndim != 2:
            raise FormatError("linear state tensors have unexpected ranks")
        return cls(L, H, int(evicted_tokens), projection, feature_map)


def absorb_evicted(
    state: LinearState,
    keys: np.ndarray,
    values: np.ndarray,
    rope_cfg: RoPEConfig,
    t_index: int = 0,
    s_indices=None,
) -> LinearState:
    """Fold one evicted chunk into the state (in place; also returned).

    keys/values: [heads, chunk_tokens, head_dim]. Rotation is applied once
    here, anchoring evicted content at temporal index 0 by default so that
    query-side capped indices keep a monotone relative offset to everything
    already absorbed.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape != values.shape:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} differ")
    if keys.ndim != 3 or keys.shape[0] != state.heads or keys.shape[2] != state.head_dim:
        raise ShapeError(
            f"expected [{state.heads}, tokens, {state.head_dim}], got {keys.shape}"
        )
    fk = state.feature_map(keys)
    rotated = np.stack(
        [apply_rope(fk[h], t_index, s_indices, rope_cfg) for h in range(state.heads)]
    )
    state.L += np.einsum("htd,hte->hde", rotated, values)
    state.H += fk.mean(axis=1)
    state.evicted_tokens += keys.shape[1]
    if not (np.all(np.isfinite(state.L)) and np.all(np.isfinite(state.H))):
        raise ValueError("linear state became non-finite")
    return state


def history_output(
    state: LinearState,
    queries: np.ndarray,
    rope_cfg: RoPEConfig,
    t_index: int,
    s_indices=None,
    eps_div: float = EPS_DIV,
) -> np.ndarray:
    """Read the history pathway for a batch of per-head queries.

    queries: [heads, tokens, head_dim], unrotated. Returns [tokens,
    model_dim]. An empty state returns exact zeros: the pathway is inactive
    until the first eviction.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 3 or queries.shape[0] != state.heads or queries.shape[2] != state.head_dim:
        raise ShapeError(
            f"expected [{state.heads}, tokens, {state.head_dim}], got {queries.shape}"
        )
    tokens = queries.shape[1]
    if state.evicted_tokens == 0:
        return np.zeros((tokens, state.model_dim))
    fq = state.feature_map(queries)
    per_head = []
    for h in range(state.heads):
        num = apply_rope(fq[h], t_index, s_indices, rope_cfg) @ state.L[h]
        den = fq[h] @ state.H[h] + eps_div
        per_head.append(num / den[:, None])
    concat = np.concatenate(per_head, axis=1)  # [tokens, model_dim]
    return concat @ state.projection
