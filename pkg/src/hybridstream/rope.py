"""Rotary position embedding with a capped temporal axis.

Head channels are split into 2-D rotation pairs assigned to two factorized
axes: a temporal axis shared by every token of a chunk, and a spatial axis
carrying each token's position inside the chunk. Temporal indices saturate
at `max_temporal_index` so arbitrarily long streams keep a bounded index
range; spatial indices are never capped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, ShapeError


@dataclass(frozen=True)
class RoPEConfig:
    head_dim: int
    temporal_dims: int  # rotation pairs on the temporal axis
    spatial_dims: int   # rotation pairs on the spatial axis
    base_theta: float = 10000.0
    max_temporal_index: int = 21

    def __post_init__(self):
        if 2 * (self.temporal_dims + self.spatial_dims) != self.head_dim:
            raise ShapeError(
                f"head_dim {self.head_dim} != 2 * ({self.temporal_dims} + {self.spatial_dims})"
            )
        if self.temporal_dims < 0 or self.spatial_dims < 0:
            raise ShapeError("rotation pair counts must be >= 0")
        if self.max_temporal_index < 1:
            raise ValueError("max_temporal_index must be >= 1")
        if self.base_theta <= 1.0:
            raise ValueError("base_theta must exceed 1")

    @classmethod
    def half_split(cls, head_dim: int, base_theta: float = 10000.0,
                   max_temporal_index: int = 21) -> "RoPEConfig":
        """Even temporal/spatial split of the rotation pairs."""
        if head_dim % 4 != 0:
            raise ShapeError(f"half_split needs head_dim divisible by 4, got {head_dim}")
        pairs = head_dim // 4
        return cls(head_dim, pairs, pairs, base_theta, max_temporal_index)


def temporal_index(chunk_pos: int, config: RoPEConfig) -> int:
    """Capped temporal position: min(chunk_pos, max_temporal_index)."""
    if chunk_pos < 0:
        raise ValueError(f"chunk_pos must be >= 0, got {chunk_pos}")
    return min(int(chunk_pos), config.max_temporal_index)


def _axis_freqs(pairs: int, base_theta: float) -> np.ndarray:
    # Pair k rotates at angle index / base_theta ** (2k / axis_dim),
    # axis_dim being the channel count (2 * pairs) assigned to the axis.
    k = np.arange(pairs, dtype=np.float64)
    return base_theta ** (-2.0 * k / (2.0 * pairs))


def apply_rope(x: np.ndarray, t_index: int, s_indices, config: RoPEConfig) -> np.ndarray:
    """Rotate each token's pairs: temporal pairs by the shared capped index,
    spatial pairs by that token's own (uncapped) spatial index.

    x: [tokens, head_dim]; channels [0 : 2*temporal_dims] hold the temporal
    pairs as (even, odd) lanes, the remainder the spatial pairs. Rotations
    preserve per-token norms exactly (up to rounding).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.head_dim:
        raise ShapeError(f"expected [tokens, {config.head_dim}], got {x.shape}")
    if t_index > config.max_temporal_index:
        raise ContractViolationError(
            f"temporal index {t_index} exceeds cap {config.max_temporal_index}; "
            "callers must saturate with temporal_index() first"
        )
    tokens = x.shape[0]
    s = np.zeros(tokens, dtype=np.float64) if s_indices is None else np.asarray(
        s_indices, dtype=np.float64
    )
    if s.shape != (tokens,):
        raise ShapeError(f"s_indices must have shape ({tokens},), got {s.shape}")

    out = x.copy()
    if config.temporal_dims > 0:
        freqs = _axis_freqs(config.temporal_dims, config.base_theta)
        ang = float(t_index) * freqs  # [pairs], shared by all tokens
        cos, sin = np.cos(ang), np.sin(ang)
        seg = out[:, : 2 * config.temporal_dims]
        even, odd = seg[:, 0::2].copy(), seg[:, 1::2].copy()
        seg[:, 0::2] = even * cos - odd * sin
        seg[:, 1::2] = even * sin + odd * cos
    if config.spatial_dims > 0:
        freqs = _axis_freqs(config.spatial_dims, config.base_theta)
        ang = s[:, None] * freqs[None, :]  # [tokens, pairs]
        cos, sin = np.cos(ang), np.sin(ang)
        seg = out[:, 2 * config.temporal_dims:]
        even, odd = seg[:, 0::2].copy(), seg[:, 1::2].copy()
        seg[:, 0::2] = even * cos - odd * sin
        seg[:, 1::2] = even * sin + odd * cos
    return out
