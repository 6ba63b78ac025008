"""Streaming generation engine.

Per layer, attention over a chunk is the elementwise sum of two pathways:
block-sparse attention over the visible cache window (plus the chunk's own
keys) and the compressed linear-history readout. A small seeded-random
transformer ("toy denoiser") drives the few-step autoregressive loop:
initialize a chunk from noise, denoise through a descending timestep
schedule with re-noising between steps, emit the final clean prediction,
cache its keys/values through a dedicated pass at t=0, and absorb whatever
the rolling window evicts into the linear state.

A dense full-history oracle with the same rotation policy is provided for
equivalence testing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError
from .linear_history import LinearState, absorb_evicted, history_output
from .numerics import SeededRng
from .rope import RoPEConfig, apply_rope, temporal_index
from .sparse_local import BlockConfig, block_scores, build_mask, sparse_attention
from .stream_cache import ChunkKV, RollingCache

_WEIGHT_STREAM = 1
_NOISE_STREAM = 2


@dataclass
class OpCounters:
    """Exact work counters, independent of wall-clock noise."""

    score_evals: int = 0     # entries of S = q k^T computed in attention
    pooled_scores: int = 0   # entries of the block-importance matrix

    def snapshot(self) -> tuple[int, int]:
        return self.score_evals, self.pooled_scores


@dataclass(frozen=True)
class NoiseSchedule:
    """Interpolation coefficients x_t = alpha(t) x0 + beta(t) eps, t in [0, 1]."""

    alpha: Callable[[np.ndarray], np.ndarray]
    beta: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        for t, a_want, b_want in ((0.0, 1.0, 0.0), (1.0, 0.0, 1.0)):
            a, b = float(self.alpha(t)), float(self.beta(t))
            if abs(a - a_want) > 1e-12 or abs(b - b_want) > 1e-12:
                raise ValueError(
                    f"schedule endpoints wrong at t={t}: alpha={a}, beta={b}"
                )

    @classmethod
    def rectified_flow(cls) -> "NoiseSchedule":
        return cls(alpha=lambda t: 1.0 - np.asarray(t, dtype=np.float64),
                   beta=lambda t: np.asarray(t, dtype=np.float64) + 0.0)


@dataclass(frozen=True)
class StreamConfig:
    frames_per_chunk: int = 3
    window_frames: int = 9
    sink_chunks: int = 1
    tokens_per_frame: int = 16
    model_dim: int = 32
    heads: int = 2
    head_dim: int = 16
    layers: int = 2
    keep_ratio: float = 0.2
    max_temporal_index: int = 21
    base_theta: float = 10000.0
    denoise_timesteps: tuple = (1.0, 0.75, 0.5, 0.25)
    seed: int = 0
    linear_history: bool = True  # absorb evicted chunks; off = plain drop

    def __post_init__(self):
        if self.model_dim != self.heads * self.head_dim:
            raise ShapeError(
                f"model_dim {self.model_dim} != heads {self.heads} x head_dim {self.head_dim}"
            )
        if self.window_frames % self.frames_per_chunk != 0:
            raise ValueError("window_frames must be divisible by frames_per_chunk")
        ts = self.denoise_timesteps
        if not ts or any(not (0.0 < t <= 1.0) for t in ts):
            raise ValueError("timesteps must lie in (0, 1]")
        if any(ts[i] <= ts[i + 1] for i in range(len(ts) - 1)):
            raise ValueError("timesteps must be strictly descending")

    @property
    def chunk_tokens(self) -> int:
        return self.frames_per_chunk * self.tokens_per_frame

    @property
    def capacity_chunks(self) -> int:
        return self.window_frames // self.frames_per_chunk

    @property
    def blocks_per_chunk(self) -> int:
        # one frame per block keeps forced-sink semantics exact
        return self.frames_per_chunk

    @property
    def block_tokens(self) -> int:
        return self.tokens_per_frame

    def rope_config(self) -> RoPEConfig:
        return RoPEConfig.half_split(self.head_dim, self.base_theta,
                                     self.max_temporal_index)


# Baseline configurations for relative-cost comparisons. "dense21" is plain
# dense sliding-window attention with a 21-frame window and no sink, no
# sparsity, no history state.
BENCH_MODES = {
    "dense21": dict(window_frames=21, sink_chunks=0, keep_ratio=1.0, linear_history=False),
    "swa": dict(sink_chunks=0, keep_ratio=1.0, linear_history=False),
    "swa_sink": dict(keep_ratio=1.0, linear_history=False),
    "hybrid": dict(),
}


def config_for_mode(mode: str, base: StreamConfig) -> StreamConfig:
    if mode not in BENCH_MODES:
        raise ValueError(f"unknown mode {mode!r}; pick one of {sorted(BENCH_MODES)}")
    return replace(base, **BENCH_MODES[mode])


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _chunk_spatial_indices(cfg: StreamConfig) -> np.ndarray:
    # every chunk reuses the same within-chunk positions on the uncapped axis
    return np.arange(cfg.chunk_tokens, dtype=np.float64)


def hybrid_attention(
    q: np.ndarray,
    k_self: np.ndarray,
    v_self: np.ndarray,
    cache: RollingCache,
    layer: int,
    cfg: StreamConfig,
    query_chunk_index: int,
    counters: OpCounters | None = None,
) -> np.ndarray:
    """One layer of hybrid attention for one chunk.

    q, k_self, v_self: unrotated per-head tensors [heads, chunk_tokens,
    head_dim] for the chunk being generated. Keys from the cache and from
    the chunk itself are rotated at their relative temporal indices; sink
    blocks and the chunk's own blocks are always kept active in the mask.
    Returns [chunk_tokens, model_dim]: sparse local output plus the
    history readout, summed elementwise.
    """
    rope_cfg = cfg.rope_config()
    s_idx = _chunk_spatial_indices(cfg)
    q_index = temporal_index(query_chunk_index, rope_cfg)
    visible = cache.visible_kv(query_chunk_index)
    bpc = cfg.blocks_per_chunk

    forced = set()
    for pos, (entry, _) in enumerate(visible):
        if entry.is_sink:
            forced.update(range(pos * bpc, (pos + 1) * bpc))
    self_pos = len(visible)
    forced.update(range(self_pos * bpc, (self_pos + 1) * bpc))
    bcfg = BlockConfig(cfg.block_tokens, cfg.block_tokens, cfg.keep_ratio,
                       frozenset(forced))

    head_outputs = []
    for h in range(cfg.heads):
        k_parts = [apply_rope(e.keys[layer, h], rel, s_idx, rope_cfg) for e, rel in visible]
        k_parts.append(apply_rope(k_self[h], q_index, s_idx, rope_cfg))
        v_parts = [e.values[layer, h] for e, _ in visible]
        v_parts.append(v_self[h])
        k_full = np.concatenate(k_parts, axis=0)
        v_full = np.concatenate(v_parts, axis=0)
        q_rot = apply_rope(q[h], q_index, s_idx, rope_cfg)

        scores = block_scores(q_rot, k_full, bcfg)
        if counters is not None:
            counters.pooled_scores += scores.size
        mask = build_mask(scores, bcfg)
        head_outputs.append(
            sparse_attention(q_rot, k_full, v_full, mask,
                             scale=1.0 / math.sqrt(cfg.head_dim), counters=counters)
        )
    local = np.concatenate(head_outputs, axis=1)

    if layer < len(cache.linear_states):
        hist = history_output(cache.linear_states[layer], q, rope_cfg, q_index, s_idx)
    else:
        hist = np.zeros_like(local)
    return local + hist


def dense_oracle_attention(
    q: np.ndarray,
    k_self: np.ndarray,
    v_self: np.ndarray,
    history: Sequence[ChunkKV],
    layer: int,
    cfg: StreamConfig,
    query_chunk_index: int,
) -> np.ndarray:
    """Exact softmax attention over an arbitrary retained history (plus the
    chunk itself) under the same rotation policy. Test-scale only."""
    from .numerics import softmax_rows
    from .stream_cache import relative_temporal_index

    rope_cfg = cfg.rope_config()
    s_idx = _chunk_spatial_indices(cfg)
    q_index = temporal_index(query_chunk_index, rope_cfg)
    outs = []
    for h in range(cfg.heads):
        k_parts = [
            apply_rope(e.keys[layer, h],
                       relative_temporal_index(query_chunk_index, e.chunk_index,
                                               cfg.max_temporal_index),
                       s_idx, rope_cfg)
            for e in history
        ]
        k_parts.append(apply_rope(k_self[h], q_index, s_idx, rope_cfg))
        v_parts = [e.values[layer, h] for e in history] + [v_self[h]]
        k_full = np.concatenate(k_parts, axis=0)
        v_full = np.concatenate(v_parts, axis=0)
        q_rot = apply_rope(q[h], q_index, s_idx, rope_cfg)
        probs = softmax_rows((q_rot @ k_full.T) / math.sqrt(cfg.head_dim))
        outs.append(probs @ v_full)
    return np.concatenate(outs, axis=1)


class ToyDenoiser:
    """Fixed-weight residual transformer used as the streaming fixture.

    Weights are drawn from the seeded RNG (stream 1 of the config seed) and
    scaled by 1/sqrt(fan_in); the timestep embedding table has one row per
    schedule entry plus a final row for the t=0 cache pass, scaled by 0.1.
    Forward passes are deterministic and never mutate the cache.
    """

    def __init__(self, cfg: StreamConfig):
        self.cfg = cfg
        rng = SeededRng(cfg.seed).derive(_WEIGHT_STREAM)
        d = cfg.model_dim
        hidden = 4 * d
        self.layers = []
        for _ in range(cfg.layers):
            self.layers.append({
                "wq": rng.normal((d, d)) / math.sqrt(d),
                "wk": rng.normal((d, d)) / math.sqrt(d),
                "wv": rng.normal((d, d)) / math.sqrt(d),
                "wo": rng.normal((d, d)) / math.sqrt(d),
                "w1": rng.normal((d, hidden)) / math.sqrt(d),
                "w2": rng.normal((hidden, d)) / math.sqrt(hidden),
                "history_proj": rng.normal((d, d)) / math.sqrt(d),
            })
        self.time_table = rng.normal((len(cfg.denoise_timesteps) + 1, d)) * 0.1

    def new_cache(self) -> RollingCache:
        states = [
            LinearState.zeros(self.cfg.heads, self.cfg.head_dim,
                              layer["history_proj"])
            for layer in self.layers
        ]
        return RollingCache(self.cfg.capacity_chunks, self.cfg.sink_chunks,
                            self.cfg.max_temporal_index, states)

    def _time_row(self, t: float) -> np.ndarray:
        ts = self.cfg.denoise_timesteps
        if t == 0.0:
            return self.time_table[len(ts)]
        for i, known in enumerate(ts):
            if t == known:
                return self.time_table[i]
        raise ValueError(f"timestep {t} not in schedule {ts}")

    def _split_heads(self, x: np.ndarray) -> np.ndarray:
        tokens = x.shape[0]
        return x.reshape(tokens, self.cfg.heads, self.cfg.head_dim).transpose(1, 0, 2)

    def forward(
        self,
        x: np.ndarray,
        t: float,
        cache: RollingCache,
        query_chunk_index: int,
        counters: OpCounters | None = None,
    ) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
        """One pass over a chunk. Returns (prediction, per-layer (k, v))."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.cfg.chunk_tokens, self.cfg.model_dim):
            raise ShapeError(
                f"expected [{self.cfg.chunk_tokens}, {self.cfg.model_dim}], got {x.shape}"
            )
        h = x + self._time_row(t)[None, :]
        layer_kvs = []
        for layer_idx, w in enumerate(self.layers):
            a = _layer_norm(h)
            q = self._split_heads(a @ w["wq"])
            k = self._split_heads(a @ w["wk"])
            v = self._split_heads(a @ w["wv"])
            layer_kvs.append((k, v))
            attn = hybrid_attention(q, k, v, cache, layer_idx, self.cfg,
                                    query_chunk_index, counters)
            h = h + attn @ w["wo"]
            m = _layer_norm(h)
            h = h + _gelu(m @ w["w1"]) @ w["w2"]
        return h, layer_kvs

    def denoise_chunk(self, x_t: np.ndarray, t: float, cache: RollingCache,
                      query_chunk_index: int,
                      counters: OpCounters | None = None) -> np.ndarray:
        return self.forward(x_t, t, cache, query_chunk_index, counters)[0]

    def compute_chunk_kv(self, x0: np.ndarray, cache: RollingCache,
                         chunk_index: int,
                         counters: OpCounters | None = None) -> ChunkKV:
        """Dedicated t=0 pass over the emitted chunk, collecting the keys and
        values that actually get cached."""
        _, layer_kvs = self.forward(x0, 0.0, cache, chunk_index, counters)
        keys = np.stack([kv[0] for kv in layer_kvs])
        values = np.stack([kv[1] for kv in layer_kvs])
        return ChunkKV(chunk_index, keys, values,
                       is_sink=chunk_index < self.cfg.sink_chunks)


@dataclass
class StreamResult:
    latents: list
    chunk_ms: np.ndarray
    chunk_score_evals: np.ndarray
    chunk_pooled_scores: np.ndarray
    peak_cached_tokens: int
    max_relative_index_seen: int
    config: StreamConfig
    final_cache: RollingCache


def run_stream(cfg: StreamConfig, num_chunks: int,
               model: ToyDenoiser | None = None) -> StreamResult:
    """Full autoregressive loop with per-chunk instrumentation.

    Per chunk: start from fresh noise at the first (largest) timestep,
    denoise down the schedule re-noising between steps, emit the final
    prediction, run the t=0 cache pass, then append to the window and
    absorb any eviction into the linear states (when enabled).
    """
    if num_chunks < 1:
        raise ValueError("num_chunks must be >= 1")
    model = model or ToyDenoiser(cfg)
    cache = model.new_cache()
    schedule = NoiseSchedule.rectified_flow()
    noise_rng = SeededRng(cfg.seed).derive(_NOISE_STREAM)
    rope_cfg = cfg.rope_config()
    s_idx = _chunk_spatial_indices(cfg)
    ts = cfg.denoise_timesteps

    latents = []
    chunk_ms = np.zeros(num_chunks)
    chunk_scores = np.zeros(num_chunks, dtype=np.int64)
    chunk_pooled = np.zeros(num_chunks, dtype=np.int64)
    peak_tokens = 0
    max_rel_seen = 0

    for i in range(num_chunks):
        counters = OpCounters()
        start = time.perf_counter()
        x = noise_rng.normal((cfg.chunk_tokens, cfg.model_dim))
        x0 = x
        for j, t in enumerate(ts):
            x0 = model.denoise_chunk(x, t, cache, i, counters)
            if j + 1 < len(ts):
                eps = noise_rng.normal((cfg.chunk_tokens, cfg.model_dim))
                t_next = ts[j + 1]
                x = float(schedule.alpha(t_next)) * x0 + float(schedule.beta(t_next)) * eps
        kv = model.compute_chunk_kv(x0, cache, i, counters)
        evicted = cache.append(kv)
        if evicted is not None and cfg.linear_history:
            for layer_idx, state in enumerate(cache.linear_states):
                absorb_evicted(state, evicted.keys[layer_idx],
                               evicted.values[layer_idx], rope_cfg,
                               t_index=0, s_indices=s_idx)
        chunk_ms[i] = (time.perf_counter() - start) * 1e3
        chunk_scores[i], chunk_pooled[i] = counters.snapshot()
        peak_tokens = max(peak_tokens, cache.total_cached_tokens)
        for _, rel in cache.visible_kv(i):
            max_rel_seen = max(max_rel_seen, rel)
        latents.append(x0)

    return StreamResult(latents, chunk_ms, chunk_scores, chunk_pooled,
                        peak_tokens, max_rel_seen, cfg, cache)


def generate_stream(cfg: StreamConfig, num_chunks: int) -> list:
    """Latent sequence only; see run_stream for instrumentation."""
    return run_stream(cfg, num_chunks).latents
