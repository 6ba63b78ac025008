"""Rolling per-chunk KV cache with pinned sink entries and eviction.

Sink chunks (the configured first chunks of a stream) live outside the
ring and are never evicted; window entries are FIFO with a fixed chunk
capacity. Evicted entries are returned to the caller, which routes them
into the attached linear states. Entries store unrotated keys; rotation
happens at attention time from each entry's current relative temporal
index, so cached content never needs re-rotation as the window slides.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import FormatError, SequenceError, ShapeError
from .linear_history import FeatureMap, LinearState

_SNAPSHOT_VERSION = 1


@dataclass
class ChunkKV:
    """Per-layer, per-head keys/values for one chunk of frames."""

    chunk_index: int
    keys: np.ndarray    # [layers, heads, chunk_tokens, head_dim], unrotated
    values: np.ndarray  # same shape
    is_sink: bool = False

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.keys.ndim != 4:
            raise ShapeError(f"keys must be [layers, heads, tokens, head_dim], got {self.keys.shape}")
        if self.keys.shape != self.values.shape:
            raise ShapeError(f"keys {self.keys.shape} and values {self.values.shape} differ")

    @property
    def tokens(self) -> int:
        return self.keys.shape[2]


def relative_temporal_index(query_chunk_index: int, entry_chunk_index: int, cap: int) -> int:
    """Capped relative temporal position of a cached entry.

    Before saturation (query index <= cap) this is the entry's own absolute
    position; once the stream passes the cap, the querying chunk sits at
    `cap` and entries at distance d sit at cap - d, clamped at 0. The clamp
    is what pins a sink entry to the origin for arbitrarily long streams.
    """
    if entry_chunk_index > query_chunk_index:
        raise ValueError("entry newer than the querying chunk")
    distance = query_chunk_index - entry_chunk_index
    return max(0, min(query_chunk_index, cap) - distance)


class RollingCache:
    """FIFO chunk window plus pinned sinks plus per-layer linear states."""

    def __init__(
        self,
        capacity_chunks: int,
        sink_chunks: int,
        max_temporal_index: int,
        linear_states: list[LinearState] | None = None,
    ):
        if capacity_chunks < 1:
            raise ValueError("capacity_chunks must be >= 1")
        if sink_chunks < 0:
            raise ValueError("sink_chunks must be >= 0")
        self.capacity_chunks = capacity_chunks
        self.sink_chunks = sink_chunks
        self.max_temporal_index = max_temporal_index
        self.sink_entries: list[ChunkKV] = []
        self.window_entries: list[ChunkKV] = []
        self.linear_states: list[LinearState] = linear_states or []
        self._next_index = 0

    @property
    def next_index(self) -> int:
        return self._next_index

    @property
    def total_cached_tokens(self) -> int:
        return sum(e.tokens for e in self.sink_entries) + sum(
            e.tokens for e in self.window_entries
        )

    def append(self, kv: ChunkKV) -> ChunkKV | None:
        """Insert the next chunk; returns the evicted entry, if any.

        The caller owns routing the evicted entry into the linear states
        (absorb before the next attention call). Sink-range chunks go to the
        pinned list and never count against capacity.
        """
        if kv.chunk_index != self._next_index:
            raise SequenceError(
                f"expected chunk {self._next_index}, got {kv.chunk_index}"
            )
        expected_sink = kv.chunk_index < self.sink_chunks
        if kv.is_sink != expected_sink:
            raise ValueError(
                f"chunk {kv.chunk_index} sink flag {kv.is_sink} conflicts with "
                f"sink_chunks={self.sink_chunks}"
            )
        self._next_index += 1
        if expected_sink:
            self.sink_entries.append(kv)
            return None
        evicted = None
        if len(self.window_entries) == self.capacity_chunks:
            evicted = self.window_entries.pop(0)
        self.window_entries.append(kv)
        return evicted

    def entries(self) -> list[ChunkKV]:
        return list(self.sink_entries) + list(self.window_entries)

    def visible_kv(self, query_chunk_index: int) -> list[tuple[ChunkKV, int]]:
        """Sink + window entries paired with their capped relative temporal
        index for the given querying chunk, oldest first."""
        return [
            (e, relative_temporal_index(query_chunk_index, e.chunk_index,
                                        self.max_temporal_index))
            for e in self.entries()
        ]

    # -- snapshot / restore --------------------------------------------------

    def snapshot(self) -> bytes:
        entries = self.entries()
        manifest = {
            "version": _SNAPSHOT_VERSION,
            "capacity_chunks": self.capacity_chunks,
            "sink_chunks": self.sink_chunks,
            "max_temporal_index": self.max_temporal_index,
            "next_index": self._next_index,
            "entries": [
                {"chunk_index": e.chunk_index, "is_sink": e.is_sink} for e in entries
            ],
            "linear_states": [
                {
                    "evicted_tokens": s.evicted_tokens,
                    "feature_map": s.feature_map.value,
                }
                for s in self.linear_states
            ],
            "encoding": "f64-bit-split-pairs",
        }
        blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
        out = io.BytesIO()
        out.write(struct.pack("<I", len(blob)))
        out.write(blob)
        for e in entries:
            numerics.write_f64_tensor(out, e.keys)
            numerics.write_f64_tensor(out, e.values)
        for s in self.linear_states:
            s.to_stream(out)
        return out.getvalue()

    @classmethod
    def restore(cls, data: bytes) -> "RollingCache":
        f = io.BytesIO(data)
        head = f.read(4)
        if len(head) != 4:
            raise FormatError("snapshot shorter than its length prefix")
        (mlen,) = struct.unpack("<I", head)
        blob = f.read(mlen)
        if len(blob) != mlen:
            raise FormatError("snapshot manifest truncated")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"snapshot manifest is not valid JSON: {exc}") from exc
        if manifest.get("version") != _SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {manifest.get('version')!r}")

        cache = cls(
            capacity_chunks=manifest["capacity_chunks"],
            sink_chunks=manifest["sink_chunks"],
            max_temporal_index=manifest["max_temporal_index"],
        )
        for meta in manifest["entries"]:
            keys = numerics.read_f64_tensor(f)
            values = numerics.read_f64_tensor(f)
            kv = ChunkKV(meta["chunk_index"], keys, values, meta["is_sink"])
            if kv.is_sink:
                cache.sink_entries.append(kv)
            else:
                cache.window_entries.append(kv)
        for meta in manifest["linear_states"]:
            cache.linear_states.append(
                LinearState.from_stream(
                    f, meta["evicted_tokens"], FeatureMap(meta["feature_map"])
                )
            )
        if f.read(1):
            raise FormatError("trailing bytes after snapshot payload")
        cache._next_index = manifest["next_index"]
        return cache
