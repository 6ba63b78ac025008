"""Rolling cache tests: FIFO eviction, sink pinning, capped relative
indices, snapshot round trips."""

import numpy as np
import pytest

from hybridstream.errors import FormatError, SequenceError
from hybridstream.linear_history import LinearState, absorb_evicted
from hybridstream.numerics import SeededRng
from hybridstream.rope import RoPEConfig
from hybridstream.stream_cache import ChunkKV, RollingCache, relative_temporal_index

LAYERS, HEADS, TOKENS, HEAD_DIM = 2, 2, 6, 8
CAP = 21


def make_kv(idx, sink=False, seed=None):
    rng = SeededRng(1000 + idx if seed is None else seed)
    return ChunkKV(idx, rng.normal((LAYERS, HEADS, TOKENS, HEAD_DIM)),
                   rng.normal((LAYERS, HEADS, TOKENS, HEAD_DIM)), sink)


def fill(cache, n):
    evicted = []
    for i in range(n):
        out = cache.append(make_kv(i, sink=i < cache.sink_chunks))
        if out is not None:
            evicted.append(out)
    return evicted


class TestAppendEviction:
    def test_fifo_without_sink(self):
        cache = RollingCache(3, 0, CAP)
        for i in range(3):
            assert cache.append(make_kv(i)) is None
        evicted = cache.append(make_kv(3))
        assert evicted is not None and evicted.chunk_index == 0
        assert [e.chunk_index for e in cache.window_entries] == [1, 2, 3]

    def test_sink_never_evicted(self):
        cache = RollingCache(3, 1, CAP)
        evicted = fill(cache, 6)
        assert [e.chunk_index for e in cache.sink_entries] == [0]
        assert [e.chunk_index for e in cache.window_entries] == [3, 4, 5]
        assert [e.chunk_index for e in evicted] == [1, 2]

    def test_eviction_sequence_enumeration(self):
        cache = RollingCache(3, 1, CAP)
        evictions = []
        for i in range(12):
            out = cache.append(make_kv(i, sink=i == 0))
            evictions.append(None if out is None else out.chunk_index)
        assert evictions == [None, None, None, None, 1, 2, 3, 4, 5, 6, 7, 8]

    def test_non_consecutive_rejected(self):
        cache = RollingCache(3, 0, CAP)
        cache.append(make_kv(0))
        with pytest.raises(SequenceError):
            cache.append(make_kv(2))

    def test_sink_flag_mismatch_rejected(self):
        cache = RollingCache(3, 1, CAP)
        with pytest.raises(ValueError):
            cache.append(make_kv(0, sink=False))

    def test_memory_bound_for_any_stream_length(self):
        for n in [1, 3, 4, 10, 50]:
            cache = RollingCache(3, 1, CAP)
            fill(cache, n)
            want = (min(1, n) + min(max(n - 1, 0), 3)) * TOKENS
            assert cache.total_cached_tokens == want

    def test_evicted_and_visible_partition_all_chunks(self):
        cache = RollingCache(3, 1, CAP)
        evicted = fill(cache, 30)
        evicted_ids = {e.chunk_index for e in evicted}
        visible_ids = {e.chunk_index for e in cache.entries()}
        assert evicted_ids & visible_ids == set()
        assert evicted_ids | visible_ids == set(range(30))


class TestRelativeIndices:
    def test_stream_start_identity(self):
        cache = RollingCache(3, 0, CAP)
        cache.append(make_kv(0))
        [(entry, rel)] = cache.visible_kv(0)
        assert entry.chunk_index == 0 and rel == 0

    def test_saturated_query_maps_to_cap(self):
        assert relative_temporal_index(500, 500, CAP) == CAP
        for dist in (1, 2, 3):
            rel = relative_temporal_index(500, 500 - dist, CAP)
            assert rel == CAP - dist
            assert 0 <= rel <= CAP

    def test_shift_invariance_once_saturated(self):
        for q1, q2 in [(100, 500), (22, 1000)]:
            pat1 = [relative_temporal_index(q1, q1 - d, CAP) for d in range(4)]
            pat2 = [relative_temporal_index(q2, q2 - d, CAP) for d in range(4)]
            assert pat1 == pat2

    def test_unsaturated_indices_are_absolute_positions(self):
        for q in range(CAP + 1):
            for e in range(q + 1):
                assert relative_temporal_index(q, e, CAP) == e

    def test_sink_pins_to_zero_beyond_cap(self):
        for q in [CAP, CAP + 1, 100, 10_000]:
            assert relative_temporal_index(q, 0, CAP) == 0

    def test_indices_capped_for_long_streams(self):
        cache = RollingCache(3, 1, CAP)
        fill(cache, 1200)
        rels = [rel for _, rel in cache.visible_kv(1199)]
        assert all(0 <= r <= CAP for r in rels)
        assert rels == sorted(rels)  # non-decreasing in entry order

    def test_entry_newer_than_query_rejected(self):
        with pytest.raises(ValueError):
            relative_temporal_index(3, 4, CAP)


def make_states(rope_cfg, seed=5):
    rng = SeededRng(seed)
    model_dim = HEADS * HEAD_DIM
    states = []
    for _ in range(LAYERS):
        proj = rng.normal((model_dim, model_dim)) / np.sqrt(model_dim)
        states.append(LinearState.zeros(HEADS, HEAD_DIM, proj))
    return states


class TestSnapshot:
    def build_cache(self, chunks):
        rope_cfg = RoPEConfig.half_split(HEAD_DIM, max_temporal_index=CAP)
        cache = RollingCache(3, 1, CAP, make_states(rope_cfg))
        for i in range(chunks):
            evicted = cache.append(make_kv(i, sink=i == 0))
            if evicted is not None:
                for l, state in enumerate(cache.linear_states):
                    absorb_evicted(state, evicted.keys[l], evicted.values[l],
                                   rope_cfg, s_indices=np.arange(float(TOKENS)))
        return cache

    def test_round_trip_preserves_visible_kv(self):
        cache = self.build_cache(7)
        restored = RollingCache.restore(cache.snapshot())
        got = restored.visible_kv(6)
        want = cache.visible_kv(6)
        assert len(got) == len(want)
        for (e1, r1), (e2, r2) in zip(want, got):
            assert r1 == r2 and e1.chunk_index == e2.chunk_index
            assert np.array_equal(e1.keys, e2.keys)
            assert np.array_equal(e1.values, e2.values)

    def test_round_trip_preserves_linear_state_exactly(self):
        cache = self.build_cache(9)
        restored = RollingCache.restore(cache.snapshot())
        for s1, s2 in zip(cache.linear_states, restored.linear_states):
            assert np.array_equal(s1.L, s2.L)
            assert np.array_equal(s1.H, s2.H)
            assert np.array_equal(s1.projection, s2.projection)
            assert s1.evicted_tokens == s2.evicted_tokens

    def test_restored_cache_keeps_streaming(self):
        cache = self.build_cache(7)
        restored = RollingCache.restore(cache.snapshot())
        evicted = restored.append(make_kv(7))
        assert evicted is not None and evicted.chunk_index == 4

    def test_truncated_snapshot_rejected(self):
        blob = self.build_cache(5).snapshot()
        with pytest.raises(FormatError):
            RollingCache.restore(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            RollingCache.restore(blob[:3])

    def test_corrupt_manifest_rejected(self):
        blob = bytearray(self.build_cache(5).snapshot())
        blob[8] ^= 0xFF  # flip a manifest byte
        with pytest.raises(FormatError):
            RollingCache.restore(bytes(blob))

    def test_snapshot_size_constant_in_stream_length(self):
        import struct

        short = self.build_cache(10).snapshot()
        long = self.build_cache(100).snapshot()
        # the tensor payload is byte-for-byte the same size; only the JSON
        # manifest may drift by a few digits of chunk index
        payload_short = len(short) - struct.unpack("<I", short[:4])[0]
        payload_long = len(long) - struct.unpack("<I", long[:4])[0]
        assert payload_short == payload_long
        assert abs(len(short) - len(long)) < 64
