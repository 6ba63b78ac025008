"""Block-sparse attention tests: pooled scores, masks, online softmax."""

import numpy as np
import pytest

from hybridstream.errors import ContractViolationError, ShapeError
from hybridstream.numerics import SeededRng, softmax_rows
from hybridstream.sparse_local import (
    BlockConfig,
    BlockMask,
    block_scores,
    build_mask,
    pad_to_block,
    sparse_attention,
)


def masked_dense_oracle(q, k, v, mask, scale):
    """Dense attention with -inf scores on inactive blocks."""
    t_m, t_n = mask.shape
    b_q = q.shape[0] // t_m
    b_kv = k.shape[0] // t_n
    s = (q @ k.T) * scale
    for i in range(t_m):
        for j in range(t_n):
            if not mask.active[i, j]:
                s[i * b_q:(i + 1) * b_q, j * b_kv:(j + 1) * b_kv] = -np.inf
    return softmax_rows(s) @ v


def random_qkv(seed, n_q=16, n_kv=32, d=8):
    rng = SeededRng(seed)
    return rng.normal((n_q, d)), rng.normal((n_kv, d)), rng.normal((n_kv, d))


class TestBlockScores:
    def test_identical_key_blocks_give_constant_rows(self):
        rng = SeededRng(0)
        q = rng.normal((8, 4))
        kb = rng.normal((4, 4))
        k = np.concatenate([kb, kb, kb], axis=0)
        scores = block_scores(q, k, BlockConfig(4, 4, 0.5))
        assert np.abs(scores - scores[:, :1]).max() < 1e-12

    def test_all_ones_blocks_score_is_dim(self):
        d = 6
        q = np.ones((4, d))
        k = np.ones((4, d))
        scores = block_scores(q, k, BlockConfig(4, 4, 1.0))
        assert scores.shape == (1, 1)
        assert abs(scores[0, 0] - d) < 1e-12

    def test_matches_per_token_mean_oracle(self):
        q, k, _ = random_qkv(1)
        cfg = BlockConfig(4, 8, 0.5)
        scores = block_scores(q, k, cfg)
        t_m, t_n = scores.shape
        for i in range(t_m):
            qi = q[i * 4:(i + 1) * 4].mean(axis=0)
            for j in range(t_n):
                kj = k[j * 8:(j + 1) * 8].mean(axis=0)
                assert abs(scores[i, j] - qi @ kj) < 1e-12

    def test_indivisible_tokens_rejected(self):
        with pytest.raises(ShapeError):
            block_scores(np.zeros((5, 4)), np.zeros((8, 4)), BlockConfig(4, 4, 1.0))


class TestBuildMask:
    def test_dense_limit(self):
        scores = SeededRng(2).normal((3, 5))
        mask = build_mask(scores, BlockConfig(1, 1, 1.0))
        assert mask.active.all()

    def test_argsort_oracle(self):
        scores = np.array([[3.0, 1.0, 2.0, 0.0]])
        mask = build_mask(scores, BlockConfig(1, 1, 0.5))  # quota ceil(0.5*4)=2
        assert set(np.flatnonzero(mask.active[0])) == {0, 2}

    def test_tie_break_by_lower_index(self):
        scores = np.zeros((2, 4))
        mask = build_mask(scores, BlockConfig(1, 1, 0.5))
        for row in mask.active:
            assert set(np.flatnonzero(row)) == {0, 1}

    def test_forced_blocks_always_active(self):
        scores = np.array([[10.0, 9.0, 8.0, -5.0]])
        mask = build_mask(scores, BlockConfig(1, 1, 0.25, frozenset({3})))
        assert mask.active[0, 3]

    def test_quota_is_max_of_forced_and_ratio(self):
        scores = SeededRng(3).normal((4, 10))
        forced = frozenset({0, 1, 2, 3})
        mask = build_mask(scores, BlockConfig(1, 1, 0.2, forced))  # ceil(2) < 4 forced
        assert (mask.active.sum(axis=1) == 4).all()
        mask2 = build_mask(scores, BlockConfig(1, 1, 0.8, forced))  # ceil(8) > forced
        assert (mask2.active.sum(axis=1) == 8).all()

    def test_deterministic(self):
        scores = SeededRng(4).normal((6, 12))
        cfg = BlockConfig(1, 1, 0.3, frozenset({5}))
        a = build_mask(scores, cfg)
        b = build_mask(scores, cfg)
        assert np.array_equal(a.active, b.active)

    def test_every_row_nonempty(self):
        scores = SeededRng(5).normal((8, 3))
        mask = build_mask(scores, BlockConfig(1, 1, 0.01))
        assert mask.active.any(axis=1).all()

    def test_empty_row_mask_rejected(self):
        with pytest.raises(ContractViolationError):
            BlockMask(np.zeros((2, 3), dtype=bool))


class TestSparseAttention:
    def test_dense_limit_equals_plain_softmax(self):
        q, k, v = random_qkv(6)
        mask = build_mask(block_scores(q, k, BlockConfig(4, 4, 1.0)), BlockConfig(4, 4, 1.0))
        scale = 1.0 / np.sqrt(q.shape[1])
        got = sparse_attention(q, k, v, mask, scale)
        want = softmax_rows((q @ k.T) * scale) @ v
        assert np.abs(got - want).max() < 1e-6

    def test_single_active_block_matches_restricted_softmax(self):
        q, k, v = random_qkv(7, n_q=4, n_kv=16, d=8)
        active = np.zeros((1, 4), dtype=bool)
        active[0, 2] = True
        scale = 1.0 / np.sqrt(8)
        got = sparse_attention(q, k, v, BlockMask(active), scale)
        want = softmax_rows((q @ k[8:12].T) * scale) @ v[8:12]
        assert np.abs(got - want).max() < 1e-9

    def test_matches_masked_dense_oracle_random(self):
        rng = np.random.default_rng(8)
        for trial in range(25):
            t_m, t_n = rng.integers(1, 9), rng.integers(1, 9)
            b = int(rng.integers(1, 5))
            q, k, v = random_qkv(100 + trial, n_q=t_m * b, n_kv=t_n * b, d=8)
            active = rng.random((t_m, t_n)) < 0.5
            for i in range(t_m):
                if not active[i].any():
                    active[i, rng.integers(t_n)] = True
            mask = BlockMask(active)
            scale = 1.0 / np.sqrt(8)
            got = sparse_attention(q, k, v, mask, scale)
            want = masked_dense_oracle(q, k, v, mask, scale)
            assert np.abs(got - want).max() < 1e-6

    def test_visit_order_invariance(self):
        q, k, v = random_qkv(9, n_q=8, n_kv=24, d=8)
        cfg = BlockConfig(4, 4, 0.67)
        mask = build_mask(block_scores(q, k, cfg), cfg)
        base = sparse_attention(q, k, v, mask)
        rng = np.random.default_rng(10)
        for _ in range(5):
            order = rng.permutation(mask.shape[1])
            assert np.abs(sparse_attention(q, k, v, mask, visit_order=order) - base).max() < 1e-9

    def test_outputs_in_convex_hull_of_active_values(self):
        # 1-D values: every output must lie between the min and max of the
        # values in that query row's active blocks
        rng = np.random.default_rng(11)
        q, k, _ = random_qkv(12, n_q=8, n_kv=16, d=8)
        v = rng.standard_normal((16, 1))
        active = rng.random((2, 4)) < 0.6
        for i in range(2):
            if not active[i].any():
                active[i, 0] = True
        mask = BlockMask(active)
        out = sparse_attention(q, k, v, mask)
        for i in range(2):
            vals = np.concatenate([v[j * 4:(j + 1) * 4, 0] for j in np.flatnonzero(active[i])])
            rows = out[i * 4:(i + 1) * 4, 0]
            assert (rows >= vals.min() - 1e-12).all()
            assert (rows <= vals.max() + 1e-12).all()

    def test_score_eval_count_is_exact(self):
        class Counter:
            score_evals = 0

        q, k, v = random_qkv(13, n_q=8, n_kv=24, d=8)
        cfg = BlockConfig(4, 4, 0.34)
        mask = build_mask(block_scores(q, k, cfg), cfg)
        c = Counter()
        sparse_attention(q, k, v, mask, counters=c)
        assert c.score_evals == mask.active_count() * 4 * 4

    def test_padded_keys_masked_out(self):
        q, k, v = random_qkv(14, n_q=4, n_kv=12, d=8)
        k_pad, n_valid = pad_to_block(k[:10], 4)
        v_pad, _ = pad_to_block(v[:10], 4)
        mask = BlockMask(np.ones((1, 3), dtype=bool))
        got = sparse_attention(q, k_pad, v_pad, mask, valid_kv=n_valid)
        scale = 1.0 / np.sqrt(8)
        want = softmax_rows((q @ k[:10].T) * scale) @ v[:10]
        assert np.abs(got - want).max() < 1e-9

    def test_zero_active_row_rejected(self):
        q, k, v = random_qkv(15, n_q=4, n_kv=4, d=8)
        bad = BlockMask(np.ones((1, 1), dtype=bool))
        bad.active[0, 0] = False  # smuggle past the constructor
        with pytest.raises(ContractViolationError):
            sparse_attention(q, k, v, bad)
