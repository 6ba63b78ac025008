#!/usr/bin/env python3
"""Block-sparse attention step by step: pool blocks into importance scores,
keep the top slice per query row (plus forced blocks), then run the online
softmax over only the active blocks and compare against dense attention.
"""

import numpy as np

from hybridstream import (
    BlockConfig,
    SeededRng,
    block_scores,
    build_mask,
    softmax_rows,
    sparse_attention,
)

rng = SeededRng(1)
BLOCK = 4
d = 8
q = rng.normal((2 * BLOCK, d))   # 2 query blocks
k = rng.normal((6 * BLOCK, d))   # 6 key blocks
v = rng.normal((6 * BLOCK, d))

# Pooled importance: mean of each query block dotted with each key block mean.
cfg = BlockConfig(BLOCK, BLOCK, keep_ratio=0.34, forced_blocks=frozenset({0}))
scores = block_scores(q, k, cfg)
print("pooled block scores (2 query blocks x 6 key blocks):")
print(np.array_str(scores, precision=3))

mask = build_mask(scores, cfg)
print("\nmask (block 0 forced, quota = max(1 forced, ceil(0.34 * 6)) = 2):")
for i, row in enumerate(mask.active.astype(int)):
    print(f"  query block {i}: {row}  active={list(np.flatnonzero(row))}")

scale = 1.0 / np.sqrt(d)
sparse_out = sparse_attention(q, k, v, mask, scale)

# Ground truth: dense attention with -inf on the inactive blocks.
s = (q @ k.T) * scale
for i in range(mask.shape[0]):
    for j in range(mask.shape[1]):
        if not mask.active[i, j]:
            s[i * BLOCK:(i + 1) * BLOCK, j * BLOCK:(j + 1) * BLOCK] = -np.inf
dense_out = softmax_rows(s) @ v
print(f"\nmax |online softmax - masked dense| = {np.abs(sparse_out - dense_out).max():.2e}")

# Visit order never matters: the running max / normalizer make the
# accumulation exact in any block order.
perm = [int(j) for j in np.random.default_rng(2).permutation(6)]
permuted = sparse_attention(q, k, v, mask, scale, visit_order=perm)
print(f"max drift when visiting blocks in order {perm}: "
      f"{np.abs(permuted - sparse_out).max():.2e}")

# keep_ratio = 1.0 is plain dense attention.
dense_cfg = BlockConfig(BLOCK, BLOCK, keep_ratio=1.0)
full_mask = build_mask(block_scores(q, k, dense_cfg), dense_cfg)
full = sparse_attention(q, k, v, full_mask, scale)
plain = softmax_rows((q @ k.T) * scale) @ v
print(f"dense limit check: {np.abs(full - plain).max():.2e}")
