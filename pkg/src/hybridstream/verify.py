"""Named verification suites: oracle equivalences and property sweeps,
runnable from the command line and reusable from tests.

Every check returns a CheckResult instead of raising, so a verification
run reports all failures by name.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .distill import (
    AffineGenerator,
    DistillConfig,
    GaussianWorld,
    diffuse_gaussian,
    dmd_gradient,
    gaussian_score,
    train,
)
from .engine import NoiseSchedule, StreamConfig, ToyDenoiser, config_for_mode, \
    dense_oracle_attention, hybrid_attention, run_stream
from .linear_history import LinearState, absorb_evicted
from .numerics import SeededRng, read_tensor_from, softmax_rows, write_tensor
from .rope import RoPEConfig, apply_rope, temporal_index
from .sparse_local import BlockConfig, BlockMask, build_mask, sparse_attention
from .stream_cache import ChunkKV, RollingCache


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def _check(name: str, condition: bool, detail: str) -> CheckResult:
    return CheckResult(name, bool(condition), detail)


def exact_dmd_gradient(gen: AffineGenerator, world: GaussianWorld, t: float,
                       schedule: NoiseSchedule | None = None):
    """Closed-form gradient of KL(fake_t || real_t) over (A, b); the
    population value the Monte Carlo estimator targets."""
    schedule = schedule or NoiseSchedule.rectified_flow()
    a = float(schedule.alpha(t))
    _, real_cov = diffuse_gaussian(world.mean, world.cov, t, schedule)
    fake_b, fake_cov0 = gen.induced()
    _, fake_cov = diffuse_gaussian(fake_b, fake_cov0, t, schedule)
    inv_real = np.linalg.inv(real_cov)
    inv_fake = np.linalg.inv(fake_cov)
    grad_a = (a * a) * (inv_real - inv_fake) @ gen.A
    grad_b = (a * a) * inv_real @ (gen.b - world.mean)
    return grad_a, grad_b


# ---------------------------------------------------------------------------
# suite: numerics
# ---------------------------------------------------------------------------


def _suite_numerics() -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(3):
        m, k, n = rng.integers(1, 33, size=3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        want = np.zeros((m, n))
        for i in range(m):
            for j in range(n):
                want[i, j] = sum(a[i, p] * b[p, j] for p in range(k))
        worst = max(worst, np.abs(a @ b - want).max() / (np.abs(want).max() + 1.0))
    out.append(_check("numerics.matmul_oracle", worst < 1e-12, f"rel err {worst:.2e}"))

    s = softmax_rows(rng.standard_normal((20, 9)) * 30)
    err = np.abs(s.sum(axis=1) - 1.0).max()
    out.append(_check("numerics.softmax_rows_sum", err < 1e-9 and (s >= 0).all(),
                      f"max |row sum - 1| = {err:.2e}"))

    a = SeededRng(42).normal(4096)
    b = SeededRng(42).normal(4096)
    out.append(_check("numerics.rng_reproducible", np.array_equal(a, b),
                      "bit-identical streams for equal seeds"))

    buf = io.BytesIO()
    data = np.float32(rng.standard_normal((5, 3)).astype(np.float32))
    write_tensor(buf, (5, 3), data)
    buf.seek(0)
    shape, back = read_tensor_from(buf)
    out.append(_check("numerics.tensor_round_trip",
                      shape == (5, 3) and np.array_equal(back, data),
                      "write/read bitwise equal"))
    return out


# ---------------------------------------------------------------------------
# suite: rope
# ---------------------------------------------------------------------------


def _suite_rope() -> list[CheckResult]:
    out = []
    cfg = RoPEConfig.half_split(16, max_temporal_index=21)
    capped = all(temporal_index(p, cfg) <= 21 for p in (0, 5, 21, 22, 10**6))
    out.append(_check("rope.cap", capped and temporal_index(300, cfg) == 21,
                      "min(pos, 21) for all positions"))

    x = SeededRng(1).normal((8, 16))
    rot = apply_rope(x, 13, np.arange(8.0), cfg)
    err = np.abs(np.linalg.norm(rot, axis=1) - np.linalg.norm(x, axis=1)).max()
    out.append(_check("rope.norm_preserved", err < 1e-10, f"max norm drift {err:.2e}"))

    q = SeededRng(2).normal((1, 16))
    k = SeededRng(3).normal((1, 16))
    s = np.zeros(1)
    d1 = apply_rope(q, 9, s, cfg) @ apply_rope(k, 4, s, cfg).T
    d2 = apply_rope(q, 14, s, cfg) @ apply_rope(k, 9, s, cfg).T
    drift = abs(float(d1[0, 0] - d2[0, 0]))
    out.append(_check("rope.relative_offsets", drift < 1e-9,
                      f"dot drift under shift {drift:.2e}"))
    return out


# ---------------------------------------------------------------------------
# suite: linear_state
# ---------------------------------------------------------------------------


def _suite_linear_state() -> list[CheckResult]:
    out = []
    heads, head_dim = 2, 8
    rope_cfg = RoPEConfig.half_split(head_dim)
    proj = SeededRng(0).normal((16, 16)) / 4.0
    state = LinearState.zeros(heads, head_dim, proj)
    L = np.zeros_like(state.L)
    H = np.zeros_like(state.H)
    rng = SeededRng(10)
    n_bytes_4 = None
    for c in range(12):
        k = rng.normal((heads, 6, head_dim))
        v = rng.normal((heads, 6, head_dim))
        absorb_evicted(state, k, v, rope_cfg, s_indices=np.arange(6.0))
        fk = state.feature_map(k)
        for h in range(heads):
            rot = apply_rope(fk[h], 0, np.arange(6.0), rope_cfg)
            L[h] += rot.T @ v[h]
            H[h] += fk[h].mean(axis=0)
        if c == 3:
            n_bytes_4 = state.nbytes
    rel = max(np.abs(state.L - L).max() / np.abs(L).max(),
              np.abs(state.H - H).max() / np.abs(H).max())
    out.append(_check("linear_state.batch_sum_equivalence", rel < 1e-9,
                      f"rel err vs direct sums {rel:.2e}"))
    out.append(_check("linear_state.constant_memory", state.nbytes == n_bytes_4,
                      f"{n_bytes_4} bytes after 4 and {state.nbytes} after 12 absorbs"))

    fm = state.feature_map
    worst = np.inf
    for _ in range(200):
        q = rng.normal((head_dim,)) * 25
        for h in range(heads):
            worst = min(worst, fm(q) @ state.H[h] + 1e-6)
    out.append(_check("linear_state.denominator_positive", worst >= 1e-6,
                      f"min denominator {worst:.3e}"))
    return out


# ---------------------------------------------------------------------------
# suite: sparse
# ---------------------------------------------------------------------------


def mask_invariant_check(cfg: BlockConfig, t_m: int = 4, t_n: int = 10,
                         seed: int = 0) -> CheckResult:
    """Mask construction invariants for a given block configuration; used
    with injected configurations for negative testing."""
    scores = SeededRng(seed).normal((t_m, t_n))
    try:
        mask = build_mask(scores, cfg)
        quota = max(len(cfg.forced_blocks), math.ceil(cfg.keep_ratio * t_n))
        per_row = mask.active.sum(axis=1)
        ok = (per_row == min(quota, t_n)).all() and mask.active.any(axis=1).all()
        for j in cfg.forced_blocks:
            ok = ok and mask.active[:, j].all()
        return _check("sparse.mask_invariants", ok,
                      f"per-row active counts {sorted(set(per_row.tolist()))}")
    except Exception as exc:  # malformed configs surface as named failures
        return _check("sparse.mask_invariants", False, f"{type(exc).__name__}: {exc}")


def _suite_sparse() -> list[CheckResult]:
    out = [mask_invariant_check(BlockConfig(1, 1, 0.2, frozenset({0})))]
    rng = np.random.default_rng(3)
    worst_masked = 0.0
    worst_perm = 0.0
    for trial in range(20):
        b = 4
        t_m, t_n = rng.integers(1, 7), rng.integers(1, 7)
        r = SeededRng(500 + trial)
        q = r.normal((t_m * b, 8))
        k = r.normal((t_n * b, 8))
        v = r.normal((t_n * b, 8))
        active = rng.random((t_m, t_n)) < 0.5
        for i in range(t_m):
            if not active[i].any():
                active[i, rng.integers(t_n)] = True
        mask = BlockMask(active)
        scale = 1.0 / math.sqrt(8)
        got = sparse_attention(q, k, v, mask, scale)
        s = (q @ k.T) * scale
        for i in range(t_m):
            for j in range(t_n):
                if not active[i, j]:
                    s[i * b:(i + 1) * b, j * b:(j + 1) * b] = -np.inf
        want = softmax_rows(s) @ v
        worst_masked = max(worst_masked, np.abs(got - want).max())
        perm = rng.permutation(t_n)
        worst_perm = max(worst_perm,
                         np.abs(sparse_attention(q, k, v, mask, scale, visit_order=perm) - got).max())
    out.append(_check("sparse.masked_dense_equivalence", worst_masked < 1e-6,
                      f"max |sparse - masked dense| = {worst_masked:.2e}"))
    out.append(_check("sparse.visit_order_invariance", worst_perm < 1e-9,
                      f"max drift under permuted visit order {worst_perm:.2e}"))
    return out


# ---------------------------------------------------------------------------
# suite: cache
# ---------------------------------------------------------------------------


def _suite_cache() -> list[CheckResult]:
    out = []
    cache = RollingCache(3, 1, 21)
    evicted_ids = []
    rng = SeededRng(4)
    for i in range(40):
        kv = ChunkKV(i, rng.normal((1, 1, 4, 8)), rng.normal((1, 1, 4, 8)),
                     is_sink=i == 0)
        ev = cache.append(kv)
        if ev is not None:
            evicted_ids.append(ev.chunk_index)
    visible_ids = [e.chunk_index for e in cache.entries()]
    partition = (set(evicted_ids) | set(visible_ids) == set(range(40))
                 and not set(evicted_ids) & set(visible_ids))
    out.append(_check("cache.eviction_partition", partition,
                      f"visible {visible_ids}, {len(evicted_ids)} evicted"))
    out.append(_check("cache.memory_bound", cache.total_cached_tokens == 4 * 4,
                      f"{cache.total_cached_tokens} cached tokens"))
    rels = [rel for _, rel in cache.visible_kv(39)]
    out.append(_check("cache.relative_index_cap",
                      all(0 <= r <= 21 for r in rels) and rels == sorted(rels),
                      f"relative indices {rels}"))
    restored = RollingCache.restore(cache.snapshot())
    same = all(
        np.array_equal(a.keys, b.keys) and r1 == r2
        for (a, r1), (b, r2) in zip(cache.visible_kv(39), restored.visible_kv(39))
    )
    out.append(_check("cache.snapshot_round_trip", same, "restore preserves visible_kv"))
    return out


# ---------------------------------------------------------------------------
# suite: hybrid
# ---------------------------------------------------------------------------

_TOY = StreamConfig(tokens_per_frame=4, model_dim=16, heads=2, head_dim=8)


def _random_cache(cfg: StreamConfig, chunks: int, seed: int):
    model = ToyDenoiser(cfg)
    cache = model.new_cache()
    rng = SeededRng(seed)
    shape = (cfg.layers, cfg.heads, cfg.chunk_tokens, cfg.head_dim)
    for i in range(chunks):
        kv = ChunkKV(i, rng.normal(shape), rng.normal(shape), i < cfg.sink_chunks)
        ev = cache.append(kv)
        if ev is not None and cfg.linear_history:
            for l, st in enumerate(cache.linear_states):
                absorb_evicted(st, ev.keys[l], ev.values[l], cfg.rope_config(),
                               s_indices=np.arange(float(cfg.chunk_tokens)))
    return cache


def _suite_hybrid() -> list[CheckResult]:
    out = []
    dense_cfg = replace(_TOY, keep_ratio=1.0, linear_history=False)
    worst = 0.0
    rng = SeededRng(6)
    for trial in range(10):
        chunks = 1 + trial % 4
        cache = _random_cache(dense_cfg, chunks, 60 + trial)
        shape = (dense_cfg.heads, dense_cfg.chunk_tokens, dense_cfg.head_dim)
        q, ks, vs = rng.normal(shape), rng.normal(shape), rng.normal(shape)
        got = hybrid_attention(q, ks, vs, cache, 0, dense_cfg, chunks)
        want = dense_oracle_attention(q, ks, vs, cache.entries(), 0, dense_cfg, chunks)
        worst = max(worst, np.abs(got - want).max())
    out.append(_check("hybrid.dense_limit_equivalence", worst < 1e-6,
                      f"max |hybrid - dense oracle| = {worst:.2e}"))

    cache = _random_cache(_TOY, 8, seed=61)
    shape = (_TOY.heads, _TOY.chunk_tokens, _TOY.head_dim)
    q, ks, vs = rng.normal(shape), rng.normal(shape), rng.normal(shape)
    full = hybrid_attention(q, ks, vs, cache, 0, _TOY, 8)
    saved = [s.evicted_tokens for s in cache.linear_states]
    for s in cache.linear_states:
        s.evicted_tokens = 0
    local = hybrid_attention(q, ks, vs, cache, 0, _TOY, 8)
    for s, n in zip(cache.linear_states, saved):
        s.evicted_tokens = n
    from .linear_history import history_output
    hist = history_output(cache.linear_states[0], q, _TOY.rope_config(),
                          temporal_index(8, _TOY.rope_config()),
                          np.arange(float(_TOY.chunk_tokens)))
    err = np.abs(full - (local + hist)).max()
    out.append(_check("hybrid.additive_decomposition", err < 1e-9,
                      f"|hybrid - (local + history)| = {err:.2e}"))
    return out


# ---------------------------------------------------------------------------
# suite: stream
# ---------------------------------------------------------------------------


def _suite_stream() -> list[CheckResult]:
    out = []
    res = run_stream(_TOY, 60)
    finite = all(np.isfinite(x).all() for x in res.latents)
    out.append(_check("stream.long_horizon_finite", finite, "60 chunks, no NaN/Inf"))
    out.append(_check("stream.rope_index_cap",
                      res.max_relative_index_seen <= _TOY.max_temporal_index,
                      f"max relative index {res.max_relative_index_seen}"))
    steady = res.chunk_score_evals[10:]
    out.append(_check("stream.flat_cost_counts", len(set(steady.tolist())) == 1,
                      f"steady-state score evals {steady[0]} per chunk"))

    hybrid = run_stream(config_for_mode("hybrid", _TOY), 10)
    dense = run_stream(config_for_mode("dense21", _TOY), 10)
    out.append(_check("stream.hybrid_cheaper_than_dense21",
                      hybrid.chunk_score_evals[-1] < dense.chunk_score_evals[-1],
                      f"{hybrid.chunk_score_evals[-1]} vs {dense.chunk_score_evals[-1]} score evals"))
    return out


# ---------------------------------------------------------------------------
# suite: dmd
# ---------------------------------------------------------------------------


def _finite_difference_score(x, mean, cov, h=1e-5):
    inv = np.linalg.inv(cov)
    sign, logdet = np.linalg.slogdet(cov)

    def logpdf(p):
        d = p - mean
        return -0.5 * (d @ inv @ d + logdet + mean.size * math.log(2 * math.pi))

    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (logpdf(x + e) - logpdf(x - e)) / (2 * h)
    return g


def _suite_dmd() -> list[CheckResult]:
    out = []
    rng = SeededRng(7)
    worst = 0.0
    for trial in range(20):
        n = 2 + trial % 3
        world = GaussianWorld.random(rng.derive(trial), n)
        x = rng.normal(n)
        got = gaussian_score(x, world.mean, world.cov)
        want = _finite_difference_score(x, world.mean, world.cov)
        worst = max(worst, np.abs(got - want).max())
    out.append(_check("dmd.score_matches_log_density_gradient", worst < 1e-5,
                      f"max |score - FD grad| = {worst:.2e}"))

    world = GaussianWorld.random(SeededRng(8), 2)
    matched = AffineGenerator(world.sqrt_cov.copy(), world.mean.copy())
    g = dmd_gradient(matched, world, 0.5, SeededRng(9), 100_000)
    floor = 3.0 / math.sqrt(100_000)
    out.append(_check("dmd.fixed_point_below_noise_floor", g.norm() <= floor,
                      f"matched gradient norm {g.norm():.2e} <= floor {floor:.2e}"))

    # batch scaling of the pure Monte Carlo residual at a mean-offset probe
    probe = AffineGenerator(world.sqrt_cov.copy(), world.mean + np.array([0.5, -0.3]))
    ga, gb = exact_dmd_gradient(probe, world, 0.5)
    reps = 30

    def mean_residual_norm(batch, seed0):
        total = 0.0
        for r in range(reps):
            est = dmd_gradient(probe, world, 0.5, SeededRng(seed0 + r), batch)
            total += math.sqrt(np.sum((est.A - ga) ** 2) + np.sum((est.b - gb) ** 2))
        return total / reps

    full = mean_residual_norm(20_000, 100)
    half = mean_residual_norm(10_000, 900)
    ratio = half / full
    out.append(_check("dmd.residual_scales_sqrt_batch",
                      abs(ratio - math.sqrt(2)) <= 0.3 * math.sqrt(2),
                      f"half/full residual norm ratio {ratio:.3f} (want ~1.414)"))
    return out


def _suite_convergence() -> list[CheckResult]:
    rng = SeededRng(123)
    world = GaussianWorld.random(rng.derive(0), 2)
    gen = AffineGenerator(0.5 * np.eye(2), np.zeros(2))
    cfg = DistillConfig(lam=0.0)
    res = train(cfg, world, gen, rng.derive(1))
    last = res.rows[-1]
    ok = last.mean_err <= 0.05 and last.cov_err <= 0.05
    return [_check("convergence.dmd_reaches_world",
                   ok, f"after {cfg.steps} updates: |b - mean| = {last.mean_err:.4f}, "
                       f"|AA^T - cov|_F = {last.cov_err:.4f}")]


def _suite_gating() -> list[CheckResult]:
    out = []
    rng_seed = 55
    world = GaussianWorld.random(SeededRng(11), 2)
    gen = AffineGenerator(0.5 * np.eye(2), np.zeros(2))
    cfg = DistillConfig(steps=60, phase_switch_step=30)
    a = train(cfg, world, gen, SeededRng(rng_seed))
    b = train(cfg, world, gen, SeededRng(rng_seed),
              lambda_override=lambda step, s: cfg.lam if s == 0 else 0.0)
    identical = np.array_equal(a.parameter_trajectory(), b.parameter_trajectory())
    out.append(_check("gating.lambda_inert_off_final_step", identical,
                      "bit-identical trajectories with lambda toggled on s != T steps"))

    flips = sum(1 for r1, r2 in zip(a.rows, a.rows[1:]) if r1.phase != r2.phase)
    out.append(_check("gating.phase_switches_once",
                      flips == 1 and a.rows[0].phase == "dense" and a.rows[-1].phase == "hybrid",
                      f"{flips} phase flips over {cfg.steps} steps"))
    return out


SUITES = {
    "numerics": _suite_numerics,
    "rope": _suite_rope,
    "linear_state": _suite_linear_state,
    "sparse": _suite_sparse,
    "cache": _suite_cache,
    "hybrid": _suite_hybrid,
    "stream": _suite_stream,
    "dmd": _suite_dmd,
    "convergence": _suite_convergence,
    "gating": _suite_gating,
}


def run_suites(only: str | None = None) -> list[CheckResult]:
    names = [only] if only else list(SUITES)
    if only and only not in SUITES:
        raise KeyError(f"unknown suite {only!r}; available: {', '.join(SUITES)}")
    results = []
    for name in names:
        results.extend(SUITES[name]())
    return results
