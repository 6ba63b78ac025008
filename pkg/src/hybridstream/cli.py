"""Command line interface: verification suites, throughput/cost benchmarks,
stream generation dumps, and distillation runs.

Exit codes: 0 success, 1 verification/assertion failure, 2 usage error,
3 I/O error. Config files are plain `key = value` lines ('#' starts a
comment); command-line flags override file values. HFT_THREADS caps the
worker threads used when benchmarking several modes in one invocation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import verify as verify_mod
from .distill import AffineGenerator, DistillConfig, GaussianWorld, train, write_trace_csv
from .engine import BENCH_MODES, StreamConfig, config_for_mode, run_stream
from .numerics import SeededRng, write_tensor

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3

_WORLD_STREAM = 10
_TRAIN_STREAM = 11


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_STREAM_FIELDS = {
    "frames_per_chunk": int,
    "window_frames": int,
    "sink_chunks": int,
    "tokens_per_frame": int,
    "model_dim": int,
    "heads": int,
    "head_dim": int,
    "layers": int,
    "keep_ratio": float,
    "max_temporal_index": int,
    "base_theta": float,
    "seed": int,
    "linear_history": bool,
    "denoise_timesteps": tuple,
}

_DISTILL_FIELDS = {
    "lam": float,
    "phase_switch_step": int,
    "steps": int,
    "generator_lr": float,
    "critic_lr": float,
    "generator_update_every": int,
    "batch_size": int,
    "fixture_chunks": int,
    "timesteps": tuple,
    "seed": int,
    "world_dim": int,
}

_RUN_FIELDS = {"chunks": int}


def parse_config_file(path: str) -> dict:
    try:
        with open(path, "r") as f:
            lines = f.readlines()
    except OSError:
        raise
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(field: str, kind, raw):
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            if isinstance(raw, tuple):
                return raw
            return tuple(float(p) for p in str(raw).split(",") if p.strip())
        return kind(raw)
    except (TypeError, ValueError):
        raise UsageError(f"invalid value for config field '{field}': {raw!r}")


def _typed_config(raw: dict, schema: dict, what: str) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise UsageError(f"unknown {what} config field '{key}'")
        out[key] = _coerce(key, schema[key], value)
    return out


def _config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _stream_config_payload(cfg: StreamConfig, chunks: int) -> dict:
    payload = asdict(cfg)
    payload["denoise_timesteps"] = list(cfg.denoise_timesteps)
    payload["chunks"] = chunks
    return payload


def _build_stream_config(args) -> tuple[StreamConfig, int]:
    file_cfg = {}
    if args.config:
        file_cfg = parse_config_file(args.config)
    merged_schema = dict(_STREAM_FIELDS)
    merged_schema.update(_RUN_FIELDS)
    typed = _typed_config(file_cfg, merged_schema, "stream")
    chunks = typed.pop("chunks", 8)

    # flags win over file values
    if getattr(args, "seed", None) is not None:
        typed["seed"] = args.seed
    if getattr(args, "window", None) is not None:
        typed["window_frames"] = args.window
    if getattr(args, "sparsity", None) is not None:
        typed["keep_ratio"] = args.sparsity
    if getattr(args, "chunks", None) is not None:
        chunks = args.chunks
    if chunks < 1:
        raise UsageError("chunks must be >= 1")
    if "denoise_timesteps" in typed:
        typed["denoise_timesteps"] = tuple(typed["denoise_timesteps"])
    try:
        cfg = StreamConfig(**typed)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid stream config: {exc}")
    return cfg, chunks


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    try:
        results = verify_mod.run_suites(args.suite)
    except KeyError as exc:
        raise UsageError(str(exc.args[0]))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} -- {r.detail}")
    failed = [r for r in results if not r.passed]
    summary = {
        "checks": [r.as_dict() for r in results],
        "passed": len(results) - len(failed),
        "failed": [r.name for r in failed],
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.json"), "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)}")
        return EXIT_VERIFY_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def _bench_one(mode: str, base: StreamConfig, chunks: int) -> dict:
    cfg = config_for_mode(mode, base)
    res = run_stream(cfg, chunks)
    ms = res.chunk_ms
    return {
        "mode": mode,
        "chunks": chunks,
        "ms_mean": float(ms.mean()),
        "ms_p50": float(np.percentile(ms, 50)),
        "ms_p95": float(np.percentile(ms, 95)),
        "peak_cached_tokens": int(res.peak_cached_tokens),
        "score_evals_steady": int(res.chunk_score_evals[-1]),
        "score_evals_total": int(res.chunk_score_evals.sum()),
        "pooled_scores_total": int(res.chunk_pooled_scores.sum()),
        "max_relative_index": int(res.max_relative_index_seen),
        "seed": cfg.seed,
        "window_frames": cfg.window_frames,
        "keep_ratio": cfg.keep_ratio,
        "sink_chunks": cfg.sink_chunks,
        "linear_history": cfg.linear_history,
    }


BENCH_CSV_HEADER = [
    "mode", "chunks", "ms_mean", "ms_p50", "ms_p95", "peak_cached_tokens",
    "score_evals_steady", "score_evals_total", "pooled_scores_total",
    "max_relative_index", "seed", "window_frames", "keep_ratio",
    "sink_chunks", "linear_history",
]


def cmd_bench(args) -> int:
    base, chunks = _build_stream_config(args)
    modes = list(BENCH_MODES) if args.mode == "all" else [args.mode]
    workers = max(1, int(os.environ.get("HFT_THREADS", "1")))
    if workers > 1 and len(modes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda m: _bench_one(m, base, chunks), modes))
    else:
        rows = [_bench_one(m, base, chunks) for m in modes]

    for row in rows:
        print(f"{row['mode']}: {row['ms_mean']:.2f} ms/chunk mean, "
              f"{row['score_evals_steady']} score evals/chunk steady, "
              f"peak {row['peak_cached_tokens']} cached tokens")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=BENCH_CSV_HEADER)
            writer.writeheader()
            writer.writerows(rows)
        with open(os.path.join(args.out, "bench.json"), "w") as f:
            json.dump({"reports": rows,
                       "config": _stream_config_payload(base, chunks)},
                      f, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg, chunks = _build_stream_config(args)
    res = run_stream(cfg, chunks)
    os.makedirs(args.out, exist_ok=True)
    files = []
    if args.concat:
        stacked = np.stack(res.latents)
        name = "latents.hft"
        write_tensor(os.path.join(args.out, name), stacked.shape, stacked)
        files.append(name)
    else:
        for i, latent in enumerate(res.latents):
            name = f"chunk_{i:04d}.hft"
            write_tensor(os.path.join(args.out, name), latent.shape, latent)
            files.append(name)
    payload = _stream_config_payload(cfg, chunks)
    manifest = {
        "config": payload,
        "config_hash": _config_hash(payload),
        "seed": cfg.seed,
        "chunks": chunks,
        "files": files,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {len(files)} tensor file(s) + manifest to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    file_cfg = parse_config_file(args.config) if args.config else {}
    typed = _typed_config(file_cfg, _DISTILL_FIELDS, "distill")
    seed = typed.pop("seed", 0)
    world_dim = typed.pop("world_dim", 2)
    if args.seed is not None:
        seed = args.seed
    if args.lam is not None:
        typed["lam"] = args.lam
    if args.phase_switch is not None:
        typed["phase_switch_step"] = args.phase_switch
    if "timesteps" in typed:
        typed["timesteps"] = tuple(typed["timesteps"])
    try:
        cfg = DistillConfig(**typed)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid distill config: {exc}")

    master = SeededRng(seed)
    world = GaussianWorld.random(master.derive(_WORLD_STREAM), world_dim)
    gen = AffineGenerator(0.5 * np.eye(world_dim), np.zeros(world_dim))
    result = train(cfg, world, gen, master.derive(_TRAIN_STREAM))

    os.makedirs(args.out, exist_ok=True)
    write_trace_csv(os.path.join(args.out, "trace.csv"), result.rows)
    write_tensor(os.path.join(args.out, "generator_A.hft"),
                 result.generator.A.shape, result.generator.A)
    write_tensor(os.path.join(args.out, "generator_b.hft"),
                 result.generator.b.shape, result.generator.b)
    write_tensor(os.path.join(args.out, "world_mean.hft"),
                 world.mean.shape, world.mean)
    write_tensor(os.path.join(args.out, "world_cov.hft"),
                 world.cov.shape, world.cov)
    last = result.rows[-1]
    payload = asdict(cfg)
    payload["timesteps"] = list(cfg.timesteps)
    payload["fixture"] = asdict(cfg.fixture)
    payload["fixture"]["denoise_timesteps"] = list(cfg.fixture.denoise_timesteps)
    payload.update({"seed": seed, "world_dim": world_dim})
    manifest = {
        "config": payload,
        "config_hash": _config_hash(payload),
        "final_mean_err": last.mean_err,
        "final_cov_err": last.cov_err,
        "files": ["trace.csv", "generator_A.hft", "generator_b.hft",
                  "world_mean.hft", "world_cov.hft"],
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"distilled {cfg.steps} steps: |b - mean| = {last.mean_err:.4f}, "
          f"|AA^T - cov|_F = {last.cov_err:.4f}; trace in {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridstream",
        description="streaming hybrid-attention engine: verify, bench, generate, distill",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run oracle/property suites")
    p.add_argument("--suite", default=None,
                   help="run one suite (e.g. rope, sparse, dmd); default all")
    p.add_argument("--out", default=None, help="directory for verify.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="benchmark attention modes")
    p.add_argument("--mode", default="all",
                   choices=sorted(BENCH_MODES) + ["all"])
    p.add_argument("--chunks", type=int, default=None)
    p.add_argument("--window", type=int, default=None, help="window size in frames")
    p.add_argument("--sparsity", type=float, default=None, help="keep ratio in (0, 1]")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", default=None, help="directory for bench.csv / bench.json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("generate", help="run the stream and dump latents")
    p.add_argument("--chunks", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--concat", action="store_true",
                   help="one stacked tensor instead of one file per chunk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("distill", help="run the Gaussian distillation loop")
    p.add_argument("--config", default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="regularizer weight")
    p.add_argument("--phase-switch", dest="phase_switch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
