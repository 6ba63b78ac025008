"""Distillation lab on a closed-form Gaussian world.

The data distribution is an explicit Gaussian, the student is an affine
map of noise, and both score functions are analytic, so the distribution
matching gradient, the flow-matching loss, the teacher rollout, and the
KL being descended all have checkable closed forms. The training loop
keeps the full structural skeleton of streaming distillation: per step it
uniformly samples which timestep carries the update, rolls a small
streaming fixture through the chunk loop (dense attention in phase one,
hybrid attention in phase two), refreshes the analytic critic several
times per generator update, and adds the teacher-anchored regularizer
only on steps whose sampled timestep is the first (noisiest) one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .engine import NoiseSchedule, StreamConfig, ToyDenoiser
from .errors import ShapeError
from .numerics import SeededRng

_DEFAULT_FIXTURE = StreamConfig(
    frames_per_chunk=1,
    window_frames=2,
    sink_chunks=1,
    tokens_per_frame=4,
    model_dim=8,
    heads=1,
    head_dim=8,
    layers=1,
    keep_ratio=0.5,
    seed=7,
)


@dataclass(frozen=True)
class GaussianWorld:
    """The data distribution: an explicit n-dimensional Gaussian."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    sqrt_cov: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ShapeError(f"mean {mean.shape} and cov {cov.shape} are inconsistent")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", np.linalg.cholesky(cov))
        w, v = np.linalg.eigh(cov)
        if w.min() <= 0:
            raise np.linalg.LinAlgError("covariance is not positive definite")
        object.__setattr__(self, "sqrt_cov", (v * np.sqrt(w)) @ v.T)

    @property
    def n(self) -> int:
        return self.mean.size

    def sample(self, rng: SeededRng, batch: int) -> np.ndarray:
        return self.mean + rng.normal((batch, self.n)) @ self.chol.T

    @classmethod
    def random(cls, rng: SeededRng, n: int,
               eig_range: tuple[float, float] = (0.3, 1.3)) -> "GaussianWorld":
        """A reproducible random world with bounded covariance spectrum."""
        mean = 2.0 * rng.uniform(n) - 1.0
        a = rng.normal((n, n))
        q, _ = np.linalg.qr(a)
        lo, hi = eig_range
        eigs = lo + (hi - lo) * rng.uniform(n)
        return cls(mean, (q * eigs) @ q.T)


@dataclass
class AffineGenerator:
    """Student g(eps) = A eps + b; its output distribution is N(b, A A^T)."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ShapeError(f"A must be square, got {self.A.shape}")
        if self.b.shape != (self.A.shape[0],):
            raise ShapeError(f"b must be length {self.A.shape[0]}, got {self.b.shape}")

    @property
    def n(self) -> int:
        return self.b.size

    def transform(self, eps: np.ndarray) -> np.ndarray:
        return eps @ self.A.T + self.b

    def induced(self) -> tuple[np.ndarray, np.ndarray]:
        return self.b.copy(), self.A @ self.A.T

    def copy(self) -> "AffineGenerator":
        return AffineGenerator(self.A.copy(), self.b.copy())


def diffuse_gaussian(mean: np.ndarray, cov: np.ndarray, t: float,
                     schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Distribution of alpha x + beta eps for x ~ N(mean, cov):
    N(alpha mean, alpha^2 cov + beta^2 I)."""
    a = float(schedule.alpha(t))
    bt = float(schedule.beta(t))
    n = np.asarray(mean).size
    return a * np.asarray(mean), (a * a) * np.asarray(cov) + (bt * bt) * np.eye(n)


def gaussian_score(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Exact score of N(mean, cov): -cov^{-1} (x - mean).

    Accepts a single point [n] or a batch [batch, n]. A singular covariance
    raises numpy.linalg.LinAlgError.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if pts.shape[1] != mean.size:
        raise ShapeError(f"points {x.shape} do not match mean {mean.shape}")
    out = -np.linalg.solve(cov, (pts - mean).T).T
    return out[0] if single else out


def gaussian_kl(mean0, cov0, mean1, cov1) -> float:
    """KL(N(mean0, cov0) || N(mean1, cov1))."""
    mean0, mean1 = np.asarray(mean0), np.asarray(mean1)
    n = mean0.size
    diff = mean1 - mean0
    solve = np.linalg.solve(cov1, np.column_stack([cov0, diff[:, None]]))
    trace = np.trace(solve[:, :n])
    quad = diff @ solve[:, n]
    _, logdet0 = np.linalg.slogdet(cov0)
    _, logdet1 = np.linalg.slogdet(cov1)
    return 0.5 * (trace + quad - n + logdet1 - logdet0)


def flow_matching_loss(velocity_fn, x0: np.ndarray, eps: np.ndarray,
                       t: np.ndarray, schedule: NoiseSchedule) -> float:
    """Mean squared velocity error: E || v(x_t, t) - (eps - x0) ||^2.

    The expectation is over the batch of per-sample squared L2 norms.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x0.shape != eps.shape or x0.shape[0] != t.shape[0]:
        raise ShapeError(f"batch shapes differ: x0 {x0.shape}, eps {eps.shape}, t {t.shape}")
    a = np.asarray(schedule.alpha(t), dtype=np.float64)[:, None]
    bt = np.asarray(schedule.beta(t), dtype=np.float64)[:, None]
    xt = a * x0 + bt * eps
    v = velocity_fn(xt, t)
    resid = v - (eps - x0)
    return float(np.mean(np.sum(resid * resid, axis=1)))


def teacher_rollout(world: GaussianWorld, eps: np.ndarray) -> np.ndarray:
    """Frozen teacher's complete denoising of the given noise: the exact
    Gaussian transport eps -> mean + sqrt(cov) eps. Pairs (eps, rollout) are
    deterministic, so they can be precomputed once per run."""
    eps = np.asarray(eps, dtype=np.float64)
    return world.mean + eps @ world.sqrt_cov.T


def reg_loss(student_first_step: np.ndarray, teacher_rollout_out: np.ndarray) -> float:
    """Mean squared elementwise distance between the student's map of the
    initial noise and the teacher's rollout of the same noise."""
    a = np.asarray(student_first_step, dtype=np.float64)
    b = np.asarray(teacher_rollout_out, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


@dataclass(frozen=True)
class DmdGradient:
    A: np.ndarray
    b: np.ndarray

    def norm(self) -> float:
        return math.sqrt(float(np.sum(self.A * self.A)) + float(np.sum(self.b * self.b)))


def dmd_gradient(gen: AffineGenerator, world: GaussianWorld, t: float,
                 rng: SeededRng, batch: int,
                 schedule: NoiseSchedule | None = None) -> DmdGradient:
    """Monte Carlo distribution-matching gradient over (A, b).

    Draw eps, push it through the student, diffuse with independent noise
    eps', evaluate the analytic real and fake scores at the diffused
    points, and chain through the affine map (dx_t/dA = alpha eps outer,
    dx_t/db = alpha I). The expectation equals the exact gradient of
    KL(fake_t || real_t); at matched distributions the two scores cancel
    pointwise and the estimate is identically zero.
    """
    if not (0.0 < t <= 1.0):
        raise ValueError(f"t must be in (0, 1], got {t}")
    schedule = schedule or NoiseSchedule.rectified_flow()
    a = float(schedule.alpha(t))
    bt = float(schedule.beta(t))
    eps = rng.normal((batch, world.n))
    eps_diff = rng.normal((batch, world.n))
    x0 = gen.transform(eps)
    xt = a * x0 + bt * eps_diff

    real_mean, real_cov = diffuse_gaussian(world.mean, world.cov, t, schedule)
    fake_b, fake_cov_0 = gen.induced()
    fake_mean, fake_cov = diffuse_gaussian(fake_b, fake_cov_0, t, schedule)

    d = gaussian_score(xt, real_mean, real_cov) - gaussian_score(xt, fake_mean, fake_cov)
    grad_a = -a * (d.T @ eps) / batch
    grad_b = -a * d.mean(axis=0)
    return DmdGradient(grad_a, grad_b)


class Phase(Enum):
    DENSE = "dense"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class PhaseSchedule:
    """Dense attention first, hybrid attention afterwards; switches once."""

    phase_switch_step: int

    def mode(self, step: int) -> Phase:
        return Phase.DENSE if step < self.phase_switch_step else Phase.HYBRID


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.05
    timesteps: tuple = (1.0, 0.75, 0.5, 0.25)
    phase_switch_step: int = 1000
    steps: int = 2000                 # generator updates
    generator_lr: float = 0.05
    critic_lr: float = 0.01           # cadence bookkeeping; the analytic critic has no parameters
    generator_update_every: int = 5   # critic refreshes per generator update
    batch_size: int = 256
    fixture: StreamConfig = _DEFAULT_FIXTURE
    fixture_chunks: int = 4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        ts = self.timesteps
        if not ts or any(not (0.0 < t <= 1.0) for t in ts):
            raise ValueError("timesteps must lie in (0, 1]")
        if any(ts[i] <= ts[i + 1] for i in range(len(ts) - 1)):
            raise ValueError("timesteps must be strictly descending")
        if self.steps < 1 or self.batch_size < 1 or self.generator_update_every < 1:
            raise ValueError("steps, batch_size, generator_update_every must be >= 1")


@dataclass
class TraceRow:
    step: int
    phase: str
    loss_dmd: float
    loss_reg: float
    grad_norm: float
    mean_err: float
    cov_err: float
    s_index: int          # sampled timestep slot; 0 is the noisiest step
    lambda_effective: float
    loss_total: float     # loss_dmd + lambda_effective * loss_reg as applied


@dataclass
class TrainResult:
    rows: list
    generator: AffineGenerator
    world: GaussianWorld
    config: DistillConfig

    def parameter_trajectory(self) -> np.ndarray:
        return np.asarray(self._trajectory)


TRACE_HEADER = ["step", "phase", "loss_dmd", "loss_reg", "grad_norm", "mean_err", "cov_err"]


def write_trace_csv(path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        for r in rows:
            writer.writerow([
                r.step, r.phase, repr(r.loss_dmd), repr(r.loss_reg),
                repr(r.grad_norm), repr(r.mean_err), repr(r.cov_err),
            ])


def _run_fixture(models: dict, cfg: DistillConfig, phase: Phase, s_index: int,
                 rng: SeededRng) -> None:
    """One pass of the streaming chunk loop, forward-only.

    Mirrors the training control flow: fresh cache every step, the inner
    timestep loop runs from the noisiest step down to the sampled one,
    chunks are cached from their prediction at the sampled step, and the
    window evicts into the linear state only in the hybrid phase.
    """
    model: ToyDenoiser = models[phase]
    fixture_cfg = model.cfg
    cache = model.new_cache()
    schedule = NoiseSchedule.rectified_flow()
    ts = cfg.timesteps
    from .linear_history import absorb_evicted
    from .engine import _chunk_spatial_indices

    rope_cfg = fixture_cfg.rope_config()
    s_idx_tokens = _chunk_spatial_indices(fixture_cfg)
    for i in range(cfg.fixture_chunks):
        x = rng.normal((fixture_cfg.chunk_tokens, fixture_cfg.model_dim))
        for j in range(s_index + 1):
            t = ts[j]
            x0 = model.denoise_chunk(x, t, cache, i)
            if j == s_index:
                kv = model.compute_chunk_kv(x0, cache, i)
                evicted = cache.append(kv)
                if evicted is not None and phase is Phase.HYBRID:
                    for layer_idx, state in enumerate(cache.linear_states):
                        absorb_evicted(state, evicted.keys[layer_idx],
                                       evicted.values[layer_idx], rope_cfg,
                                       t_index=0, s_indices=s_idx_tokens)
            else:
                eps = rng.normal((fixture_cfg.chunk_tokens, fixture_cfg.model_dim))
                t_next = ts[j + 1]
                x = float(schedule.alpha(t_next)) * x0 + float(schedule.beta(t_next)) * eps


def train(
    config: DistillConfig,
    world: GaussianWorld,
    gen: AffineGenerator,
    rng: SeededRng,
    lambda_override: Callable[[int, int], float] | None = None,
    run_fixture: bool = True,
) -> TrainResult:
    """Distill the affine student against the Gaussian world.

    Per generator update: sample the carrying timestep slot uniformly, roll
    the streaming fixture (dense or hybrid attention per the phase
    schedule), refresh the analytic critic `generator_update_every` times,
    take the distribution-matching gradient at the sampled timestep, and,
    only when the sampled slot is the noisiest one, add lambda times the
    teacher-anchored regularizer. Everything downstream of the rng is
    deterministic; lambda never influences the rng stream, so runs that
    differ only in lambda are step-for-step comparable.
    """
    gen = gen.copy()
    schedule = NoiseSchedule.rectified_flow()
    phases = PhaseSchedule(config.phase_switch_step)
    n = world.n
    t_count = len(config.timesteps)

    # Precomputed teacher pairs, drawn regardless of lambda so the rng
    # stream is identical across lambda settings.
    pool_eps = rng.normal((config.batch_size, n))
    pool_rollout = teacher_rollout(world, pool_eps)

    fixture_models = None
    if run_fixture:
        dense_cfg = replace(config.fixture, keep_ratio=1.0, linear_history=False)
        hybrid_cfg = replace(config.fixture, linear_history=True)
        fixture_models = {
            Phase.DENSE: ToyDenoiser(dense_cfg),
            Phase.HYBRID: ToyDenoiser(hybrid_cfg),
        }

    rows = []
    trajectory = []
    for step in range(config.steps):
        phase = phases.mode(step)
        s_index = int(rng.uniform(1)[0] * t_count)
        s_index = min(s_index, t_count - 1)
        if run_fixture:
            _run_fixture(fixture_models, config, phase, s_index, rng)

        # analytic critic refresh cadence: the fake score is re-derived from
        # the current generator parameters before each generator update
        fake_mean = fake_cov = None
        for _ in range(config.generator_update_every):
            fake_mean, fake_cov = gen.induced()

        t_s = config.timesteps[s_index]
        grad = dmd_gradient(gen, world, t_s, rng, config.batch_size, schedule)
        real_mean_t, real_cov_t = diffuse_gaussian(world.mean, world.cov, t_s, schedule)
        fake_mean_t, fake_cov_t = diffuse_gaussian(fake_mean, fake_cov, t_s, schedule)
        loss_dmd = gaussian_kl(fake_mean_t, fake_cov_t, real_mean_t, real_cov_t)

        lam = config.lam if lambda_override is None else float(lambda_override(step, s_index))
        loss_reg = 0.0
        grad_a, grad_b = grad.A.copy(), grad.b.copy()
        if s_index == 0 and lam != 0.0:
            student = gen.transform(pool_eps)
            resid = student - pool_rollout
            loss_reg = float(np.mean(resid * resid))
            scale = 2.0 / (config.batch_size * n)
            grad_a += lam * scale * (resid.T @ pool_eps)
            grad_b += lam * scale * resid.sum(axis=0)

        gen.A -= config.generator_lr * grad_a
        gen.b -= config.generator_lr * grad_b

        grad_norm = math.sqrt(float(np.sum(grad_a * grad_a)) + float(np.sum(grad_b * grad_b)))
        mean_err = float(np.linalg.norm(gen.b - world.mean))
        cov_err = float(np.linalg.norm(gen.A @ gen.A.T - world.cov))
        loss_total = float(loss_dmd) + lam * loss_reg
        rows.append(TraceRow(step, phase.value, float(loss_dmd), loss_reg,
                             grad_norm, mean_err, cov_err, s_index, lam,
                             loss_total))
        trajectory.append(np.concatenate([gen.A.reshape(-1), gen.b]))

    result = TrainResult(rows, gen, world, config)
    result._trajectory = np.asarray(trajectory)
    return result
