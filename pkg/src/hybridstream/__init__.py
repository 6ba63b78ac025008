"""Streaming attention engine with a compressed linear history pathway,
block-sparse local attention, a rolling KV cache with pinned sinks, capped
relative rotary positions, and a closed-form Gaussian distillation lab."""

from .engine import (
    BENCH_MODES,
    NoiseSchedule,
    OpCounters,
    StreamConfig,
    StreamResult,
    ToyDenoiser,
    config_for_mode,
    dense_oracle_attention,
    generate_stream,
    hybrid_attention,
    run_stream,
)
from .distill import (
    AffineGenerator,
    DistillConfig,
    DmdGradient,
    GaussianWorld,
    Phase,
    PhaseSchedule,
    TrainResult,
    diffuse_gaussian,
    dmd_gradient,
    flow_matching_loss,
    gaussian_kl,
    gaussian_score,
    reg_loss,
    teacher_rollout,
    train,
)
from .errors import (
    ContractViolationError,
    FormatError,
    LengthError,
    SequenceError,
    ShapeError,
)
from .linear_history import (
    EPS_DIV,
    FeatureMap,
    LinearState,
    absorb_evicted,
    history_output,
)
from .numerics import (
    SeededRng,
    gaussian_sample,
    matmul,
    read_tensor,
    softmax_rows,
    write_tensor,
)
from .rope import RoPEConfig, apply_rope, temporal_index
from .sparse_local import (
    BlockConfig,
    BlockMask,
    block_scores,
    build_mask,
    sparse_attention,
)
from .stream_cache import ChunkKV, RollingCache, relative_temporal_index

__version__ = "0.1.0"
