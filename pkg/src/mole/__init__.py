"""Mixture-of-low-rank-experts layer with a desk-scale diffusion testbed."""

from .checkpoint import content_hash, load_checkpoint, save_checkpoint
from .config import RunConfig, default_config, load_config
from .data import gen_closeup, gen_scene, load_dataset, make_dataset, save_dataset
from .diffusion import (
    NoiseSchedule,
    denoise_loss,
    make_schedule,
    min_snr_weight,
    p_sample_loop,
    q_sample,
)
from .errors import (
    BadMagicError,
    BadVersionError,
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    EvaluationError,
    HashMismatchError,
    MoleError,
    TruncatedError,
)
from .expert import LowRankExpert, expert_apply, init_expert, merge_into_base
from .layer import (
    BaseLinear,
    GatingParams,
    MoLELayer,
    init_linear,
    mole_forward,
    wrap_layer,
)
from .net import DenoiserNet, init_denoiser, wrap_denoiser
from .optim import AdamW, Lion, make_optimizer
from .pipeline import (
    StageConfig,
    assemble_stage3,
    base_fingerprint,
    evaluate_loss,
    load_expert_checkpoint,
    load_net_checkpoint,
    save_expert_checkpoint,
    save_net_checkpoint,
    stage1_finetune,
    stage2_train_expert,
    stage3_train_gating,
)
from .telemetry import (
    GateTrace,
    NormTrace,
    expert_norms,
    export_csv,
    export_heatmap,
    steered_init,
    trace_gates,
)
from .tensor import Tape, Tensor, backward, finite_diff_gradcheck

__version__ = "0.1.0"

__all__ = [
    "MoleError",
    "DimensionError",
    "ConfigError",
    "ContractError",
    "EvaluationError",
    "CheckpointError",
    "BadMagicError",
    "BadVersionError",
    "TruncatedError",
    "HashMismatchError",
    "Tensor",
    "Tape",
    "backward",
    "finite_diff_gradcheck",
    "LowRankExpert",
    "init_expert",
    "expert_apply",
    "merge_into_base",
    "BaseLinear",
    "GatingParams",
    "MoLELayer",
    "init_linear",
    "mole_forward",
    "wrap_layer",
    "DenoiserNet",
    "init_denoiser",
    "wrap_denoiser",
    "NoiseSchedule",
    "make_schedule",
    "q_sample",
    "min_snr_weight",
    "denoise_loss",
    "p_sample_loop",
    "AdamW",
    "Lion",
    "make_optimizer",
    "gen_scene",
    "gen_closeup",
    "make_dataset",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "content_hash",
    "StageConfig",
    "stage1_finetune",
    "stage2_train_expert",
    "stage3_train_gating",
    "assemble_stage3",
    "base_fingerprint",
    "evaluate_loss",
    "save_net_checkpoint",
    "load_net_checkpoint",
    "save_expert_checkpoint",
    "load_expert_checkpoint",
    "GateTrace",
    "NormTrace",
    "trace_gates",
    "expert_norms",
    "steered_init",
    "export_csv",
    "export_heatmap",
    "RunConfig",
    "load_config",
    "default_config",
    "__version__",
]
