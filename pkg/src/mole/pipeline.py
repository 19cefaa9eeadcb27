"""Three-stage training with strict freezing contracts.

Stage 1 fine-tunes every denoiser parameter on scenes. Stage 2 trains
one low-rank expert per hidden layer on the matching close-up set,
applied additively with the whole base byte-frozen. Stage 3 attaches
both trained expert sets behind fresh gates and trains only the gate
parameters. A 64-bit fingerprint of the base tensors travels with every
expert checkpoint so stage 3 can refuse experts trained against a
different base.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import content_hash, load_checkpoint, save_checkpoint
from .data import SyntheticScene
from .diffusion import NoiseSchedule, denoise_loss, make_schedule
from .errors import CheckpointError, ConfigError, ContractError
from .expert import LowRankExpert, expert_apply, init_expert
from .layer import BaseLinear, MoLELayer, wrap_layer
from .net import DenoiserNet, NONLINEARITIES, init_denoiser
from .optim import make_optimizer
from .tensor import Tape, Tensor, backward

STAGES = ("stage1", "stage2-face", "stage2-hand", "stage3")
EXPERT_ROLES = ("face", "hand")
_NONLIN_CODE = {name: float(i) for i, name in enumerate(sorted(NONLINEARITIES))}
_CODE_NONLIN = {v: k for k, v in _NONLIN_CODE.items()}
_RUN_META_KEYS = ("stage", "T", "beta_start", "beta_end", "seed")


@dataclass(frozen=True)
class StageConfig:
    """One stage's training hyperparameters."""

    stage: str
    steps: int
    batch_size: int
    learning_rate: float
    optimizer: str = "adamw"
    weighting: str = "uniform"
    gamma: float = 5.0
    seed: int = 0
    dataset: str = "scene"
    rank: int = 4
    weight_decay: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage: unknown stage '{self.stage}' (expected one of {STAGES})")
        if self.steps < 0:
            raise ConfigError(f"stage.steps: must be nonnegative, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"stage.batch_size: must be positive, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"stage.learning_rate: must be positive, got {self.learning_rate}")


@dataclass
class TrainState:
    """Mutable training-run state: the model, its optimizer, history."""

    net: DenoiserNet
    optimizer: object
    step: int = 0
    loss_history: list = field(default_factory=list)


class ExpertAdapter:
    """Stage-2 vehicle: base layer plus one additively applied expert."""

    __slots__ = ("base", "expert")

    def __init__(self, base: BaseLinear, expert: LowRankExpert):
        self.base = base
        self.expert = expert

    def forward(self, x: Tensor) -> Tensor:
        return T.add(self.base.forward(x), expert_apply(self.expert, x))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = self.base.named_parameters(prefix + "base.")
        params.update(self.expert.named_parameters(prefix + "expert."))
        return params


def _make_batch(scenes, sched: NoiseSchedule, batch_size: int, size: int, rng) -> list:
    batch = []
    for _ in range(batch_size):
        idx = int(rng.integers(len(scenes)))
        t = int(rng.integers(sched.T))
        eps = rng.standard_normal((size, size))
        batch.append((scenes[idx].image, t, eps))
    return batch


def train_loop(net: DenoiserNet, cfg: StageConfig, scenes: list[SyntheticScene], sched: NoiseSchedule) -> TrainState:
    """Run cfg.steps optimizer steps over random batches; deterministic per seed."""
    if not scenes:
        raise ContractError("train_loop: empty dataset")
    params = net.trainable_parameters()
    if not params:
        raise ContractError("train_loop: no trainable parameters")
    hyper = {} if cfg.weight_decay is None else {"weight_decay": cfg.weight_decay}
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate, **hyper)
    state = TrainState(net, opt)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.steps):
        batch = _make_batch(scenes, sched, cfg.batch_size, net.image_size, rng)
        with Tape() as tape:
            loss = denoise_loss(net, batch, sched, cfg.weighting, cfg.gamma)
        backward(loss, tape)
        opt.step()
        opt.zero_grad()
        state.step += 1
        state.loss_history.append(loss.item())
    return state


def evaluate_loss(
    net: DenoiserNet,
    scenes: list[SyntheticScene],
    sched: NoiseSchedule,
    batches: int = 4,
    batch_size: int = 32,
    seed: int = 0,
    weighting: str = "uniform",
    gamma: float = 5.0,
) -> float:
    """Average denoise loss over seeded evaluation batches; no gradients."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(batches):
        batch = _make_batch(scenes, sched, batch_size, net.image_size, rng)
        total += denoise_loss(net, batch, sched, weighting, gamma).item()
    return total / batches


# ---------------------------------------------------------------------------
# stages


def stage1_finetune(net: DenoiserNet, cfg: StageConfig, scenes, sched: NoiseSchedule) -> TrainState:
    """Fine-tune every parameter of a plain (unwrapped) denoiser."""
    if net.mole_layers():
        raise ContractError("stage1_finetune: net already carries mixture layers")
    for layer in net.hidden:
        layer.set_frozen(False)
    net.head.set_frozen(False)
    return train_loop(net, cfg, scenes, sched)


def stage2_train_expert(
    net: DenoiserNet, which: str, cfg: StageConfig, scenes, sched: NoiseSchedule
) -> tuple[list[LowRankExpert], TrainState]:
    """Train one expert per hidden layer on its close-up set.

    The base stays byte-frozen; only the new expert factors move. The
    net comes back with its plain layers restored; the trained experts
    are returned for checkpointing.
    """
    if which not in EXPERT_ROLES:
        raise ConfigError(f"stage2_train_expert: unknown expert '{which}' (expected face or hand)")
    if net.mole_layers():
        raise ContractError("stage2_train_expert: net must be the plain stage-1 output")
    expected_kind = f"{which}_closeup"
    for scene in scenes:
        if scene.kind != expected_kind:
            raise ConfigError(
                f"stage2_train_expert: {which} expert requires {expected_kind} data, got '{scene.kind}'"
            )

    for layer in net.hidden:
        layer.set_frozen(True)
    net.head.set_frozen(True)

    rng = np.random.default_rng(cfg.seed)
    plain_layers = list(net.hidden)
    experts = []
    for i, layer in enumerate(plain_layers):
        ex = init_expert(layer.d_in, layer.d_out, cfg.rank, scale=1.0, seed=rng)
        ex.set_frozen(False)
        experts.append(ex)
        net.hidden[i] = ExpertAdapter(layer, ex)
    try:
        state = train_loop(net, cfg, scenes, sched)
    finally:
        net.hidden[:] = plain_layers
    return experts, state


def stage3_train_gating(net: DenoiserNet, cfg: StageConfig, scenes, sched: NoiseSchedule) -> TrainState:
    """Train only the gate parameters of a fully wrapped denoiser."""
    wrapped = net.mole_layers()
    if len(wrapped) != len(net.hidden):
        raise ContractError("stage3_train_gating: every hidden layer must be wrapped with experts")
    for _, layer in wrapped:
        if len(layer.experts) != 2:
            raise ContractError("stage3_train_gating: missing expert (each layer needs face and hand)")
        layer.base.set_frozen(True)
        for ex in layer.experts:
            ex.set_frozen(True)
        layer.gates.set_frozen(False)
    net.head.set_frozen(True)
    return train_loop(net, cfg, scenes, sched)


# ---------------------------------------------------------------------------
# checkpoint orchestration


def base_fingerprint(net: DenoiserNet) -> int:
    """64-bit hash of the backbone tensors, order-independent by name."""
    return content_hash(dict(sorted(net.base_parameters().items())))


def _scalar(x: float) -> Tensor:
    return Tensor(np.asarray(float(x)))


def _fingerprint_meta(prefix: str, fp: int) -> dict[str, Tensor]:
    # split u64 into two exactly representable f64 halves
    return {prefix + "fingerprint_hi": _scalar(fp >> 32), prefix + "fingerprint_lo": _scalar(fp & 0xFFFFFFFF)}


def _read_fingerprint(tensors: dict, prefix: str, path) -> int:
    try:
        hi = int(tensors[prefix + "fingerprint_hi"].item())
        lo = int(tensors[prefix + "fingerprint_lo"].item())
    except KeyError as missing:
        raise CheckpointError(f"{path}: missing metadata tensor {missing}") from None
    return (hi << 32) | lo


def save_net_checkpoint(net: DenoiserNet, path, meta: dict) -> None:
    """Write the full net plus run metadata and a base fingerprint.

    ``meta`` must carry stage, T, beta_start, beta_end, and seed; the
    architecture block is derived from the net itself.
    """
    for key in _RUN_META_KEYS:
        if key not in meta:
            raise ConfigError(f"save_net_checkpoint: meta missing '{key}'")
    for _, layer in net.mole_layers():
        for ex in layer.experts:
            if ex.scale != 1.0:
                raise ContractError("save_net_checkpoint: wrapped experts must have scale 1 (gates own the blend)")
    named: dict[str, Tensor] = dict(net.named_parameters())
    named["meta.image_size"] = _scalar(net.image_size)
    named["meta.patch"] = _scalar(net.patch)
    named["meta.time_width"] = _scalar(net.time_width)
    named["meta.hidden_layers"] = _scalar(len(net.hidden))
    named["meta.hidden_width"] = _scalar(net.head.d_in)
    named["meta.nonlinearity"] = _scalar(_NONLIN_CODE[net.nonlinearity])
    for key in _RUN_META_KEYS:
        named[f"meta.{key}"] = _scalar(meta[key])
    named.update(_fingerprint_meta("meta.", base_fingerprint(net)))
    save_checkpoint(named, path)


def load_net_checkpoint(path) -> tuple[DenoiserNet, dict]:
    """Rebuild a net (wrapping included) from a stage checkpoint."""
    tensors = load_checkpoint(path)

    def meta_value(key: str) -> float:
        try:
            return tensors[f"meta.{key}"].item()
        except KeyError:
            raise CheckpointError(f"{path}: missing metadata tensor 'meta.{key}'") from None

    net = init_denoiser(
        image_size=int(meta_value("image_size")),
        patch=int(meta_value("patch")),
        hidden_width=int(meta_value("hidden_width")),
        hidden_layers=int(meta_value("hidden_layers")),
        time_width=int(meta_value("time_width")),
        nonlinearity=_CODE_NONLIN[meta_value("nonlinearity")],
        seed=0,
    )

    def fill(name: str, target: Tensor) -> None:
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor '{name}'")
        if tensors[name].shape != target.shape:
            raise CheckpointError(f"{path}: tensor '{name}' has shape {tensors[name].shape}, expected {target.shape}")
        target.data[...] = tensors[name].data

    stage = int(meta_value("stage"))
    if stage == 3:
        for i, base in enumerate(list(net.hidden)):
            experts = []
            for j in range(2):
                a = tensors.get(f"layer.{i}.expert.{j}.a")
                if a is None:
                    raise CheckpointError(f"{path}: missing tensor 'layer.{i}.expert.{j}.a'")
                rank = a.shape[1]
                experts.append(init_expert(base.d_in, base.d_out, rank, scale=1.0, seed=0))
            net.hidden[i] = wrap_layer(base, experts)
        net.head.set_frozen(True)
    for name, target in net.named_parameters().items():
        fill(name, target)
    meta = {key: meta_value(key) for key in _RUN_META_KEYS}
    fp = _read_fingerprint(tensors, "meta.", path)
    if fp != base_fingerprint(net):
        raise CheckpointError(f"{path}: stored base fingerprint does not match tensor contents")
    return net, meta


def save_expert_checkpoint(which: str, experts: list[LowRankExpert], net: DenoiserNet, path, seed: int) -> None:
    """Write one stage-2 expert set plus the base fingerprint it assumes."""
    if which not in EXPERT_ROLES:
        raise ConfigError(f"save_expert_checkpoint: unknown expert role '{which}'")
    named: dict[str, Tensor] = {}
    for i, ex in enumerate(experts):
        prefix = f"expert.{which}.{i}."
        named[prefix + "a"] = ex.a
        named[prefix + "b"] = ex.b
        named[prefix + "scale"] = _scalar(ex.scale)
        named[prefix + "rank"] = _scalar(ex.rank)
    named["meta.stage"] = _scalar(2.0)
    named["meta.which"] = _scalar(EXPERT_ROLES.index(which))
    named["meta.layers"] = _scalar(len(experts))
    named["meta.seed"] = _scalar(seed)
    named.update(_fingerprint_meta("meta.", base_fingerprint(net)))
    save_checkpoint(named, path)


def load_expert_checkpoint(path) -> tuple[str, list[LowRankExpert], int]:
    tensors = load_checkpoint(path)
    try:
        which = EXPERT_ROLES[int(tensors["meta.which"].item())]
        count = int(tensors["meta.layers"].item())
    except KeyError as missing:
        raise CheckpointError(f"{path}: missing metadata tensor {missing}") from None
    experts = []
    for i in range(count):
        prefix = f"expert.{which}.{i}."
        try:
            a = tensors[prefix + "a"]
            b = tensors[prefix + "b"]
            scale = tensors[prefix + "scale"].item()
            rank = int(tensors[prefix + "rank"].item())
        except KeyError as missing:
            raise CheckpointError(f"{path}: missing tensor {missing}") from None
        experts.append(LowRankExpert(a, b, rank, scale, frozen=True))
    return which, experts, _read_fingerprint(tensors, "meta.", path)


def assemble_stage3(net: DenoiserNet, face_path, hand_path) -> None:
    """Attach both trained expert sets to a stage-1 net, in place.

    Refuses expert checkpoints whose base fingerprint does not match the
    net, and checkpoints whose role does not match their slot.
    """
    if net.mole_layers():
        raise ContractError("assemble_stage3: net is already wrapped")
    fp = base_fingerprint(net)
    loaded = {}
    for role, path in (("face", face_path), ("hand", hand_path)):
        which, experts, ckpt_fp = load_expert_checkpoint(path)
        if which != role:
            raise ConfigError(f"{path}: holds the {which} expert but was given as the {role} checkpoint")
        if ckpt_fp != fp:
            raise ContractError(
                f"{path}: {which} expert was trained against a different base (fingerprint mismatch)"
            )
        if len(experts) != len(net.hidden):
            raise ContractError(f"{path}: expert count {len(experts)} does not match {len(net.hidden)} hidden layers")
        loaded[role] = experts
    for i, base in enumerate(list(net.hidden)):
        net.hidden[i] = wrap_layer(base, [loaded["face"][i], loaded["hand"][i]])
    net.head.set_frozen(True)
