"""Desk-scale DDPM: linear schedule, noising, loss, ancestral sampling.

The loss is per-pixel mean squared error against the injected noise,
optionally weighted per timestep by the min-SNR rule
w_t = min(SNR_t, gamma) / SNR_t with SNR_t = abar_t / (1 - abar_t).
Sampling walks the reverse chain with the standard posterior mean and
variance; tracing records every mixture layer's gate values and branch
norms without touching the computation, so traced and untraced runs
with one seed produce bit-identical images.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .net import DenoiserNet, patchify
from .tensor import Tensor


class NoiseSchedule:
    """Per-step variance parameters; all arrays are float64 length T."""

    __slots__ = ("T", "betas", "alphas", "alpha_bars")

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("NoiseSchedule: betas must be a non-empty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("NoiseSchedule: betas must lie strictly in (0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise ConfigError("NoiseSchedule: betas must be nondecreasing")
        self.T = betas.size
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)


def make_schedule(T_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta interpolation over T_steps >= 2."""
    if T_steps < 2:
        raise ConfigError(f"make_schedule: T must be >= 2, got {T_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"make_schedule: need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T_steps))


def _check_step(sched: NoiseSchedule, t: int) -> None:
    if not 0 <= t < sched.T:
        raise ContractError(f"step index {t} out of range for T={sched.T}")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_step(sched, t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"q_sample: x0 shape {x0.shape} does not match eps shape {eps.shape}")
    abar = sched.alpha_bars[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def min_snr_weight(sched: NoiseSchedule, t: int, gamma: float = 5.0) -> float:
    """min(SNR_t, gamma) / SNR_t; in (0, 1], and 1 wherever SNR_t <= gamma."""
    _check_step(sched, t)
    if gamma <= 0.0:
        raise ConfigError(f"min_snr_weight: gamma must be positive, got {gamma}")
    abar = sched.alpha_bars[t]
    snr = abar / (1.0 - abar)
    return min(snr, gamma) / snr


def denoise_loss(
    net: DenoiserNet,
    batch: list[tuple[np.ndarray, int, np.ndarray]],
    sched: NoiseSchedule,
    weighting: str = "uniform",
    gamma: float = 5.0,
) -> Tensor:
    """Batch-mean weighted per-pixel MSE between predicted and true noise.

    ``batch`` holds (x0, t, eps) triples. The squared error of each
    sample is averaged over its pixels, multiplied by w_t, then averaged
    over the batch.
    """
    if not batch:
        raise ContractError("denoise_loss: batch must be nonempty")
    if weighting not in ("uniform", "min-snr"):
        raise ConfigError(f"denoise_loss: unknown weighting '{weighting}'")
    n_pix = net.image_size * net.image_size
    total = None
    for x0, t, eps in batch:
        x_t = q_sample(x0, t, eps, sched)
        pred = net.forward_tokens(x_t, t)
        target = Tensor(patchify(np.asarray(eps, dtype=np.float64), net.patch))
        resid = T.sub(pred, target)
        w = 1.0 if weighting == "uniform" else min_snr_weight(sched, t, gamma)
        term = T.scale(T.sum_all(T.mul(resid, resid)), w / n_pix)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(batch))


class LayerStepRecord:
    """One mixture layer's observations at one sampling step."""

    __slots__ = ("layer", "g", "s", "y_norms")

    def __init__(self, layer: int, g: np.ndarray, s: np.ndarray, y_norms: np.ndarray):
        self.layer = layer
        self.g = g
        self.s = s
        self.y_norms = y_norms


class StepRecord:
    __slots__ = ("t", "layers")

    def __init__(self, t: int, layers: list[LayerStepRecord]):
        self.t = t
        self.layers = layers


class RunTrace:
    """Per-step, per-layer gate and norm observations of one sampling run."""

    __slots__ = ("steps",)

    def __init__(self, steps: list[StepRecord]):
        self.steps = steps


def p_sample_loop(
    net: DenoiserNet,
    sched: NoiseSchedule,
    seed: int = 0,
    trace: bool = False,
    x_init: np.ndarray | None = None,
) -> tuple[np.ndarray, RunTrace | None]:
    """Ancestral sampling from step T-1 down to 0.

    Starts from seeded standard normal noise, or from ``x_init`` when
    given (e.g. a partially noised image steering the run toward a
    content regime). Per-step noise draws come from the same seeded
    stream either way, and tracing consumes no randomness.
    """
    rng = np.random.default_rng(seed)
    size = net.image_size
    if x_init is None:
        x = rng.standard_normal((size, size))
    else:
        x = np.array(x_init, dtype=np.float64)
        if x.shape != (size, size):
            raise DimensionError(f"p_sample_loop: x_init shape {x.shape} does not match image size {size}")

    mole_idx = [i for i, _ in net.mole_layers()]
    steps: list[StepRecord] = []
    for t in range(sched.T - 1, -1, -1):
        collect: list | None = [] if trace else None
        eps_hat = net.predict_eps(x, t, collect)
        if trace:
            records = []
            for layer_pos, obs in zip(mole_idx, collect):
                g = obs.gates.g.data.copy()
                s = obs.gates.s.data.copy()
                norms = np.array([np.linalg.norm(b.data) for b in obs.branches])
                records.append(LayerStepRecord(layer_pos, g, s, norms))
            steps.append(StepRecord(t, records))

        beta = sched.betas[t]
        abar = sched.alpha_bars[t]
        mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(sched.alphas[t])
        if t > 0:
            abar_prev = sched.alpha_bars[t - 1]
            var = beta * (1.0 - abar_prev) / (1.0 - abar)
            x = mean + np.sqrt(var) * rng.standard_normal((size, size))
        else:
            x = mean
    return x, (RunTrace(steps) if trace else None)
