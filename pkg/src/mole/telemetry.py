"""Gate-trajectory and expert-norm telemetry.

Traced sampling runs record, for every mixture layer at every step, the
global gate scalars g, the per-token local gate maps s, and the L2 norms
of the expert branch outputs.  This module averages those records across
runs and exports them as CSV tables and portable PGM heatmaps.

Instrumentation is observation-only: a traced run and an untraced run
with the same seed produce bit-identical images.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import gen_closeup, gen_scene
from .diffusion import NoiseSchedule, RunTrace, p_sample_loop, q_sample
from .errors import ContractError, DimensionError, MoleError
from .net import DenoiserNet

__all__ = [
    "GateTrace",
    "NormTrace",
    "collect_runs",
    "trace_gates",
    "expert_norms",
    "steered_init",
    "export_csv",
    "export_heatmap",
    "write_analysis",
    "STEER_T",
]

# Noise level used to steer traced runs toward a content regime: the run
# starts from a close-up image noised to step STEER_T rather than from
# pure noise. Moderate noise keeps enough content for the gates to react
# to while leaving the sampler real denoising work to do.
STEER_T = 60

# rng stream tag for steering noise, disjoint from the dataset streams.
_STEER_STREAM = 9

_FLOAT_FMT = ".17g"


@dataclass
class GateTrace:
    """Per-step, per-layer gate statistics averaged over sampling runs.

    ``steps`` holds the sampled step indices in run order (descending t);
    ``layers`` the positions of the mixture layers within the network.
    ``g``, ``s_mean``, ``s_min`` and ``s_max`` are (T, L, e) arrays; the
    s summaries are per-run token statistics averaged across runs.
    ``s_maps`` optionally holds the full (T, L, n, e) token maps,
    likewise run-averaged.  A layer index of -1 denotes the average over
    layers.
    """

    group: str
    steps: np.ndarray
    layers: np.ndarray
    g: np.ndarray
    s_mean: np.ndarray
    s_min: np.ndarray
    s_max: np.ndarray
    s_maps: np.ndarray | None
    runs: int

    @property
    def n_experts(self) -> int:
        return self.g.shape[-1]

    def mean_g(self) -> np.ndarray:
        """Per-expert global gate averaged over all steps and layers."""
        return self.g.mean(axis=(0, 1))

    def layer_average(self) -> "GateTrace":
        """Collapse the layer axis to a single averaged pseudo-layer."""
        maps = None if self.s_maps is None else self.s_maps.mean(axis=1, keepdims=True)
        return GateTrace(
            group=self.group,
            steps=self.steps,
            layers=np.array([-1]),
            g=self.g.mean(axis=1, keepdims=True),
            s_mean=self.s_mean.mean(axis=1, keepdims=True),
            s_min=self.s_min.mean(axis=1, keepdims=True),
            s_max=self.s_max.mean(axis=1, keepdims=True),
            s_maps=maps,
            runs=self.runs,
        )


@dataclass
class NormTrace:
    """Per-step branch-output L2 norms, layer-averaged, run-averaged."""

    group: str
    steps: np.ndarray
    y_norms: np.ndarray
    runs: int

    @property
    def n_experts(self) -> int:
        return self.y_norms.shape[-1]


def _require_mole(net: DenoiserNet, op: str) -> None:
    if not net.mole_layers():
        raise ContractError(f"{op}: net contains no mixture layers to trace")


def _init_for(x_init, seed: int):
    if x_init is None:
        return None
    if callable(x_init):
        return x_init(seed)
    return x_init[seed]


def collect_runs(net: DenoiserNet, sched: NoiseSchedule, seeds, x_init=None) -> list[RunTrace]:
    """Run the sampler once per seed with tracing on; return the traces.

    ``x_init`` may be None (pure-noise starts), a mapping seed -> image,
    or a callable seed -> image supplying each run's starting point.
    """
    _require_mole(net, "collect_runs")
    runs = []
    for seed in seeds:
        _, run = p_sample_loop(net, sched, seed=seed, trace=True, x_init=_init_for(x_init, seed))
        runs.append(run)
    return runs


def _stack_run(run: RunTrace):
    """One run's records as arrays: steps (T,), layers (L,), g/s stats."""
    steps = np.array([rec.t for rec in run.steps])
    layers = np.array([lay.layer for lay in run.steps[0].layers])
    g = np.array([[lay.g for lay in rec.layers] for rec in run.steps])
    s = [[lay.s for lay in rec.layers] for rec in run.steps]
    s = np.array(s)  # (T, L, n, e)
    norms = np.array([[lay.y_norms for lay in rec.layers] for rec in run.steps])
    return steps, layers, g, s, norms


def _check_consistent(ref_steps, ref_layers, steps, layers, op: str) -> None:
    if not (np.array_equal(ref_steps, steps) and np.array_equal(ref_layers, layers)):
        raise ContractError(f"{op}: runs disagree on step or layer structure")


def trace_gates(seeds, net: DenoiserNet, sched: NoiseSchedule, group: str = "", x_init=None, runs: list[RunTrace] | None = None, keep_maps: bool = True) -> GateTrace:
    """Average gate observations over traced sampling runs.

    Accepts either seeds (runs the sampler itself) or pre-collected
    ``runs``.  Every statistic is the exact arithmetic mean of the
    per-run records.
    """
    _require_mole(net, "trace_gates")
    if runs is None:
        runs = collect_runs(net, sched, seeds, x_init=x_init)
    if not runs:
        raise ContractError("trace_gates: no runs to average")

    steps = layers = None
    g_sum = mean_sum = min_sum = max_sum = maps_sum = None
    for run in runs:
        r_steps, r_layers, g, s, _ = _stack_run(run)
        if steps is None:
            steps, layers = r_steps, r_layers
            g_sum = np.zeros_like(g)
            mean_sum = np.zeros_like(g)
            min_sum = np.zeros_like(g)
            max_sum = np.zeros_like(g)
            maps_sum = np.zeros_like(s) if keep_maps else None
        else:
            _check_consistent(steps, layers, r_steps, r_layers, "trace_gates")
        g_sum += g
        mean_sum += s.mean(axis=2)
        min_sum += s.min(axis=2)
        max_sum += s.max(axis=2)
        if keep_maps:
            maps_sum += s
    count = len(runs)
    return GateTrace(
        group=group,
        steps=steps,
        layers=layers,
        g=g_sum / count,
        s_mean=mean_sum / count,
        s_min=min_sum / count,
        s_max=max_sum / count,
        s_maps=None if maps_sum is None else maps_sum / count,
        runs=count,
    )


def expert_norms(seeds, net: DenoiserNet, sched: NoiseSchedule, group: str = "", x_init=None, runs: list[RunTrace] | None = None) -> NormTrace:
    """Average per-step branch-output L2 norms over traced runs.

    Norms are averaged over the mixture layers within each run, then
    across runs.
    """
    _require_mole(net, "expert_norms")
    if runs is None:
        runs = collect_runs(net, sched, seeds, x_init=x_init)
    if not runs:
        raise ContractError("expert_norms: no runs to average")

    steps = layers = norm_sum = None
    for run in runs:
        r_steps, r_layers, _, _, norms = _stack_run(run)
        if steps is None:
            steps, layers = r_steps, r_layers
            norm_sum = np.zeros(norms.mean(axis=1).shape)
        else:
            _check_consistent(steps, layers, r_steps, r_layers, "expert_norms")
        norm_sum += norms.mean(axis=1)
    return NormTrace(group=group, steps=steps, y_norms=norm_sum / len(runs), runs=len(runs))


def steered_init(kind: str, seed: int, sched: NoiseSchedule, t_steer: int = STEER_T) -> np.ndarray:
    """Starting image for a run steered toward a content regime.

    Draws the regime's image for ``seed`` and noises it to step
    ``t_steer`` of the forward process, using a noise stream disjoint
    from the dataset streams.
    """
    scene = gen_scene(seed) if kind == "scene" else gen_closeup(kind, seed)
    eps = np.random.default_rng([_STEER_STREAM, seed]).standard_normal(scene.image.shape)
    return q_sample(scene.image, t_steer, eps, sched)


def _write_text(path, text: str, op: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise MoleError(f"{op}: cannot write '{path}': {exc}") from exc


def _gate_csv(trace: GateTrace) -> str:
    lines = ["step,layer,expert,g,s_mean,s_min,s_max"]
    for ti, step in enumerate(trace.steps):
        for li, layer in enumerate(trace.layers):
            for e in range(trace.n_experts):
                vals = (trace.g[ti, li, e], trace.s_mean[ti, li, e], trace.s_min[ti, li, e], trace.s_max[ti, li, e])
                lines.append(f"{int(step)},{int(layer)},{e}," + ",".join(format(v, _FLOAT_FMT) for v in vals))
    return "\n".join(lines) + "\n"


def _norm_csv(trace: NormTrace) -> str:
    if trace.n_experts != 2:
        raise ContractError(f"export_csv: norm table expects 2 experts, got {trace.n_experts}")
    lines = ["step,y1_norm,y2_norm"]
    for ti, step in enumerate(trace.steps):
        vals = (trace.y_norms[ti, 0], trace.y_norms[ti, 1])
        lines.append(f"{int(step)}," + ",".join(format(v, _FLOAT_FMT) for v in vals))
    return "\n".join(lines) + "\n"


def export_csv(trace, path) -> None:
    """Write a trace as CSV with LF line endings.

    Gate tables use the header ``step,layer,expert,g,s_mean,s_min,s_max``
    with one row per (step, layer, expert); norm tables use
    ``step,y1_norm,y2_norm`` with one row per step.  Values carry full
    float64 precision.
    """
    if isinstance(trace, GateTrace):
        text = _gate_csv(trace)
    elif isinstance(trace, NormTrace):
        text = _norm_csv(trace)
    else:
        raise ContractError(f"export_csv: unsupported trace type {type(trace).__name__}")
    _write_text(path, text, "export_csv")


def export_heatmap(s_map, grid: tuple[int, int], path) -> None:
    """Write a local-gate map as a binary PGM (P5) heatmap.

    ``s_map`` holds one value per token in [0, 1]; ``grid`` gives the
    token grid as (rows, cols) and must match its length.  Bytes are
    round-half-up: value = floor(255*s + 0.5).
    """
    data = np.asarray(getattr(s_map, "data", s_map), dtype=np.float64).reshape(-1)
    rows, cols = grid
    if data.size != rows * cols:
        raise DimensionError(f"export_heatmap: map has {data.size} values but grid is {rows}x{cols}")
    levels = np.clip(np.floor(255.0 * data + 0.5), 0.0, 255.0).astype(np.uint8)
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(header + levels.tobytes())
    except OSError as exc:
        raise MoleError(f"export_heatmap: cannot write '{path}': {exc}") from exc


def write_analysis(run_dir, group: str, gates: GateTrace, norms: NormTrace, grid: tuple[int, int]) -> list[Path]:
    """Emit the analysis bundle for one group under ``run_dir``.

    Writes ``analysis/gates/<group>.csv`` (layer-averaged) plus one
    ``<group>.layer<k>.csv`` per mixture layer, ``analysis/norms/<group>.csv``,
    and, when full maps were kept, one time-averaged heatmap
    ``<group>.expert<i>.pgm`` per expert.  Returns the paths written.
    """
    run_dir = Path(run_dir)
    gates_dir = run_dir / "analysis" / "gates"
    norms_dir = run_dir / "analysis" / "norms"
    written = []

    averaged = gates.layer_average()
    path = gates_dir / f"{group}.csv"
    export_csv(averaged, path)
    written.append(path)
    for li, layer in enumerate(gates.layers):
        per_layer = GateTrace(
            group=gates.group,
            steps=gates.steps,
            layers=gates.layers[li : li + 1],
            g=gates.g[:, li : li + 1],
            s_mean=gates.s_mean[:, li : li + 1],
            s_min=gates.s_min[:, li : li + 1],
            s_max=gates.s_max[:, li : li + 1],
            s_maps=None,
            runs=gates.runs,
        )
        path = gates_dir / f"{group}.layer{int(layer)}.csv"
        export_csv(per_layer, path)
        written.append(path)

    path = norms_dir / f"{group}.csv"
    export_csv(norms, path)
    written.append(path)

    if averaged.s_maps is not None:
        time_avg = averaged.s_maps.mean(axis=(0, 1))  # (n, e)
        for e in range(gates.n_experts):
            path = gates_dir / f"{group}.expert{e}.pgm"
            export_heatmap(time_avg[:, e], grid, path)
            written.append(path)
    return written
