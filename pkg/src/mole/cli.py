"""Command-line surface: data generation, staged training, sampling, analysis.

Every command is deterministic given config + seed; outputs land only
under the run's output directory.  Exit status is 0 on success, 1 on
validation errors (bad flags, bad config, missing inputs), and 2 on
numeric failures (non-finite losses, gradient-check violations).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, default_config, load_config
from .data import KINDS, save_dataset
from .diffusion import denoise_loss, make_schedule, p_sample_loop
from .errors import ConfigError, EvaluationError, MoleError
from .net import wrap_denoiser
from .pipeline import (
    STAGES,
    assemble_stage3,
    load_net_checkpoint,
    save_expert_checkpoint,
    save_net_checkpoint,
    stage1_finetune,
    stage2_train_expert,
    stage3_train_gating,
)
from .telemetry import collect_runs, expert_norms, export_csv, steered_init, trace_gates, write_analysis
from .tensor import finite_diff_gradcheck

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse with validation failures reported as exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"error: {message}")  # SystemExit(str) exits 1


def _load_run_config(args) -> RunConfig:
    if args.config is None:
        if "MOLE_OUT" not in os.environ:
            raise ConfigError("missing --config (or set MOLE_OUT to use the built-in defaults)")
        return default_config(os.environ["MOLE_OUT"])
    return load_config(args.config)


def _ckpt_dir(cfg: RunConfig) -> Path:
    return cfg.out_path() / "ckpt"


def _require_file(path: Path, what: str, hint: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing {what} '{path}' ({hint})")
    return path


def _run_meta(stage_num: int, cfg: RunConfig, seed: int) -> dict:
    return {
        "stage": stage_num,
        "T": cfg.schedule.T,
        "beta_start": cfg.schedule.beta_start,
        "beta_end": cfg.schedule.beta_end,
        "seed": seed,
    }


def _print_losses(label: str, history: list) -> None:
    if history:
        print(f"{label}: {len(history)} steps, loss {history[0]:.6f} -> {history[-1]:.6f}")
    else:
        print(f"{label}: 0 steps")


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    data_dir = cfg.out_path() / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    for kind in KINDS:
        scenes = cfg.make_data(kind)
        path = data_dir / f"{kind}.ckpt"
        save_dataset(scenes, kind, path)
        print(f"wrote {len(scenes)} {kind} images -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    sched = cfg.build_schedule()
    stage_cfg = cfg.stage(args.stage)
    ckpts = _ckpt_dir(cfg)
    ckpts.mkdir(parents=True, exist_ok=True)
    stage1_path = ckpts / "stage1.ckpt"

    if args.stage == "stage1":
        net = cfg.build_net()
        state = stage1_finetune(net, stage_cfg, cfg.make_data(stage_cfg.dataset), sched)
        save_net_checkpoint(net, stage1_path, _run_meta(1, cfg, stage_cfg.seed))
        _print_losses("stage1", state.loss_history)
        print(f"wrote {stage1_path}")
    elif args.stage in ("stage2-face", "stage2-hand"):
        which = args.stage.split("-", 1)[1]
        _require_file(stage1_path, "stage-1 checkpoint", "run `train --stage stage1` first")
        net, _ = load_net_checkpoint(stage1_path)
        experts, state = stage2_train_expert(net, which, stage_cfg, cfg.make_data(stage_cfg.dataset), sched)
        path = ckpts / f"expert-{which}.ckpt"
        save_expert_checkpoint(which, experts, net, path, seed=stage_cfg.seed)
        _print_losses(args.stage, state.loss_history)
        print(f"wrote {path}")
    else:  # stage3
        _require_file(stage1_path, "stage-1 checkpoint", "run `train --stage stage1` first")
        for role in ("face", "hand"):
            _require_file(
                ckpts / f"expert-{role}.ckpt",
                f"{role} expert checkpoint",
                f"run `train --stage stage2-{role}` first",
            )
        net, _ = load_net_checkpoint(stage1_path)
        assemble_stage3(net, ckpts / "expert-face.ckpt", ckpts / "expert-hand.ckpt")
        state = stage3_train_gating(net, stage_cfg, cfg.make_data(stage_cfg.dataset), sched)
        path = ckpts / "stage3.ckpt"
        save_net_checkpoint(net, path, _run_meta(3, cfg, stage_cfg.seed))
        _print_losses("stage3", state.loss_history)
        print(f"wrote {path}")
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        if ".." in text:
            lo_text, hi_text = text.split("..", 1)
            lo, hi = int(lo_text), int(hi_text)
            if hi < lo:
                raise ConfigError(f"--seeds: empty range '{text}'")
            return list(range(lo, hi + 1))
        return [int(text)]
    except ValueError:
        raise ConfigError(f"--seeds: expected an integer or 'a..b' range, got '{text}'") from None


def _write_image_pgm(image: np.ndarray, path: Path) -> None:
    """Grey PGM of an image in [-1, 1], round-half-up to 8 bits."""
    levels = np.clip(np.floor(255.0 * (image + 1.0) / 2.0 + 0.5), 0.0, 255.0).astype(np.uint8)
    h, w = image.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + levels.tobytes())


def _meta_schedule(meta: dict):
    return make_schedule(int(meta["T"]), meta["beta_start"], meta["beta_end"])


def cmd_sample(args) -> int:
    ckpt = _require_file(Path(args.ckpt), "checkpoint", "train a model first")
    net, meta = load_net_checkpoint(ckpt)
    sched = _meta_schedule(meta)
    out = Path(os.environ.get("MOLE_OUT", args.out)) / "samples"
    out.mkdir(parents=True, exist_ok=True)
    for seed in _parse_seeds(args.seeds):
        image, run = p_sample_loop(net, sched, seed=seed, trace=args.trace)
        path = out / f"sample-{seed}.pgm"
        _write_image_pgm(image, path)
        written = [path]
        if args.trace:
            gates = trace_gates(None, net, sched, group=f"seed{seed}", runs=[run])
            norms = expert_norms(None, net, sched, group=f"seed{seed}", runs=[run])
            gate_path = out / f"sample-{seed}.gates.csv"
            norm_path = out / f"sample-{seed}.norms.csv"
            export_csv(gates.layer_average(), gate_path)
            export_csv(norms, norm_path)
            written += [gate_path, norm_path]
        print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    ckpt = _require_file(run_dir / "ckpt" / "stage3.ckpt", "stage-3 checkpoint", "run `train --stage stage3` first")
    net, meta = load_net_checkpoint(ckpt)
    sched = _meta_schedule(meta)
    steer_t = min(60, sched.T * 3 // 5) if args.steer_t is None else args.steer_t
    if not 0 <= steer_t < sched.T:
        raise ConfigError(f"--steer-t: must lie in [0, {sched.T - 1}], got {steer_t}")

    seeds = range(args.seed, args.seed + args.runs)
    runs = collect_runs(net, sched, seeds, x_init=lambda s: steered_init(args.group, s, sched, steer_t))
    gates = trace_gates(None, net, sched, group=args.group, runs=runs)
    norms = expert_norms(None, net, sched, group=args.group, runs=runs)
    grid = net.image_size // net.patch
    written = write_analysis(run_dir, args.group, gates, norms, grid=(grid, grid))

    g_face, g_hand = gates.mean_g()
    print(f"{args.group}: {gates.runs} runs, mean g_face {g_face:.4f}, mean g_hand {g_hand:.4f}, gap {g_face - g_hand:+.4f}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = default_config(".") if args.config is None else load_config(args.config)
    sched = cfg.build_schedule()
    net = cfg.build_net()
    wrap_denoiser(net, rank=cfg.stage("stage3").rank, seed=cfg.model.seed + 1)
    net.set_all_trainable(True)

    # Freshly wrapped nets sit at degenerate points (expert b factors and
    # gate weights are zero), which would hide wrong gradients behind
    # zero gradients. Jitter every parameter before checking.
    rng = np.random.default_rng(cfg.model.seed + 2)
    params = net.named_parameters()
    for p in params.values():
        p.data[...] += rng.normal(scale=0.1, size=p.data.shape)

    size = net.image_size
    batch = []
    for t in (1, sched.T // 2, sched.T - 1):
        x0 = np.clip(rng.normal(scale=0.5, size=(size, size)), -1.0, 1.0)
        batch.append((x0, t, rng.standard_normal((size, size))))

    errors = finite_diff_gradcheck(
        lambda: denoise_loss(net, batch, sched),
        params,
        max_entries_per_param=args.entries,
        rng=np.random.default_rng(cfg.model.seed + 3),
    )
    worst = max(errors.values())
    for name in sorted(errors):
        print(f"{name}: {errors[name]:.3e}")
    print(f"max relative error: {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    if worst > GRADCHECK_TOL:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_inspect_ckpt(args) -> int:
    path = _require_file(Path(args.ckpt), "checkpoint", "nothing to inspect")
    tensors = load_checkpoint(path)
    total = 0
    for name, tensor in tensors.items():
        shape = "x".join(str(d) for d in tensor.shape) or "scalar"
        total += tensor.data.nbytes
        print(f"{name}  {tensor.data.dtype}  {shape}")
    print(f"{len(tensors)} tensors, {total} payload bytes")
    return EXIT_OK


# -------------------------------------------------------------------- main


def _build_parser() -> _Parser:
    parser = _Parser(prog="mole", description="Low-rank expert mixtures on a toy diffusion testbed.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic datasets under out_dir/data")
    p.add_argument("--config", help="run config JSON (defaults used when MOLE_OUT is set)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one pipeline stage and write its checkpoint")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw images from a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="net checkpoint file")
    p.add_argument("--seeds", required=True, help="seed or inclusive range a..b")
    p.add_argument("--trace", action="store_true", help="also write per-seed gate/norm CSVs")
    p.add_argument("--out", default=".", help="output root (MOLE_OUT overrides)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("analyze", help="emit gate/norm CSVs and heatmaps for a run")
    p.add_argument("--run", required=True, help="run directory holding ckpt/stage3.ckpt")
    p.add_argument("--group", required=True, choices=KINDS)
    p.add_argument("--runs", type=int, default=20, help="number of traced runs to average")
    p.add_argument("--seed", type=int, default=5000, help="first trace seed")
    p.add_argument("--steer-t", type=int, default=None, help="forward-noise step for steering inits")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of the wrapped toy net")
    p.add_argument("--config", help="run config JSON (optional)")
    p.add_argument("--entries", type=int, default=None, help="sampled entries per parameter (default: all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-ckpt", help="list a checkpoint's tensor directory")
    p.add_argument("ckpt", help="checkpoint file")
    p.set_defaults(func=cmd_inspect_ckpt)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MoleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
