"""JSON run configuration: validation, defaults, and named presets.

A run config is a JSON document with the top-level keys ``model``,
``schedule``, ``data``, ``stage``, ``analysis`` and ``out_dir``.  Every
field has a default except ``out_dir``; unknown keys anywhere are
rejected with the full path to the offending field.  The ``MOLE_OUT``
environment variable overrides ``out_dir`` when set.

Desk-scale defaults are tuned so the full three-stage pipeline runs in
well under a minute on a laptop while still exhibiting content-aware
gating.  Paper-scale presets are included for provenance only; they are
not runnable at desk scale.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .data import KINDS, make_dataset
from .diffusion import NoiseSchedule, make_schedule
from .errors import ConfigError
from .net import DenoiserNet, NONLINEARITIES, init_denoiser
from .optim import OPTIMIZERS
from .pipeline import STAGES, StageConfig

__all__ = [
    "ModelSettings",
    "ScheduleSettings",
    "DataSettings",
    "AnalysisSettings",
    "RunConfig",
    "DESK_STAGES",
    "PAPER_PRESETS",
    "STAGE_DATASETS",
    "parse_config",
    "load_config",
    "default_config",
]

_WEIGHTINGS = ("uniform", "min-snr")
STAGE_DATASETS = KINDS + ("mixture",)

# Per-stage training defaults. The stage-2 pair keeps a 2:1 learning-rate
# ratio with an inverse 1:2 step ratio (equal lr x steps budget) so
# neither expert dominates; stage 3 trains only the gates, with weight
# decay off so saturated gates are not pulled back toward 0.5, on an
# equal mixture of scenes and both close-up sets.
DESK_STAGES: dict[str, dict] = {
    "stage1": dict(steps=1000, batch_size=32, learning_rate=2e-3, optimizer="adamw",
                   weighting="min-snr", gamma=5.0, seed=1, dataset="scene", rank=4,
                   weight_decay=None),
    "stage2-face": dict(steps=300, batch_size=32, learning_rate=2e-3, optimizer="adamw",
                        weighting="uniform", gamma=5.0, seed=2, dataset="face_closeup",
                        rank=4, weight_decay=None),
    "stage2-hand": dict(steps=600, batch_size=32, learning_rate=1e-3, optimizer="adamw",
                        weighting="uniform", gamma=5.0, seed=3, dataset="hand_closeup",
                        rank=4, weight_decay=None),
    "stage3": dict(steps=800, batch_size=32, learning_rate=2e-2, optimizer="adamw",
                   weighting="uniform", gamma=5.0, seed=4, dataset="mixture", rank=4,
                   weight_decay=0.0),
}

# Published full-scale hyperparameters, selectable via {"preset": name}
# inside a stage section. Provenance only — far beyond desk budgets.
PAPER_PRESETS: dict[str, dict] = {
    "paper-stage1": dict(learning_rate=2e-6, batch_size=64, optimizer="lion", steps=300_000),
    "paper-stage2-face": dict(learning_rate=2e-5, rank=256, steps=30_000),
    "paper-stage2-hand": dict(learning_rate=1e-5, rank=256, steps=60_000),
    "paper-stage3": dict(learning_rate=1e-5, steps=50_000),
}


@dataclass(frozen=True)
class ModelSettings:
    image_size: int = 16
    patch: int = 4
    hidden_width: int = 64
    hidden_layers: int = 2
    time_width: int = 8
    nonlinearity: str = "tanh"
    seed: int = 0


@dataclass(frozen=True)
class ScheduleSettings:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class DataSettings:
    scene_count: int = 64
    closeup_count: int = 32
    seed: int = 100


@dataclass(frozen=True)
class AnalysisSettings:
    runs: int = 20
    steer_t: int = 60
    seed: int = 5000


def _check_type(value, kind, path: str):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(value).__name__}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {type(value).__name__}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {type(value).__name__}")
        return value
    raise AssertionError(kind)


def _merge(defaults: dict, given, path: str, types: dict) -> dict:
    if given is None:
        return dict(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: expected an object")
    merged = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"{path}.{key}: unknown key")
        if value is None and defaults[key] is None:
            continue
        merged[key] = _check_type(value, types[key], f"{path}.{key}")
    return merged


_MODEL_TYPES = dict(image_size=int, patch=int, hidden_width=int, hidden_layers=int,
                    time_width=int, nonlinearity=str, seed=int)
_SCHEDULE_TYPES = dict(T=int, beta_start=float, beta_end=float)
_DATA_TYPES = dict(scene_count=int, closeup_count=int, seed=int)
_ANALYSIS_TYPES = dict(runs=int, steer_t=int, seed=int)
_STAGE_TYPES = dict(steps=int, batch_size=int, learning_rate=float, optimizer=str,
                    weighting=str, gamma=float, seed=int, dataset=str, rank=int,
                    weight_decay=float)


def _parse_model(given) -> ModelSettings:
    vals = _merge(ModelSettings().__dict__, given, "config.model", _MODEL_TYPES)
    m = ModelSettings(**vals)
    if m.image_size < 1 or m.patch < 1 or m.image_size % m.patch != 0:
        raise ConfigError(f"config.model.patch: image_size {m.image_size} is not divisible by patch {m.patch}")
    if m.hidden_width < 1:
        raise ConfigError(f"config.model.hidden_width: must be positive, got {m.hidden_width}")
    if m.hidden_layers < 1:
        raise ConfigError(f"config.model.hidden_layers: must be positive, got {m.hidden_layers}")
    if m.time_width < 2 or m.time_width % 2 != 0:
        raise ConfigError(f"config.model.time_width: must be a positive even number, got {m.time_width}")
    if m.nonlinearity not in NONLINEARITIES:
        raise ConfigError(f"config.model.nonlinearity: unknown nonlinearity '{m.nonlinearity}'")
    return m


def _parse_schedule(given) -> ScheduleSettings:
    vals = _merge(ScheduleSettings().__dict__, given, "config.schedule", _SCHEDULE_TYPES)
    s = ScheduleSettings(**vals)
    if s.T < 2:
        raise ConfigError(f"config.schedule.T: must be at least 2, got {s.T}")
    if not (0.0 < s.beta_start <= s.beta_end < 1.0):
        raise ConfigError(f"config.schedule.beta_start: need 0 < beta_start <= beta_end < 1, got {s.beta_start}, {s.beta_end}")
    return s


def _parse_data(given) -> DataSettings:
    vals = _merge(DataSettings().__dict__, given, "config.data", _DATA_TYPES)
    d = DataSettings(**vals)
    if d.scene_count < 1 or d.closeup_count < 1:
        raise ConfigError("config.data.scene_count: dataset counts must be positive")
    return d


def _parse_analysis(given, schedule_T: int) -> AnalysisSettings:
    defaults = dict(AnalysisSettings().__dict__)
    # The default steering step scales with the schedule: 60% of T,
    # capped at the tuned value for the default 100-step schedule.
    defaults["steer_t"] = min(60, schedule_T * 3 // 5)
    vals = _merge(defaults, given, "config.analysis", _ANALYSIS_TYPES)
    a = AnalysisSettings(**vals)
    if a.runs < 1:
        raise ConfigError(f"config.analysis.runs: must be positive, got {a.runs}")
    if a.steer_t < 0:
        raise ConfigError(f"config.analysis.steer_t: must be nonnegative, got {a.steer_t}")
    return a


def _parse_stage(name: str, given) -> StageConfig:
    path = f"config.stage.{name}"
    defaults = dict(DESK_STAGES[name])
    overrides = {} if given is None else dict(given)
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: expected an object")
    preset = overrides.pop("preset", None)
    if preset is not None:
        if preset not in PAPER_PRESETS:
            raise ConfigError(f"{path}.preset: unknown preset '{preset}' (expected one of {sorted(PAPER_PRESETS)})")
        defaults.update(PAPER_PRESETS[preset])
    vals = _merge(defaults, overrides, path, _STAGE_TYPES)
    cfg = StageConfig(stage=name, **vals)
    if cfg.optimizer not in OPTIMIZERS:
        raise ConfigError(f"{path}.optimizer: unknown optimizer '{cfg.optimizer}'")
    if cfg.weighting not in _WEIGHTINGS:
        raise ConfigError(f"{path}.weighting: unknown weighting '{cfg.weighting}'")
    if cfg.dataset not in STAGE_DATASETS:
        raise ConfigError(f"{path}.dataset: unknown dataset '{cfg.dataset}' (expected one of {STAGE_DATASETS})")
    if cfg.gamma <= 0.0:
        raise ConfigError(f"{path}.gamma: must be positive, got {cfg.gamma}")
    if cfg.rank < 1:
        raise ConfigError(f"{path}.rank: must be positive, got {cfg.rank}")
    if cfg.weight_decay is not None and cfg.weight_decay < 0.0:
        raise ConfigError(f"{path}.weight_decay: must be nonnegative, got {cfg.weight_decay}")
    return cfg


@dataclass(frozen=True)
class RunConfig:
    """A fully validated run configuration."""

    model: ModelSettings
    schedule: ScheduleSettings
    data: DataSettings
    stages: dict
    analysis: AnalysisSettings
    out_dir: str

    def stage(self, name: str) -> StageConfig:
        if name not in self.stages:
            raise ConfigError(f"stage: unknown stage '{name}' (expected one of {STAGES})")
        return self.stages[name]

    def build_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule.T, self.schedule.beta_start, self.schedule.beta_end)

    def build_net(self) -> DenoiserNet:
        m = self.model
        return init_denoiser(image_size=m.image_size, patch=m.patch, hidden_width=m.hidden_width,
                             hidden_layers=m.hidden_layers, time_width=m.time_width,
                             nonlinearity=m.nonlinearity, seed=m.seed)

    def make_data(self, kind: str) -> list:
        """Build the named dataset; ``mixture`` concatenates all three."""
        if kind == "mixture":
            return sum((self.make_data(k) for k in KINDS), [])
        count = self.data.scene_count if kind == "scene" else self.data.closeup_count
        return make_dataset(kind, count, seed=self.data.seed)

    def out_path(self) -> Path:
        return Path(self.out_dir)


def parse_config(doc: dict, env: dict | None = None) -> RunConfig:
    """Validate a decoded JSON document into a RunConfig."""
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    known = {"model", "schedule", "data", "stage", "analysis", "out_dir"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"config.{key}: unknown key")

    stage_doc = doc.get("stage")
    if stage_doc is None:
        stage_doc = {}
    if not isinstance(stage_doc, dict):
        raise ConfigError("config.stage: expected an object")
    for name in stage_doc:
        if name not in STAGES:
            raise ConfigError(f"config.stage.{name}: unknown stage (expected one of {STAGES})")

    schedule = _parse_schedule(doc.get("schedule"))
    analysis = _parse_analysis(doc.get("analysis"), schedule.T)
    if analysis.steer_t >= schedule.T:
        raise ConfigError(f"config.analysis.steer_t: must be below schedule.T ({schedule.T}), got {analysis.steer_t}")

    out_dir = env.get("MOLE_OUT", doc.get("out_dir"))
    if out_dir is None:
        raise ConfigError("config.out_dir: required (or set MOLE_OUT)")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("config.out_dir: expected a nonempty string")

    return RunConfig(
        model=_parse_model(doc.get("model")),
        schedule=schedule,
        data=_parse_data(doc.get("data")),
        stages={name: _parse_stage(name, stage_doc.get(name)) for name in STAGES},
        analysis=analysis,
        out_dir=out_dir,
    )


def load_config(path) -> RunConfig:
    """Read, decode and validate a JSON run config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read '{path}': {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: '{path}' is not valid JSON: {exc}") from exc
    return parse_config(doc)


def default_config(out_dir: str) -> RunConfig:
    """All-defaults config rooted at ``out_dir``."""
    return parse_config({"out_dir": out_dir}, env={})
