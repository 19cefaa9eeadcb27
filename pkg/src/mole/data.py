"""Synthetic two-part grayscale scenes.

Images pair two visually distinct glyphs: a "face" drawn as concentric
rings and a "hand" drawn as oriented parallel stripes. A scene holds the
face in the left half and the hand in the right half; close-ups fill the
frame with a single glyph. Rings and stripes are linearly separable in
patch space, which is what lets tiny gates become content-aware.

All pixels live in [-1, 1]. Generation is deterministic per seed, with
independent streams per kind so the three subsets never share noise.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError
from .tensor import Tensor

IMAGE_SIZE = 16
GLYPH_AMPLITUDE = 0.9
BACKGROUND_STD = 0.05
FACE_RING_COUNT = 3.0
HAND_STRIPE_CYCLES = 3.0

KINDS = ("scene", "face_closeup", "hand_closeup")
_KIND_STREAM = {"scene": 0, "face_closeup": 1, "hand_closeup": 2}


class SyntheticScene:
    """One grayscale sample plus part-presence flags."""

    __slots__ = ("image", "face_present", "hand_present", "kind")

    def __init__(self, image: np.ndarray, face_present: bool, hand_present: bool, kind: str):
        self.image = image
        self.face_present = bool(face_present)
        self.hand_present = bool(hand_present)
        self.kind = kind


def ring_pattern(size: int, center: tuple[float, float], radius: float, rings: float = FACE_RING_COUNT) -> np.ndarray:
    """Concentric rings: cos(pi * rings * r / radius) inside the radius."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = np.hypot(xx - center[0], yy - center[1])
    pattern = np.cos(np.pi * rings * r / radius)
    return np.where(r <= radius, pattern, 0.0)


def stripe_pattern(size: int, angle: float, cycles: float = HAND_STRIPE_CYCLES, phase: float = 0.0) -> np.ndarray:
    """Parallel stripes: cos along the direction (cos angle, sin angle)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    return np.cos(2.0 * np.pi * cycles * proj / size + phase)


def _rng(kind: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([_KIND_STREAM[kind], seed])


def gen_scene(seed: int) -> SyntheticScene:
    """Face rings in the left half, hand stripes in the right half."""
    rng = _rng("scene", seed)
    size = IMAGE_SIZE
    half = size // 2
    img = rng.normal(scale=BACKGROUND_STD, size=(size, size))

    cx = half / 2.0 + rng.uniform(-1.0, 1.0)
    cy = size / 2.0 + rng.uniform(-2.0, 2.0)
    radius = half / 2.0 + rng.uniform(-0.5, 0.5)
    face = ring_pattern(size, (cx, cy), radius)
    face[:, half:] = 0.0
    img += GLYPH_AMPLITUDE * face

    angle = rng.uniform(0.0, np.pi)
    cycles = HAND_STRIPE_CYCLES + rng.uniform(-0.5, 0.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    hand = stripe_pattern(size, angle, cycles, phase)
    hand[:, :half] = 0.0
    img += GLYPH_AMPLITUDE * hand

    return SyntheticScene(np.clip(img, -1.0, 1.0), True, True, "scene")


def gen_closeup(kind: str, seed: int) -> SyntheticScene:
    """A single glyph filling the frame; kind picks rings or stripes."""
    if kind not in ("face_closeup", "hand_closeup"):
        raise ConfigError(f"gen_closeup: unknown kind '{kind}' (expected face_closeup or hand_closeup)")
    rng = _rng(kind, seed)
    size = IMAGE_SIZE
    img = rng.normal(scale=BACKGROUND_STD, size=(size, size))
    if kind == "face_closeup":
        cx = size / 2.0 + rng.uniform(-1.0, 1.0)
        cy = size / 2.0 + rng.uniform(-1.0, 1.0)
        radius = size / 2.0 - 1.0 + rng.uniform(-0.7, 0.7)
        img += GLYPH_AMPLITUDE * ring_pattern(size, (cx, cy), radius)
        face, hand = True, False
    else:
        angle = rng.uniform(0.0, np.pi)
        cycles = HAND_STRIPE_CYCLES + rng.uniform(-0.5, 0.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img += GLYPH_AMPLITUDE * stripe_pattern(size, angle, cycles, phase)
        face, hand = False, True
    return SyntheticScene(np.clip(img, -1.0, 1.0), face, hand, kind)


def generate(kind: str, seed: int) -> SyntheticScene:
    if kind == "scene":
        return gen_scene(seed)
    return gen_closeup(kind, seed)


def make_dataset(kind: str, count: int, seed: int = 0) -> list[SyntheticScene]:
    """``count`` samples of one kind, seeded ``seed .. seed+count-1``."""
    if kind not in KINDS:
        raise ConfigError(f"make_dataset: unknown kind '{kind}'")
    if count < 1:
        raise ConfigError(f"make_dataset: count must be positive, got {count}")
    return [generate(kind, seed + i) for i in range(count)]


def save_dataset(scenes: list[SyntheticScene], split: str, path: "str | Path") -> None:
    """Persist to the tensor container plus a JSON manifest alongside."""
    path = Path(path)
    named = {f"data.{split}.{i}": Tensor(s.image) for i, s in enumerate(scenes)}
    save_checkpoint(named, path)
    manifest = {
        "split": split,
        "count": len(scenes),
        "samples": [
            {"kind": s.kind, "face_present": s.face_present, "hand_present": s.hand_present}
            for s in scenes
        ],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(path: "str | Path") -> list[SyntheticScene]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    tensors = load_checkpoint(path)
    split = manifest["split"]
    scenes = []
    for i, meta in enumerate(manifest["samples"]):
        image = tensors[f"data.{split}.{i}"].data
        scenes.append(SyntheticScene(image, meta["face_present"], meta["hand_present"], meta["kind"]))
    return scenes
