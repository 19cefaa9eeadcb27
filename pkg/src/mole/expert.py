"""Low-rank residual experts.

An expert stores the factored update delta-W = a @ b.T (times a
nonnegative scale) for one linear layer and applies it without ever
materializing delta-W. Fresh experts start with b = 0, so training
begins at the base model's function.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class LowRankExpert:
    """Factored update a (d_in x r) and b (d_out x r) with a scalar scale.

    The implied dense update a @ b.T has numerical rank at most r. During
    gated training scale stays at 1 and the layer's global gate provides
    the blending weight instead.
    """

    __slots__ = ("a", "b", "rank", "scale", "frozen")

    def __init__(self, a: Tensor, b: Tensor, rank: int, scale: float, frozen: bool = False):
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != rank or b.shape[1] != rank:
            raise DimensionError(f"expert factors must be d_in x r and d_out x r; got {a.shape}, {b.shape}, r={rank}")
        if scale < 0:
            raise ConfigError(f"expert scale must be nonnegative, got {scale}")
        self.a = a
        self.b = b
        self.rank = int(rank)
        self.scale = float(scale)
        self.frozen = bool(frozen)

    @property
    def d_in(self) -> int:
        return self.a.shape[0]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.a.requires_grad = not frozen
        self.b.requires_grad = not frozen

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "a": self.a, prefix + "b": self.b}


def init_expert(d_in: int, d_out: int, rank: int, scale: float = 1.0, seed: int = 0) -> LowRankExpert:
    """Create a fresh expert: Gaussian a (std 1/sqrt(d_in)), zero b.

    The zero b makes the initial update exactly zero. Same seed gives
    bit-identical factors.
    """
    if not 0 < rank < min(d_in, d_out):
        raise ConfigError(f"expert rank must satisfy 0 < rank < min(d_in, d_out); got rank={rank}, d_in={d_in}, d_out={d_out}")
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, rank)))
    b = Tensor(np.zeros((d_out, rank)))
    return LowRankExpert(a, b, rank, scale)


def expert_apply(e: LowRankExpert, x: Tensor) -> Tensor:
    """Apply the factored update: scale * (x @ a) @ b.T.

    Linear in x. Never forms the dense d_in x d_out product.
    """
    if x.data.ndim != 2 or x.shape[1] != e.d_in:
        raise DimensionError(f"expert_apply: input shape {x.shape} does not match expert d_in={e.d_in}")
    y = T.matmul(T.matmul(x, e.a), T.transpose(e.b))
    if e.scale == 1.0:
        return y
    return T.scale(y, e.scale)


def merge_into_base(e: LowRankExpert, w: Tensor) -> Tensor:
    """Fold the expert into a base weight: w + scale * a @ b.T."""
    if w.shape != (e.d_in, e.d_out):
        raise DimensionError(f"merge_into_base: weight shape {w.shape} does not match expert ({e.d_in}, {e.d_out})")
    return Tensor(w.data + e.scale * (e.a.data @ e.b.data.T))
