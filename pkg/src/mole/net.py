"""Patch-token MLP denoiser with wrappable linear layers.

The image is cut into square patches; each patch becomes a token of its
flattened pixels plus a shared sinusoidal step embedding. Tokens flow
through a stack of hidden linear layers (each one independently
replaceable by a gated mixture layer without changing shapes) separated
by a pointwise nonlinearity, then a linear head maps back to patch
pixels. Output shape always equals input shape: the net predicts the
injected noise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .expert import LowRankExpert, init_expert
from .layer import BaseLinear, MoLELayer, init_linear, mole_forward, mole_forward_detail, wrap_layer
from .tensor import Tensor

NONLINEARITIES = {"tanh": T.tanh, "relu": T.relu}


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) image to (n, patch*patch) tokens, grid row-major."""
    h, w = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"patchify: image {image.shape} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    return (
        image.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)
    )


def unpatchify(tokens: np.ndarray, size: int, patch: int) -> np.ndarray:
    """Inverse of patchify for square size x size images."""
    g = size // patch
    if tokens.shape != (g * g, patch * patch):
        raise DimensionError(f"unpatchify: tokens {tokens.shape} do not tile a {size}x{size} image with patch {patch}")
    return tokens.reshape(g, g, patch, patch).transpose(0, 2, 1, 3).reshape(size, size)


def time_embedding(t: int, width: int) -> np.ndarray:
    """Sinusoidal step embedding of even width."""
    if width % 2:
        raise ConfigError(f"time_embedding: width must be even, got {width}")
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class LayerObservation:
    """Gate values and branch outputs seen at one mixture layer."""

    __slots__ = ("gates", "branches")

    def __init__(self, gates, branches):
        self.gates = gates
        self.branches = branches


class DenoiserNet:
    """Token MLP whose hidden layers may be plain, adapted, or gated."""

    __slots__ = ("image_size", "patch", "time_width", "nonlinearity", "hidden", "head")

    def __init__(self, image_size, patch, time_width, nonlinearity, hidden, head):
        if nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"DenoiserNet: unknown nonlinearity '{nonlinearity}'")
        self.image_size = int(image_size)
        self.patch = int(patch)
        self.time_width = int(time_width)
        self.nonlinearity = nonlinearity
        self.hidden = list(hidden)
        self.head = head

    @property
    def n_tokens(self) -> int:
        g = self.image_size // self.patch
        return g * g

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch + self.time_width

    def token_input(self, image: np.ndarray, t: int) -> np.ndarray:
        tokens = patchify(image, self.patch)
        emb = np.broadcast_to(time_embedding(t, self.time_width), (tokens.shape[0], self.time_width))
        return np.concatenate([tokens, emb], axis=1)

    def forward_tokens(self, image: np.ndarray, t: int, collect: "list | None" = None) -> Tensor:
        """Predicted noise as (n, patch*patch) tokens.

        ``collect``, when given, receives one LayerObservation per
        mixture layer in depth order; observation never changes values.
        """
        act = NONLINEARITIES[self.nonlinearity]
        h = Tensor(self.token_input(image, t))
        for layer in self.hidden:
            if isinstance(layer, MoLELayer):
                if collect is not None:
                    out, gates, branches = mole_forward_detail(layer, h)
                    collect.append(LayerObservation(gates, branches))
                else:
                    out = mole_forward(layer, h)
            else:
                out = layer.forward(h)
            h = act(out)
        return self.head.forward(h)

    def predict_eps(self, image: np.ndarray, t: int, collect: "list | None" = None) -> np.ndarray:
        tokens = self.forward_tokens(image, t, collect)
        return unpatchify(tokens.data, self.image_size, self.patch)

    def mole_layers(self) -> list[tuple[int, MoLELayer]]:
        return [(i, layer) for i, layer in enumerate(self.hidden) if isinstance(layer, MoLELayer)]

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.hidden):
            if isinstance(layer, (MoLELayer, BaseLinear)):
                prefix = f"layer.{i}."
                if isinstance(layer, BaseLinear):
                    params.update(layer.named_parameters(prefix + "base."))
                else:
                    params.update(layer.named_parameters(prefix))
            else:
                params.update(layer.named_parameters(f"layer.{i}."))
        params.update(self.head.named_parameters("head."))
        return params

    def base_parameters(self) -> dict[str, Tensor]:
        """The backbone tensors only, named uniformly across wrappings."""
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.hidden):
            base = layer.base if hasattr(layer, "base") else layer
            params.update(base.named_parameters(f"layer.{i}.base."))
        params.update(self.head.named_parameters("head."))
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items() if p.requires_grad}

    def set_all_trainable(self, trainable: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = trainable


def init_denoiser(
    image_size: int = 16,
    patch: int = 4,
    hidden_width: int = 64,
    hidden_layers: int = 2,
    time_width: int = 8,
    nonlinearity: str = "tanh",
    seed: int = 0,
) -> DenoiserNet:
    """Fresh all-linear denoiser; deterministic per seed."""
    if image_size % patch:
        raise ConfigError(f"init_denoiser: image_size {image_size} not divisible by patch {patch}")
    if hidden_layers < 1:
        raise ConfigError(f"init_denoiser: need at least one hidden layer, got {hidden_layers}")
    rng = np.random.default_rng(seed)
    token_dim = patch * patch + time_width
    dims = [token_dim] + [hidden_width] * hidden_layers
    hidden = [init_linear(dims[i], dims[i + 1], seed=rng) for i in range(hidden_layers)]
    head = init_linear(hidden_width, patch * patch, seed=rng)
    return DenoiserNet(image_size, patch, time_width, nonlinearity, hidden, head)


def wrap_denoiser(net: DenoiserNet, rank: int, seed: int = 0) -> list[list[LowRankExpert]]:
    """Wrap every hidden layer with two fresh experts and zeroed gates.

    Returns the per-layer expert pairs [face, hand] so callers can load
    trained factors into them. Gates come back trainable, everything
    else frozen.
    """
    rng = np.random.default_rng(seed)
    all_experts = []
    for i, layer in enumerate(net.hidden):
        base = layer.base if isinstance(layer, MoLELayer) else layer
        experts = [init_expert(base.d_in, base.d_out, rank, seed=rng) for _ in range(2)]
        net.hidden[i] = wrap_layer(base, experts)
        all_experts.append(experts)
    net.head.set_frozen(True)
    return all_experts
