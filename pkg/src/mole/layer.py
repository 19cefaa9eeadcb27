"""Gated mixture layer: a frozen linear base plus low-rank experts.

Each wrapped linear layer carries its own gating parameters. Two soft
gates modulate every expert branch: a local per-token score map
s = sigmoid(x @ phi + phi_bias) and a global scalar
g = sigmoid(mean_pool(x) @ omega + omega_bias). Gates are independent
per expert (no softmax coupling), so deactivating one expert never
perturbs another. The layer output is

    base(x) + sum_i g_i * expert_i(x * s_i)

and multiplying by g inside or outside the expert is algebraically the
same because the expert path is linear.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .expert import LowRankExpert, expert_apply
from .tensor import Tensor


class BaseLinear:
    """Plain affine map x @ w + bias; frozen layers never change bytes."""

    __slots__ = ("w", "bias", "frozen")

    def __init__(self, w: Tensor, bias: Tensor, frozen: bool = False):
        if w.data.ndim != 2 or bias.data.ndim != 1 or bias.shape[0] != w.shape[1]:
            raise DimensionError(f"BaseLinear: expected w d_in x d_out and bias d_out, got {w.shape}, {bias.shape}")
        self.w = w
        self.bias = bias
        self.frozen = bool(frozen)

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"BaseLinear: input shape {x.shape} does not match d_in={self.d_in}")
        return T.add(T.matmul(x, self.w), T.broadcast_rows(self.bias, x.shape[0]))

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.w.requires_grad = not frozen
        self.bias.requires_grad = not frozen

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "w": self.w, prefix + "bias": self.bias}


def init_linear(d_in: int, d_out: int, seed: int = 0) -> BaseLinear:
    """Gaussian w (std 1/sqrt(d_in)), zero bias; deterministic per seed."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, d_out)))
    bias = Tensor(np.zeros(d_out))
    return BaseLinear(w, bias)


class GatingParams:
    """Per-layer gate weights: phi/omega are d_in x e, biases length e."""

    __slots__ = ("phi", "phi_bias", "omega", "omega_bias", "e")

    def __init__(self, phi: Tensor, phi_bias: Tensor, omega: Tensor, omega_bias: Tensor):
        if phi.data.ndim != 2 or omega.shape != phi.shape:
            raise DimensionError(f"GatingParams: phi and omega must share a d_in x e shape, got {phi.shape}, {omega.shape}")
        e = phi.shape[1]
        if phi_bias.shape != (e,) or omega_bias.shape != (e,):
            raise DimensionError(f"GatingParams: biases must have shape ({e},), got {phi_bias.shape}, {omega_bias.shape}")
        self.phi = phi
        self.phi_bias = phi_bias
        self.omega = omega
        self.omega_bias = omega_bias
        self.e = e

    def set_frozen(self, frozen: bool) -> None:
        for t in (self.phi, self.phi_bias, self.omega, self.omega_bias):
            t.requires_grad = not frozen

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            prefix + "phi": self.phi,
            prefix + "phi_bias": self.phi_bias,
            prefix + "omega": self.omega,
            prefix + "omega_bias": self.omega_bias,
        }


class GatingOutputs:
    """One forward pass's gate values: s is n x e, g is length e."""

    __slots__ = ("s", "g")

    def __init__(self, s: Tensor, g: Tensor):
        self.s = s
        self.g = g


class MoLELayer:
    """A base linear layer wrapped with gated low-rank expert branches."""

    __slots__ = ("base", "experts", "gates")

    def __init__(self, base: BaseLinear, experts: list[LowRankExpert], gates: GatingParams):
        if len(experts) != gates.e:
            raise DimensionError(f"MoLELayer: {len(experts)} experts but gates expect e={gates.e}")
        for ex in experts:
            if (ex.d_in, ex.d_out) != (base.d_in, base.d_out):
                raise DimensionError(
                    f"MoLELayer: expert dims ({ex.d_in}, {ex.d_out}) do not match base ({base.d_in}, {base.d_out})"
                )
        if gates.phi.shape[0] != base.d_in:
            raise DimensionError(f"MoLELayer: gate input dim {gates.phi.shape[0]} does not match base d_in={base.d_in}")
        self.base = base
        self.experts = experts
        self.gates = gates

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = self.base.named_parameters(prefix + "base.")
        params.update(self.gates.named_parameters(prefix + "gates."))
        for i, ex in enumerate(self.experts):
            params.update(ex.named_parameters(f"{prefix}expert.{i}."))
        return params


def local_gate(layer: MoLELayer, x: Tensor) -> Tensor:
    """Per-token score maps s = sigmoid(x @ phi + phi_bias), shape n x e."""
    if x.data.ndim != 2 or x.shape[1] != layer.gates.phi.shape[0]:
        raise DimensionError(f"local_gate: input shape {x.shape} does not match gate dim {layer.gates.phi.shape[0]}")
    z = T.add(T.matmul(x, layer.gates.phi), T.broadcast_rows(layer.gates.phi_bias, x.shape[0]))
    return T.sigmoid(z)


def global_gate(layer: MoLELayer, x: Tensor) -> Tensor:
    """Pooled scalars g = sigmoid(mean_pool(x) @ omega + omega_bias), length e."""
    pooled = T.mean_pool_tokens(x)
    row = T.reshape(pooled, (1, pooled.shape[0]))
    z = T.add(T.matmul(row, layer.gates.omega), T.broadcast_rows(layer.gates.omega_bias, 1))
    return T.reshape(T.sigmoid(z), (layer.gates.e,))


def expert_branch(layer: MoLELayer, i: int, x: Tensor, s_i: Tensor, g_i) -> Tensor:
    """One gated branch: Y_i = g_i * expert_i(x * s_i).

    ``s_i`` is the n x 1 score column for this expert; ``g_i`` may be a
    plain scalar or a 0-d Tensor (the differentiable path).
    """
    if not 0 <= i < len(layer.experts):
        raise DimensionError(f"expert_branch: expert index {i} out of range for e={len(layer.experts)}")
    gated_in = T.mul_per_token(x, s_i)
    return T.scale(expert_apply(layer.experts[i], gated_in), g_i)


def mole_forward_detail(layer: MoLELayer, x: Tensor) -> tuple[Tensor, GatingOutputs, list[Tensor]]:
    """Full forward returning (output, gates, per-expert branch outputs).

    Gate evaluation order is fixed: local map, global scalars, then
    branches in expert order. The extra returns are observations of
    values already computed; they never change the output.
    """
    s = local_gate(layer, x)
    g = global_gate(layer, x)
    out = layer.base.forward(x)
    branches = []
    for i in range(len(layer.experts)):
        y_i = expert_branch(layer, i, x, T.column(s, i), T.element(g, i))
        branches.append(y_i)
        out = T.add(out, y_i)
    return out, GatingOutputs(s, g), branches


def mole_forward(layer: MoLELayer, x: Tensor, return_gates: bool = False):
    """Layer output base(x) + sum of gated expert branches.

    With ``return_gates`` the GatingOutputs of this pass come back too,
    for telemetry.
    """
    out, gates, _ = mole_forward_detail(layer, x)
    if return_gates:
        return out, gates
    return out


def wrap_layer(base: BaseLinear, experts: list[LowRankExpert], seed: int = 0) -> MoLELayer:
    """Wrap a linear layer with experts and zero-initialized gates.

    All gate values start at exactly 0.5. The base and the experts come
    back frozen; only the gate parameters are left trainable. ``seed`` is
    accepted for interface stability but zero init draws nothing from it.
    """
    d_in = base.d_in
    e = len(experts)
    gates = GatingParams(
        Tensor(np.zeros((d_in, e))),
        Tensor(np.zeros(e)),
        Tensor(np.zeros((d_in, e))),
        Tensor(np.zeros(e)),
    )
    layer = MoLELayer(base, experts, gates)
    base.set_frozen(True)
    for ex in experts:
        ex.set_frozen(True)
    gates.set_frozen(False)
    return layer
