"""AdamW and Lion parameter updates.

Both optimizers key their moment buffers by parameter name and update
in deterministic name order. They touch only the parameters handed to
them at construction, which is how stage freezing contracts stay
byte-exact: a frozen tensor is simply never given to an optimizer.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


def _check_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    if not params:
        raise ConfigError("optimizer: no parameters to train")
    return dict(params)


class AdamW:
    """Adam with decoupled weight decay.

    Update per parameter: biased first/second moments with bias
    correction, decay applied directly to the weights (not the
    gradient): p -= lr * wd * p; p -= lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0.0:
            raise ConfigError(f"AdamW: lr must be positive, got {lr}")
        self.params = _check_params(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"AdamW: parameter '{name}' has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Lion:
    """Sign-of-interpolated-momentum update.

    c = beta1 * m + (1 - beta1) * g; p -= lr * (sign(c) + wd * p);
    m = beta2 * m + (1 - beta2) * g. Every nonzero update entry moves a
    weight by exactly lr when decay is zero.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.99),
        weight_decay: float = 0.0,
    ):
        if lr <= 0.0:
            raise ConfigError(f"Lion: lr must be positive, got {lr}")
        self.params = _check_params(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"Lion: parameter '{name}' has no gradient")
            g = p.grad
            m = self.m[name]
            c = self.beta1 * m + (1.0 - self.beta1) * g
            p.data -= self.lr * (np.sign(c) + self.weight_decay * p.data)
            m *= self.beta2
            m += (1.0 - self.beta2) * g

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


OPTIMIZERS = {"adamw": AdamW, "lion": Lion}


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float, **hyper):
    if kind not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer '{kind}' (expected one of {sorted(OPTIMIZERS)})")
    return OPTIMIZERS[kind](params, lr, **hyper)
