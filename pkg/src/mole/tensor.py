"""Dense tensors with reverse-mode differentiation on a per-step tape.

The operation set is deliberately narrow: exactly what a gated low-rank
expert stack plus a small token-MLP denoiser needs. Buffers are row-major
numpy arrays in float32 or float64. Differentiation is define-by-run: ops
record backward closures onto the innermost active ``Tape`` whenever an
input requires gradients, and ``backward`` replays the tape once in
reverse. With no active tape (or no grad-requiring input) nothing is
recorded, so inference allocates no tape nodes.

A tape belongs to a single training step on a single thread. Forward
evaluation over read-only tensors is thread-safe.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, EvaluationError

_DTYPES = (np.float32, np.float64)

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense row-major array plus an optional gradient buffer.

    ``grad`` accumulates across backward calls; callers reset it to None
    between training steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64 if arr.dtype == np.dtype("int64") else np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep rank
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "out", "fn")

    def __init__(self, op: str, out: Tensor, fn: Callable[[np.ndarray], None]):
        self.op = op
        self.out = out
        self.fn = fn


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager; ops executed inside record themselves when
    any input requires gradients. Nodes are appended in execution order,
    so inputs always precede their consumers.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, out: Tensor, needs_grad: bool, fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and needs_grad:
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, out, fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` (p x q) and 2-D ``b`` (q x r)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_same_dtype("matmul", a, b)
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def fn(g: np.ndarray) -> None:
        _accum(a, g @ b_data.T)
        _accum(b, a_data.T @ g)

    return _record("matmul", out, a.requires_grad or b.requires_grad, fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D tensor, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def fn(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _record("transpose", out, a.requires_grad, fn)


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function; outputs lie in (0, 1)."""
    y = expit(a.data)
    out = Tensor(y)

    def fn(g: np.ndarray) -> None:
        _accum(a, g * y * (1.0 - y))

    return _record("sigmoid", out, a.requires_grad, fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def fn(g: np.ndarray) -> None:
        _accum(a, g * (1.0 - y * y))

    return _record("tanh", out, a.requires_grad, fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0).astype(a.data.dtype))

    def fn(g: np.ndarray) -> None:
        _accum(a, g * mask)

    return _record("relu", out, a.requires_grad, fn)


def mean_pool_tokens(a: Tensor) -> Tensor:
    """Mean over the token (row) axis of an n x d tensor, yielding a d vector.

    Summation runs in row order, so a row permutation can move the result
    by rounding noise only (<= 1e-12 at float64 for moderate inputs).
    """
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise DimensionError(f"mean_pool_tokens: expected non-empty n x d tensor, got shape {a.shape}")
    n = a.shape[0]
    out = Tensor(a.data.mean(axis=0))

    def fn(g: np.ndarray) -> None:
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype))

    return _record("mean_pool_tokens", out, a.requires_grad, fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _check_same_dtype("add", a, b)
    out = Tensor(a.data + b.data)

    def fn(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _record("add", out, a.requires_grad or b.requires_grad, fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    _check_same_dtype("sub", a, b)
    out = Tensor(a.data - b.data)

    def fn(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return _record("sub", out, a.requires_grad or b.requires_grad, fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _check_same_dtype("mul", a, b)
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def fn(g: np.ndarray) -> None:
        _accum(a, g * b_data)
        _accum(b, g * a_data)

    return _record("mul", out, a.requires_grad or b.requires_grad, fn)


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a scalar, either a plain number or a 0-d Tensor.

    A Tensor scalar participates in differentiation (its gradient is the
    inner product of the upstream gradient with ``a``).
    """
    if isinstance(c, Tensor):
        if c.shape != ():
            raise DimensionError(f"scale: scalar operand must be 0-d, got shape {c.shape}")
        out = Tensor(a.data * c.data)
        a_data, c_data = a.data, c.data

        def fn(g: np.ndarray) -> None:
            _accum(a, g * c_data)
            _accum(c, np.asarray((g * a_data).sum(), dtype=c_data.dtype))

        return _record("scale", out, a.requires_grad or c.requires_grad, fn)

    factor = float(c)
    out = Tensor(a.data * np.asarray(factor, dtype=a.data.dtype))

    def fn_const(g: np.ndarray) -> None:
        _accum(a, g * np.asarray(factor, dtype=a.data.dtype))

    return _record("scale", out, a.requires_grad, fn_const)


def mul_per_token(a: Tensor, col: Tensor) -> Tensor:
    """Multiply each row of an n x d tensor by the matching n x 1 entry."""
    if a.data.ndim != 2 or col.data.ndim != 2 or col.shape != (a.shape[0], 1):
        raise DimensionError(f"mul_per_token: expected n x d and n x 1, got {a.shape} and {col.shape}")
    _check_same_dtype("mul_per_token", a, col)
    out = Tensor(a.data * col.data)
    a_data, col_data = a.data, col.data

    def fn(g: np.ndarray) -> None:
        _accum(a, g * col_data)
        _accum(col, (g * a_data).sum(axis=1, keepdims=True))

    return _record("mul_per_token", out, a.requires_grad or col.requires_grad, fn)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a d vector into an n x d tensor (bias broadcast over tokens)."""
    if v.data.ndim != 1:
        raise DimensionError(f"broadcast_rows: expected 1-D tensor, got shape {v.shape}")
    out = Tensor(np.broadcast_to(v.data, (n, v.shape[0])).copy())

    def fn(g: np.ndarray) -> None:
        _accum(v, g.sum(axis=0))

    return _record("broadcast_rows", out, v.requires_grad, fn)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def fn(g: np.ndarray) -> None:
        _accum(a, np.full(a.shape, g, dtype=a.data.dtype))

    return _record("sum_all", out, a.requires_grad, fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape).copy())
    in_shape = a.shape

    def fn(g: np.ndarray) -> None:
        _accum(a, g.reshape(in_shape))

    return _record("reshape", out, a.requires_grad, fn)


def column(a: Tensor, j: int) -> Tensor:
    """Slice column ``j`` of an n x d tensor as an n x 1 tensor."""
    if a.data.ndim != 2 or not 0 <= j < a.shape[1]:
        raise DimensionError(f"column: index {j} invalid for shape {a.shape}")
    out = Tensor(a.data[:, j : j + 1].copy())

    def fn(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, j : j + 1] = g
            _accum(a, full)

    return _record("column", out, a.requires_grad, fn)


def element(a: Tensor, i: int) -> Tensor:
    """Pick entry ``i`` of a 1-D tensor as a 0-d scalar tensor."""
    if a.data.ndim != 1 or not 0 <= i < a.shape[0]:
        raise DimensionError(f"element: index {i} invalid for shape {a.shape}")
    out = Tensor(np.asarray(a.data[i], dtype=a.data.dtype))

    def fn(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i] = g
            _accum(a, full)

    return _record("element", out, a.requires_grad, fn)


# ---------------------------------------------------------------------------
# backward and gradient checking


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate dLoss/dT into every grad-requiring tensor on the tape.

    ``loss`` must be a 0-d tensor produced on ``tape``. Each node is
    visited exactly once, in reverse execution order. Tensors with
    requires_grad False are never written.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.fn(g)


NamedParams = Mapping[str, Tensor] | Iterable[tuple[str, Tensor]]


def finite_diff_gradcheck(
    f: Callable[[], Tensor],
    params: NamedParams,
    h: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must be a deterministic, repeatable forward evaluation returning
    a scalar Tensor built from the ops in this module. One taped pass
    supplies the analytic gradients; each parameter entry is then nudged
    by +-h and ``f`` re-evaluated without taping. The relative error for
    an entry is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``
    and the returned dict maps parameter name to its maximum entry error.

    Float64 parameters are strongly recommended; ``max_entries_per_param``
    optionally checks a random subset of entries per parameter.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    old_flags = [(p, p.requires_grad, p.grad) for _, p in items]
    try:
        for _, p in items:
            p.requires_grad = True
            p.grad = None
        with Tape() as tape:
            loss = f()
        if loss.shape != ():
            raise ContractError(f"finite_diff_gradcheck: f must return a scalar, got shape {loss.shape}")
        backward(loss, tape)
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in items
        }
    finally:
        for p, flag, grad in old_flags:
            p.requires_grad = flag
            p.grad = grad

    def evaluate(pname: str) -> float:
        value = float(f().data)
        if not np.isfinite(value):
            raise EvaluationError(f"finite_diff_gradcheck: non-finite loss while perturbing '{pname}'")
        return value

    errors: dict[str, float] = {}
    for name, p in items:
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        indices = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = gen.choice(flat.size, size=max_entries_per_param, replace=False)
        worst = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = evaluate(name)
            flat[i] = orig - h
            f_minus = evaluate(name)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(numeric - float(ana[i])) / max(1.0, abs(float(ana[i])), abs(numeric))
            if err > worst:
                worst = err
        errors[name] = worst
    return errors
