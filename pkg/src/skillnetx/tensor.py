"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op checks whether any input requires a gradient and, if a
tape is active, appends a node holding the op name, its inputs, its output and a
closure mapping the output gradient to input gradients.  ``backward`` replays the
nodes in reverse order.  Parameters never touched by a recorded op never receive
a gradient, which is what the routing-isolation tests rely on.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """Records differentiable ops in execution (topological) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def record(self, op: str, inputs: tuple, out: Tensor, fn) -> None:
        out.tape_id = len(self.nodes)
        self.nodes.append(Node(op, inputs, out, fn))

    @property
    def leaf_set(self) -> set[int]:
        """ids of trainable leaves that appear as op inputs on this tape."""
        return {
            id(t)
            for node in self.nodes
            for t in node.inputs
            if t.requires_grad and t.tape_id is None
        }

    def op_counts(self) -> Counter:
        return Counter(node.op for node in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Optional[GradTape]] = []


class no_grad:
    """Suspend recording (used by finite differences and inference)."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()


def active_tape() -> Optional[GradTape]:
    return _TAPES[-1] if _TAPES else None


def _make(op: str, data: np.ndarray, inputs: tuple, fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., n] + b[n]``; the only parameter broadcast the tape supports."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} differ")
    lead = tuple(range(x.ndim - 1))
    return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-trainable array that broadcasts against ``x``."""
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_const: constant {np.shape(c)} does not broadcast to {x.shape}")
    return _make("add_const", out, (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * keep,))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style (fancy) indexing; gradients scatter-add back."""
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make("take", np.array(out, dtype=np.float64), (x,), fn)


def scatter_rows(src: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Place ``src[i]`` at row ``rows[i]`` of an ``n``-row zero tensor (rows unique)."""
    out = np.zeros((n,) + src.shape[1:])
    out[rows] = src.data
    return _make("scatter_rows", out, (src,), lambda g: (g[rows],))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """``x[N, d] * w[N]`` row-wise."""
    if w.ndim != 1 or x.ndim != 2 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {w.shape} differ")
    xd, wd = x.data, w.data
    return _make(
        "scale_rows",
        xd * wd[:, None],
        (x, w),
        lambda g: (g * wd[:, None], (g * xd).sum(axis=1)),
    )


# ----------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched product with identical leading dimensions."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x[..., k] @ w[k, n] (+ b[n])``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {w.shape} are incompatible")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    k, n = w.shape
    lead = x.shape[:-1]
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(lead + (n,))

    def fn(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(lead + (k,))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("linear", out, inputs, fn)


# ----------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def mean_stack(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally-shaped tensors.

    Terms are sorted per element before summation so the result does not depend
    on the order of ``xs`` (bitwise).
    """
    if not xs:
        raise ContractError("mean_stack of no tensors")
    for x in xs[1:]:
        _same_shape("mean_stack", xs[0], x)
    k = len(xs)
    if k == 1:
        return xs[0]
    vals = [x.data for x in xs]
    # odd-even transposition network: per-element ascending order in k rounds
    for r in range(k):
        for i in range(r % 2, k - 1, 2):
            lo, hi = np.minimum(vals[i], vals[i + 1]), np.maximum(vals[i], vals[i + 1])
            vals[i], vals[i + 1] = lo, hi
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    out = total / k
    return _make("mean_stack", out, tuple(xs), lambda g: tuple(g / k for _ in range(k)))


# ----------------------------------------------------------------- nn primitives


def softmax_lastdim(x: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax over the last axis.

    ``keep`` (boolean, broadcastable) marks admissible entries; the rest get
    exactly zero weight.  Every slice needs at least one admissible entry.
    """
    z = x.data if keep is None else np.where(keep, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", xhat * gd + beta.data, (x, gamma, beta), fn)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [b, C], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if targets.shape[0] != b:
        raise ShapeError(f"cross_entropy: {b} rows but {targets.shape[0]} targets")
    bad = np.flatnonzero((targets < 0) | (targets >= c))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {int(targets[i])} at batch index {i} outside [0, {c})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, targets].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (float(g) / b),)

    return _make("cross_entropy", np.array(loss), (logits,), fn)


# ----------------------------------------------------------------- gradients


def backward(loss: Tensor, tape: Optional[GradTape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.shape != () and loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None or loss.tape_id is None or loss.tape_id >= len(tape.nodes) \
            or tape.nodes[loss.tape_id].output is not loss:
        raise ContractError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.tape_id is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = gi if key not in pending else pending[key] + gi


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def finite_diff_grad(f: Callable[[Tensor], float], at: Tensor, eps: float = 1e-5) -> Tensor:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / 2 eps``."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    flat = at.data.reshape(-1)
    out = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(at))
            flat[i] = orig - eps
            fm = float(f(at))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return Tensor(out.reshape(at.shape))


def rel_error(a, b) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Frobenius norm (0 when both vanish)."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


__all__ = [
    "ContractError",
    "GradTape",
    "ShapeError",
    "Tensor",
    "add",
    "add_bias",
    "add_const",
    "backward",
    "cross_entropy",
    "dropout",
    "finite_diff_grad",
    "layer_norm",
    "linear",
    "matmul",
    "mean_all",
    "mean_stack",
    "mul",
    "no_grad",
    "parameter",
    "rel_error",
    "relu",
    "reshape",
    "scale",
    "scale_rows",
    "scatter_rows",
    "softmax_lastdim",
    "sub",
    "sum_all",
    "take",
    "transpose",
    "zero_grads",
]
