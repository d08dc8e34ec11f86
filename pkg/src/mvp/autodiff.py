"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active, so code that
runs outside a tape (evaluation, inference) never builds a graph and can never
be differentiated by accident::

    with Tape() as tape:
        loss = bce_loss(model(x), y)
    tape.backward(loss)
    w.grad  # gradient of loss with respect to w

Every primitive supports arbitrary leading batch dimensions unless noted.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, MVPError, NumericError, ValidationError

_TAPES: list["Tape"] = []


class Tensor:
    """Immutable n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of the primitive operations executed while active.

    Nodes are appended in execution order, which is a valid topological order:
    an operation can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []
        self.gradients = {}
        self._used = False

    def leaves(self) -> list[Tensor]:
        produced = {id(n.out) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and id(p) not in produced:
                    seen.setdefault(id(p), p)
        return list(seen.values())

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

        Returns the leaves in first-use order.
        """
        if self._used:
            raise MVPError("backward already ran on this tape; call reset() first")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node not in self.nodes:
            raise MVPError("loss was not produced by an operation recorded on this tape")
        self._used = True
        grads = self.gradients
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise DimensionError(f"{node.op}: gradient shape {pg.shape} != operand shape {p.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        leaves = self.leaves()
        for leaf in leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else g
        return leaves


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, _copy=False)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, tuple(parents), backward_fn, op)
        out._node = node
        _TAPES[-1].nodes.append(node)
    return out


def is_recording() -> bool:
    return bool(_TAPES)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the caller decides whether training is active."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigError(f"dropout rate must be < 1, got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = x.size
        return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")
    ax = axis % x.ndim
    n = x.shape[ax]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),)

    return _make(x.data.mean(axis=ax), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x: Tensor, index: Sequence[int], axis: int) -> Tensor:
    """Gather along ``axis``; ``index`` may be any integer sequence (e.g. a permutation)."""
    idx = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim

    def backward(g):
        out = np.zeros(x.shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return _make(np.take(x.data, idx, axis=ax), (x,), backward, "take")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` on the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"dense: x {x.shape}, w {w.shape}, b {b.shape} do not agree")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(lead + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), backward, "dense")


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' convolution over time.

    ``x`` is ``[..., T, C_in]``, ``kernels`` is ``[C_out, C_in, k]`` with odd
    ``k``, output is ``[..., T, C_out]``. Symmetric zero padding of ``(k-1)/2``
    keeps the time length. As in most deep-learning libraries this is a
    cross-correlation: ``out[t] = sum_j x[t + j - p] @ kernels[:, :, j].T``.
    """
    if kernels.ndim != 3:
        raise DimensionError(f"conv1d: kernels must be [C_out, C_in, k], got {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d: kernel length must be odd, got {k}")
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernels {kernels.shape}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match kernels {kernels.shape}")
    T = x.shape[-2]
    p = (k - 1) // 2
    lead = x.shape[:-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    # im2col: cols[..., t, c*k + j] = xp[..., t + j, c]
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2).reshape(-1, c_in * k)
    wmat = kernels.data.reshape(c_out, c_in * k).T
    out = (cols @ wmat + bias.data).reshape(lead + (T, c_out))

    def backward(g):
        gx = gk = gb = None
        g2 = g.reshape(-1, c_out)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(lead + (T, c_in, k))
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[..., j : j + T, :] += gcols[..., j]
            gx = gxp[..., p : p + T, :]
        if kernels.requires_grad:
            gk = (cols.T @ g2).T.reshape(kernels.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return _make(out, (x, kernels, bias), backward, "conv1d")


# ---------------------------------------------------------------------------
# normalization and losses


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis; the row max is subtracted before ``exp``."""
    _check_finite(x.data, "softmax_lastdim")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy computed directly from logits.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large logits neither
    overflow nor lose the loss to ``log(0)``.
    """
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce_loss: logits {logits.shape} vs targets {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("bce_loss: targets must be 0 or 1")
    z = logits.data
    _check_finite(z, "bce_loss")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return (float(g) * (_stable_sigmoid(z) - y) / n,)

    return _make(np.asarray(per.mean()), (logits,), backward, "bce")


# ---------------------------------------------------------------------------
# misc


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index: tuple, eps: float) -> float:
    """Central finite difference of ``f`` w.r.t. ``arr[index]`` (``arr`` is perturbed in place, then restored)."""
    was = arr.flags.writeable
    arr.flags.writeable = True
    try:
        orig = arr[index]
        arr[index] = orig + eps
        fp = f()
        arr[index] = orig - eps
        fm = f()
        arr[index] = orig
    finally:
        arr.flags.writeable = was
    return (fp - fm) / (2.0 * eps)


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
