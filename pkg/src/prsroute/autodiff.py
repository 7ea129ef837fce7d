"""A small reverse-mode autodiff engine over dense 2-D float64 arrays.

Only the operations the router network needs are provided. Every op returns
a new :class:`Tensor`; when any input requires a gradient the result records
its parents and a closure that pushes the output gradient back.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(out_data, (a, b), "matmul", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    row_bcast = b.shape[0] == 1 and a.shape[0] != 1 and b.shape[1] == a.shape[1]
    if a.shape != b.shape and not row_bcast:
        raise DimensionError(f"add {a.shape} + {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0, keepdims=True) if row_bcast else g)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub {a.shape} - {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul {a.shape} * {b.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accum(a, c * g)

    return _result(c * a.data, (a,), "scale", backward)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.T)

    return _result(a.data.T.copy(), (a,), "transpose", backward)


def row_select(a: Tensor, index) -> Tensor:
    """Gather rows by integer index (repeats allowed); used for embedding lookup."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("row_select takes a 1-D index")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"row index out of range for {a.shape[0]} rows")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _result(a.data[idx], (a,), "row_select", backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len({p.shape[1] for p in parts}) != 1:
        raise DimensionError("concat_rows needs equal column counts")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[lo:hi])

    return _result(np.vstack([p.data for p in parts]), parts, "concat_rows", backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len({p.shape[0] for p in parts}) != 1:
        raise DimensionError("concat_cols needs equal row counts")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[:, lo:hi])

    return _result(np.hstack([p.data for p in parts]), parts, "concat_cols", backward)


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"column slice [{start}:{stop}] of {a.shape}")

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        _accum(a, ga)

    return _result(a.data[:, start:stop].copy(), (a,), "col_slice", backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _result(s, (a,), "sigmoid", backward)


def softmax_rows(a: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max subtraction.

    ``allowed`` is an optional boolean mask of the same shape; disallowed
    entries get probability exactly 0. Every row needs one allowed entry.
    """
    a = as_tensor(a)
    x = a.data
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != x.shape:
            raise DimensionError("softmax mask shape mismatch")
        x = np.where(allowed, x, -np.inf)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _result(y, (a,), "softmax_rows", backward)


def masked_normalize(a: Tensor, mask: np.ndarray) -> Tensor:
    """Renormalise each row of ``a`` over the entries where ``mask`` is set.

    Rows with no selected entry come out as zeros. ``mask`` is a constant:
    no gradient flows through which entries were selected.
    """
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise DimensionError("mask shape mismatch")
    masked = a.data * m
    s = masked.sum(axis=1, keepdims=True)
    live = s > 0
    safe = np.where(live, s, 1.0)
    y = np.where(live, masked / safe, 0.0)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        _accum(a, np.where(live, m * (g - inner) / safe, 0.0))

    return _result(y, (a,), "masked_normalize", backward)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, np.full_like(a.data, g[0, 0]))

    return _result(a.data.sum(), (a,), "sum_all", backward)


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        _accum(a, np.full_like(a.data, g[0, 0] / n))

    return _result(a.data.mean(), (a,), "mean_all", backward)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor that requires one.

    Leaf gradients accumulate across calls; interior gradients are reset.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    signature: Callable[[], Hashable] | None = None,
    skipped: list | None = None,
) -> float:
    """Compare backward's gradients with central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    When ``signature`` is given it must summarise every discrete choice the
    forward pass made (e.g. top-K selections); coordinates whose +/-h
    perturbation changes the signature are skipped and, if ``skipped`` is a
    list, recorded there as ``(param_index, flat_index)``.

    Returns the max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    base_sig = signature() if signature is not None else None

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f().item()
            sp = signature() if signature is not None else None
            flat[j] = orig - h
            fm = f().item()
            sm = signature() if signature is not None else None
            flat[j] = orig
            if signature is not None and (sp != base_sig or sm != base_sig):
                if skipped is not None:
                    skipped.append((pi, j))
                continue
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[pi].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
