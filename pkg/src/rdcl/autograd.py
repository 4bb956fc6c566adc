"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and, when produced by an operation,
remembers its parents and a closure that maps the output gradient to parent
gradients.  :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order and accumulates gradients additively, so shared
subexpressions are handled correctly.

Broadcasting follows numpy rules; gradients are summed back to the operand
shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import math

import numpy as np


class NumericDomainError(ArithmeticError):
    """Raised when an operation leaves its numeric domain or produces NaN/Inf."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a finite sum proves every entry finite; only an overflowing sum needs the full scan
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericDomainError(f"{op}: produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ------------------------------------------------------------------ binary ops
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise NumericDomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div",
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    mask = a.data >= b.data
    return Tensor._make(
        np.where(mask, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)), "maximum",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# ------------------------------------------------------------------- unary ops
def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericDomainError("log: argument must be positive")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def max_with_scalar(a, c: float) -> Tensor:
    """``max(a, c)`` elementwise against a constant (a hinge at ``c``)."""
    a = as_tensor(a)
    mask = a.data > c
    return Tensor._make(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "max_with_scalar")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise NumericDomainError("sqrt: negative argument")
    out = np.sqrt(a.data)
    if np.any(out == 0.0):
        raise NumericDomainError("sqrt: gradient undefined at zero")
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# ----------------------------------------------------------------- reductions
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = ex / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    val = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor._make(val, (a,), back, "logsumexp")


# ------------------------------------------------------------------ structure
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(a.data[idx]), (a,), back, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._make(out, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: empty input")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from exc
    n = len(ts)
    return Tensor._make(
        out, tuple(ts),
        lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)), "stack",
    )


# --------------------------------------------------------------- fused layers
def linear(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape (..., in) and ``W`` of shape (out, in)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {W.shape[1]}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    parents: tuple = (x, W)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, W, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd
        gW = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return Tensor._make(out, parents, back, "linear")


def lstm_cell(W_ih, W_hh, b, x, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate blocks ordered (input, forget, cell, output).

    ``x`` is (N, in) or (in,); ``h_prev``/``c_prev`` match in leading shape.
    The step is recorded as one fused node holding ``[h || c]`` with an
    analytic backward; ``h`` and ``c`` are slices of it.
    """
    W_ih, W_hh, b = as_tensor(W_ih), as_tensor(W_hh), as_tensor(b)
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    H = W_hh.shape[1]
    if W_ih.shape[0] != 4 * H or W_hh.shape[0] != 4 * H or b.shape != (4 * H,):
        raise ShapeError("lstm_cell: parameter shapes disagree with hidden size")
    if x.shape[-1] != W_ih.shape[1] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError("lstm_cell: input/state widths disagree with parameters")
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    Wi, Wh = W_ih.data, W_hh.data
    pre = xd @ Wi.T + hd @ Wh.T + b.data
    i = _sigmoid(pre[..., :H])
    f = _sigmoid(pre[..., H:2 * H])
    gg = np.tanh(pre[..., 2 * H:3 * H])
    o = _sigmoid(pre[..., 3 * H:])
    c = f * cd + i * gg
    tc = np.tanh(c)
    h = o * tc

    def back(g):
        gh, gc = g[..., :H], g[..., H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        d_pre = np.concatenate(
            [
                dc * gg * i * (1.0 - i),
                dc * cd * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        dp2 = d_pre.reshape(-1, 4 * H)
        return (
            dp2.T @ xd.reshape(-1, xd.shape[-1]),
            dp2.T @ hd.reshape(-1, H),
            dp2.sum(axis=0),
            d_pre @ Wi,
            d_pre @ Wh,
            dc * f,
        )

    hc = Tensor._make(
        np.concatenate([h, c], axis=-1), (W_ih, W_hh, b, x, h_prev, c_prev), back, "lstm_cell"
    )
    return getitem(hc, (Ellipsis, slice(0, H))), getitem(hc, (Ellipsis, slice(H, 2 * H)))


# ------------------------------------------------------------ spec-level entry
_UNARY = {
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``max_with_scalar`` takes the scalar threshold as ``b``.
    """
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "max_with_scalar":
        return max_with_scalar(a, float(0.0 if b is None else b))
    raise ValueError(f"unknown op_kind {op_kind!r}")


# ------------------------------------------------------------- gradient check
def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    out.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for j in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[j] += eps
        minus[j] -= eps
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericDomainError("grad_check: f is not finite near x")
        flat[j] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check of ``loss_fn`` against a set of leaf tensors.

    ``loss_fn`` closes over ``params`` and is re-evaluated after each in-place
    perturbation.  With ``n_coords`` set, that many coordinates are sampled
    uniformly across all parameters instead of checking every one.
    """
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = loss_fn()
    loss.backward()
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    with no_grad():
        for pi, j in coords:
            p = params[pi]
            flat = p.data.reshape(-1)
            a = 0.0 if p.grad is None else float(p.grad.reshape(-1)[j])
            old = flat[j]
            flat[j] = old + eps
            fp = loss_fn().item()
            flat[j] = old - eps
            fm = loss_fn().item()
            flat[j] = old
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
