"""Minimal reverse-mode autodiff over dense float64 arrays.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the graph in reverse
topological order and accumulates into ``.grad`` of leaf tensors that
require gradients. Broadcasting is limited to trailing-suffix shapes (bias,
gain, scalar gate), which is all a transformer needs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = False
_STATE = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared while debug checks were enabled."""


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks on every op output."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values produced by op")
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = getattr(_STATE, "grad", True) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead else grad


def _broadcast_pair(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or _is_suffix(b.shape, a.shape):
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are incompatible "
                     "(second operand must match or be a trailing suffix)")


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _is_suffix(b.shape, a.shape) and _is_suffix(a.shape, b.shape):
        a, b = b, a
    _broadcast_pair(a, b, "add")
    sb = b.shape
    return _node(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "sub")
    sb = b.shape
    return _node(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _is_suffix(b.shape, a.shape) and _is_suffix(a.shape, b.shape):
        a, b = b, a
    _broadcast_pair(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return _node(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "div")
    ad, bd, sb = a.data, b.data, b.shape
    return _node(ad / bd, (a, b),
                 lambda g: (g / bd, _reduce_to(-g * ad / (bd * bd), sb)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array with ordinary numpy broadcasting (masks)."""
    out = a.data + const
    if out.shape != a.shape:
        raise ShapeError(f"add_const: constant {np.shape(const)} would change shape {a.shape}")
    return _node(out, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes of ``a`` are carried, ``b`` may be 2-D or batched alike."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def record_branch(pattern: np.ndarray) -> None:
    """Log a discrete branch decision (ReLU sign mask, expert choice) while grad_check watches."""
    log_ = getattr(_STATE, "branches", None)
    if log_ is not None:
        log_.append(np.array(pattern, copy=True))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    record_branch(mask)
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, max(x.ndim, 1))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, max(x.ndim, 1))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _node(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} "
                         f"must both be ({d},) for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, (d,)), _reduce_to(g, (d,))

    return _node(xhat * gd + bias.data, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean token NLL over non-pad positions; zero (with zero grads) if all positions are pad."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.max() >= vocab or targets.min() < 0):
        raise ValueError(f"cross_entropy: target id out of range for vocab size {vocab}")
    flat = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    keep = tgt != pad_id
    n = int(keep.sum())
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(tgt.size), tgt]
    loss = float((nll * keep).sum() / n) if n else 0.0
    shape = logits.shape

    def backward(g):
        if not n:
            return (np.zeros(shape),)
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(tgt.size), tgt] -= 1.0
        probs *= (keep / n)[:, None] * g
        return (probs.reshape(shape),)

    return _node(np.array(loss), (logits,), backward)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _node(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {orig} as {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; output shape replaces that axis by ``indices.shape``."""
    axis = _check_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.max() >= a.shape[axis] or idx.min() < 0):
        raise IndexError(f"take: index out of range for axis {axis} of size {a.shape[axis]}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _node(np.take(a.data, idx, axis=axis), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    axis = _check_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum(sizes)[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose +h / -h evaluations took different branches


def _eval_branches(f, x: Tensor) -> tuple[float, list[np.ndarray]]:
    _STATE.branches = []
    try:
        val = f(x).item()
        return val, _STATE.branches
    finally:
        _STATE.branches = None


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(u.shape == v.shape and np.array_equal(u, v) for u, v in zip(a, b))


def grad_check_report(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                      skip_kinks: bool = False, floor: float = 1e-6,
                      indices: Iterable[int] | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). The
    floor sits above the central-difference round-off (about ulp(f) / h) so
    gradients that are zero analytically are compared absolutely. With
    ``skip_kinks`` a coordinate is excluded when the two stencil points
    disagree on any recorded branch (a ReLU crossing zero, a change of
    selected experts): the function is not differentiable inside the
    stencil there, so the finite difference is not a valid oracle.
    ``indices`` restricts the check to those flat coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved = x.grad
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = saved

    flat = x.data.reshape(-1)
    a_flat = analytic.reshape(-1)
    worst, checked, skipped = 0.0, 0, 0
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            fp, bp = _eval_branches(f, x) if skip_kinks else (f(x).item(), None)
            flat[i] = orig - h
            fm, bm = _eval_branches(f, x) if skip_kinks else (f(x).item(), None)
        flat[i] = orig
        if skip_kinks and not _same_branches(bp, bm):
            skipped += 1
            continue
        num = (fp - fm) / (2 * h)
        err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
        worst = max(worst, err)
        checked += 1
    return GradCheckResult(float(worst), checked, skipped)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
               skip_kinks: bool = False, floor: float = 1e-6) -> float:
    """Max elementwise relative error between reverse-mode and central-difference gradients.

    ``x`` must require grad; its ``.grad`` is restored afterwards.
    """
    return grad_check_report(f, x, h, skip_kinks, floor).max_rel_error


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class no_grad:
    """Stop graph construction on the current thread (inference only)."""

    def __enter__(self):
        self._prev = getattr(_STATE, "grad", True)
        _STATE.grad = False
        return self

    def __exit__(self, *exc):
        _STATE.grad = self._prev
        return False
