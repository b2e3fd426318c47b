"""Dense float64 tensors with reverse-mode differentiation.

Every primitive below computes its value eagerly with numpy and, when any
input requires a gradient, records a closure that maps the output gradient
to input gradients. ``backward`` replays those closures in reverse
topological order.

All values are float64. A primitive that produces NaN or Inf raises
:class:`NonFiniteError` immediately instead of letting it propagate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, ZeroNormError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "power",
    "softmax_along",
    "log_softmax_along",
    "gelu",
    "layer_norm",
    "transpose",
    "swap_last",
    "reshape",
    "concatenate",
    "sum_along",
    "mean_along",
    "l2_normalize",
    "gather_rows",
    "topological_order",
    "backward",
    "GradCheckReport",
    "finite_difference_check",
]


class Tensor:
    """A float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ") from None
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), _bw)


def matmul_exact(a: Tensor, b: Tensor, sort_terms: bool = False) -> Tensor:
    """``a @ b`` with every output entry reduced on its own.

    BLAS kernels may round a row differently depending on where it sits in
    its block, so reordering the rows of ``a`` can change results in the
    last bit. Here each entry is an independent sum, so permuting rows of
    ``a`` permutes the output exactly. With ``sort_terms`` the products are
    summed in sorted order, which also makes each entry independent of the
    order along the contracted axis. The gradient is the ordinary one.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul_exact: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul_exact: batch axes of {a.shape} and {b.shape} differ") from None
    terms = a.data[..., :, None, :] * np.swapaxes(b.data, -1, -2)[..., None, :, :]
    if sort_terms:
        terms.sort(axis=-1)
    out = terms.sum(axis=-1)

    def _bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul_exact", (a, b), _bw)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # [..., k] @ [k, n] as one 2-D product; far faster than a batched loop
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

    def _bw(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), _bw)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "mul", (a, b), _bw)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, "neg", (x,), lambda g: (-g,))


def scale(x: Tensor, k: float) -> Tensor:
    return _make(x.data * k, "scale", (x,), lambda g: (g * k,))


def add_scalar(x: Tensor, k: float) -> Tensor:
    return _make(x.data + k, "add_scalar", (x,), lambda g: (g,))


def power(x: Tensor, p: float) -> Tensor:
    out = np.power(x.data, p)

    def _bw(g):
        return (g * p * np.power(x.data, p - 1),)

    return _make(out, "power", (x,), _bw)


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd  # ndarray ** is much slower than repeated products
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_K
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def _bw(g):
        d = x2 * (3 * 0.044715 * _GELU_K)
        d += _GELU_K
        d *= 1.0 - t * t
        d *= xd
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, "gelu", (x,), _bw)


# ---------------------------------------------------------------------------
# normalisations


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def _reduce_sum(a: np.ndarray, axis, keepdims: bool, order_invariant: bool) -> np.ndarray:
    # Summing the sorted values makes the result independent of the order of
    # the inputs along ``axis``, down to the last bit.
    if order_invariant and axis is not None:
        a = np.sort(a, axis=axis)
    return a.sum(axis=axis, keepdims=keepdims)


def softmax_along(x: Tensor, axis: int, order_invariant: bool = False) -> Tensor:
    """Numerically stable softmax; every slice along ``axis`` sums to 1.

    With ``order_invariant`` the normaliser is summed in sorted order, so
    permuting the input along ``axis`` permutes the output exactly.
    """
    axis = _check_axis(x, axis, "softmax_along")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / _reduce_sum(e, axis, True, order_invariant)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, "softmax", (x,), _bw)


def log_softmax_along(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax_along")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a per-feature affine map."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain {gamma.shape} / bias {beta.shape} do not match features of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, "layer_norm", (x, gamma, beta), _bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "l2_normalize")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise ZeroNormError("l2_normalize: zero-norm slice cannot be normalised")
    y = x.data / norm

    def _bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, "l2_normalize", (x,), _bw)


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"swap_last: need rank >= 2, got shape {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), "swap_last", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def concatenate(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("concatenate: nothing to join")
    axis = _check_axis(xs[0], axis, "concatenate")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concatenate: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concatenate", tuple(xs), _bw)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select entries along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], "gather_rows", (x,), _bw)


# ---------------------------------------------------------------------------
# reductions


def sum_along(x: Tensor, axis: int | None = None, keepdims: bool = False, order_invariant: bool = False) -> Tensor:
    if axis is not None:
        axis = _check_axis(x, axis, "sum_along")
    out = np.asarray(_reduce_sum(x.data, axis, keepdims, order_invariant))

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), _bw)


def mean_along(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_along(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input before its consumer."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Propagate d(loss)/d(.) to every reachable leaf that requires a gradient.

    Leaf gradients are stored on ``.grad`` (overwriting any previous value).
    If ``wrt`` is given, the gradients for those tensors are returned in the
    same order; tensors the loss does not depend on get exact zeros.
    """
    if loss.size != 1:
        raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
    wrt = list(wrt or [])
    for t in wrt:
        t.grad = None
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in wrt]

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: tuple[int, ...] | None
    n_checked: int
    worst_autodiff: float = 0.0
    worst_numeric: float = 0.0

    @property
    def pass_(self) -> bool:
        return self.passed


def finite_difference_check(
    f: Callable[[], Tensor],
    p: Tensor,
    step: float = 1e-6,
    tol: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare autodiff against central differences for parameter ``p``.

    ``f`` is re-evaluated after perturbing ``p.data`` in place, so it must
    read ``p`` rather than a copy. ``coords`` optionally restricts the check
    to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    loss = f()
    (ad,) = backward(loss, [p])
    ad = ad.reshape(-1)
    flat = p.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst, worst_idx, n = 0.0, None, 0
    worst_ad = worst_fd = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        fp = _evaluate(f, i)
        flat[i] = orig - step
        fm = _evaluate(f, i)
        flat[i] = orig
        fd = (fp - fm) / (2 * step)
        rel = abs(fd - ad[i]) / max(abs(fd), abs(ad[i]), 1e-8)
        n += 1
        if rel > worst:
            worst, worst_idx = rel, np.unravel_index(i, p.shape)
            worst_ad, worst_fd = float(ad[i]), float(fd)
    return GradCheckReport(
        max_rel_err=float(worst),
        passed=bool(worst < tol),
        worst_index=None if worst_idx is None else tuple(int(k) for k in worst_idx),
        n_checked=n,
        worst_autodiff=worst_ad,
        worst_numeric=worst_fd,
    )


def _evaluate(f: Callable[[], Tensor], coord: int) -> float:
    try:
        v = float(f().data.reshape(-1)[0])
    except NonFiniteError as exc:
        raise NonFiniteError(f"finite_difference_check: objective non-finite at coordinate {coord}: {exc}") from exc
    if not math.isfinite(v):
        raise NonFiniteError(f"finite_difference_check: objective non-finite at coordinate {coord}")
    return v
