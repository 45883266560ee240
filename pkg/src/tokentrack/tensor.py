"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every forward op records its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks the recorded nodes in
exact reverse creation order, so fan-out accumulates additively.

Broadcasting is deliberately narrow. Two operand shapes are compatible when

* they are equal,
* one operand is a scalar (every extent 1, or rank 0),
* the lower-rank shape is a trailing suffix of the other (``(D,)`` with
  ``(B, L, D)``), or
* ranks match and the shapes differ only in the last axis, where one side
  has extent 1 (``(B, L, 1)`` with ``(B, L, D)``).

Anything else raises :class:`ShapeError`. Use :func:`broadcast_to` for an
intentional expansion.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A documented precondition of an op was violated."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.op = ""

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes or not node.requires_grad:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)

        pending: dict[int, np.ndarray] = {self._id: grad}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = pending.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b:
        return
    if all(d == 1 for d in a) or all(d == 1 for d in b):
        return
    lo, hi = (a, b) if len(a) < len(b) else (b, a)
    if len(lo) < len(hi) and hi[len(hi) - len(lo):] == lo:
        return
    if len(a) == len(b) and a[:-1] == b[:-1] and (a[-1] == 1 or b[-1] == 1):
        return
    raise ShapeError(f"shapes {a} and {b} are outside the broadcast rule")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    check_broadcast(a.shape, b.shape)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    check_broadcast(a.shape, b.shape)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    xd = x.data
    return _result(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1.0),), "power")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ContractError("log of a non-positive value")
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)
    return _result(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    check_broadcast(a.shape, b.shape)
    pick = a.data >= b.data
    return _result(np.where(pick, a.data, b.data), (a, b),
                   lambda g: (g * pick, g * ~pick), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    check_broadcast(a.shape, b.shape)
    pick = a.data <= b.data
    return _result(np.where(pick, a.data, b.data), (a, b),
                   lambda g: (g * pick, g * ~pick), "minimum")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit expansion (numpy rules); the gradient sums back to ``x.shape``."""
    src = x.shape
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        extra = g.ndim - len(src)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(out, (x,), backward, "broadcast_to")


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays or python ints, not Tensors")

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _result(np.array(x.data[idx]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# ---------------------------------------------------------------------------
# linear algebra and fused layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or same-batch ``(..., m, k) @ (..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul cannot broadcast the left operand: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def depthwise_causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel causal convolution along axis -2.

    ``x`` is ``(..., L, C)`` and ``kernel`` is ``(K, C)``; ``kernel[k]`` weighs
    the input ``k`` steps in the past, so ``y[t] = sum_k kernel[k] * x[t - k]``
    with zeros before the sequence start.
    """
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"kernel {kernel.shape} does not match channels of {x.shape}")
    xd, kd = x.data, kernel.data
    L = xd.shape[-2]
    K = kd.shape[0]
    y = np.zeros_like(xd)
    for k in range(min(K, L)):
        y[..., k:, :] += kd[k] * xd[..., : L - k, :]

    def backward(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        for k in range(min(K, L)):
            gx[..., : L - k, :] += kd[k] * g[..., k:, :]
            gk[k] = (g[..., k:, :] * xd[..., : L - k, :]).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gk

    return _result(y, (x, kernel), backward, "causal_conv1d")


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Diagonal selective scan along axis -2, starting from a zero state.

    Shapes: ``x, delta: (..., L, E)``, ``A: (E, N)``, ``B, C: (..., L, N)``,
    ``D: (E,)``. Per step ``h = exp(delta*A) * h + delta*B*x`` and
    ``y = <h, C> + D*x``. The state never outlives the call.
    """
    xd, dd, Ad, Bd, Cd, Dd = (t.data for t in (x, delta, A, B, C, D))
    if np.any(dd <= 0):
        raise ContractError("selective_scan requires delta > 0")
    if dd.shape != xd.shape or Bd.shape != Cd.shape or Bd.shape[:-1] != xd.shape[:-1]:
        raise ShapeError("selective_scan operand shapes disagree")
    lead = xd.shape[:-2]
    L, E = xd.shape[-2:]
    N = Ad.shape[1]
    dA = np.exp(dd[..., None] * Ad)                           # (..., L, E, N)
    hs = np.empty(lead + (L, E, N), dtype=DTYPE)
    h = np.zeros(lead + (E, N), dtype=DTYPE)
    for t in range(L):
        h = dA[..., t, :, :] * h + (dd[..., t, :] * xd[..., t, :])[..., None] * Bd[..., t, None, :]
        hs[..., t, :, :] = h
    y = np.einsum("...len,...ln->...le", hs, Cd) + Dd * xd

    def backward(gy):
        gx = gy * Dd
        gdelta = np.zeros_like(dd)
        gA = np.zeros_like(Ad)
        gB = np.zeros_like(Bd)
        gC = np.einsum("...le,...len->...ln", gy, hs)
        gD = (gy * xd).reshape(-1, E).sum(axis=0)
        carry = np.zeros(lead + (E, N), dtype=DTYPE)
        for t in range(L - 1, -1, -1):
            gh = gy[..., t, :, None] * Cd[..., t, None, :] + carry
            h_prev = hs[..., t - 1, :, :] if t > 0 else np.zeros_like(gh)
            g_dA = gh * h_prev * dA[..., t, :, :]
            carry = gh * dA[..., t, :, :]
            dt, xt, bt = dd[..., t, :], xd[..., t, :], Bd[..., t, :]
            gbx = (gh * bt[..., None, :]).sum(axis=-1)        # d/d(delta*x)
            gdelta[..., t, :] = (g_dA * Ad).sum(axis=-1) + gbx * xt
            gx[..., t, :] += gbx * dt
            gA += (g_dA * dt[..., None]).reshape(-1, E, N).sum(axis=0)
            gB[..., t, :] = (gh * (dt * xt)[..., None]).sum(axis=-2)
        return gx, gdelta, gA, gB, gC, gD

    return _result(y, (x, delta, A, B, C, D), backward, "selective_scan")


def im2col3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighbourhoods: ``(B, H, W, C) -> (B, H, W, 9*C)``."""
    xd = x.data
    Bn, H, W, Cn = xd.shape
    p = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [p[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)]

    def backward(g):
        gp = np.zeros_like(p)
        g = g.reshape(Bn, H, W, 9, Cn)
        for n, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
            gp[:, i:i + H, j:j + W, :] += g[..., n, :]
        return (gp[:, 1:-1, 1:-1, :],)

    return _result(np.concatenate(cols, axis=-1), (x,), backward, "im2col3x3")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      indices: Iterable[int] | None = None) -> float:
    """Max relative error between autodiff and central differences.

    The error at each checked coordinate is
    ``|autodiff - numeric| / max(1, |numeric|)``. ``indices`` restricts the
    check to those flat coordinates of ``x`` (all coordinates by default).
    ``x.data`` is restored on exit.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        x.requires_grad = was
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    out.backward()
    auto = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(auto.reshape(-1)[i] - num) / max(1.0, abs(num)))
    x.requires_grad = was
    return worst
