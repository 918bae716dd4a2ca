"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that sees an input with ``requires_grad`` records a node
holding its parents and a closure mapping the output gradient to one
gradient per parent. :meth:`Tensor.backward` walks those nodes in reverse
topological order, visiting each exactly once.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}") from None


class Tensor:
    """An n-dimensional float64 array that can carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

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
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.broadcast_to(_as_array(grad), self.shape).astype(DTYPE)
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that is not attached to any graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -----------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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

    def abs(self):
        return tabs(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (
                _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
            )

    return Tensor._make(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tabs(a, deadzone: float = 0.0) -> Tensor:
    """Absolute value; the subgradient is 0 wherever ``|a| <= deadzone``."""
    a = as_tensor(a)
    ad = a.data
    sign = np.sign(ad)
    if deadzone > 0:
        sign = np.where(np.abs(ad) <= deadzone, 0.0, sign)
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * sign,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return Tensor._make(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return Tensor._make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor._make(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return Tensor._make(out, (a,), lambda g: (g * _sigmoid(ad),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (0.5 * g / out,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "abs": lambda a, b=None: tabs(a),
    "sigmoid": lambda a, b=None: sigmoid(a),
    "gelu": lambda a, b=None: gelu(a),
    "square": lambda a, b=None: square(a),
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch one of the named elementwise operations."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with matching or broadcast batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


# -- reductions and reshapes ----------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def l1_norm(a, axis=None) -> Tensor:
    return tsum(tabs(a), axis)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}; shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, ts, backward)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (a,), backward)


def layer_norm(a, eps: float = 1e-8) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._make(y, (a,), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts], axis)


# -- stride-2 depthwise convolution -------------------------------------------------------

PADDING_MODES = ("zero", "reflect", "periodic")


def _pad_map(n: int, extra: int, mode: str) -> np.ndarray:
    """Source index for each position of the padded axis (-1 means zero).

    Odd lengths are first extended by one reflected sample; ``extra``
    samples are then appended on the right according to ``mode``.
    """
    if mode not in PADDING_MODES:
        raise ValueError(f"padding mode must be one of {PADDING_MODES}, got {mode!r}")
    src = list(range(n))
    if n % 2:
        if n < 2:
            raise ShapeError("cannot reflect-pad an axis of length 1")
        src.append(n - 2)
    m = len(src)
    for j in range(m, m + extra):
        if mode == "zero":
            src.append(-1)
        elif mode == "periodic":
            src.append(src[j % m])
        else:
            r = 2 * (m - 1) - j
            if r < 0:
                raise ShapeError(f"reflect padding of {extra} exceeds axis length {m}")
            src.append(src[r])
    return np.asarray(src)


def _pad_axis(x: np.ndarray, src: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if len(src) == n:
        return x
    tail = src[n:]
    parts = [x]
    for j in tail:
        if j < 0:
            shape = list(x.shape)
            shape[axis] = 1
            parts.append(np.zeros(shape, dtype=DTYPE))
        else:
            parts.append(np.take(x, [j], axis=axis))
    return np.concatenate(parts, axis=axis)


def _fold_axis(g: np.ndarray, src: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Adjoint of :func:`_pad_axis`: add padded positions back onto their sources."""
    if g.shape[axis] == n:
        return g
    g = np.moveaxis(g, axis, 0)
    out = g[:n].copy()
    for pos in range(n, len(src)):
        if src[pos] >= 0:
            out[src[pos]] += g[pos]
    return np.moveaxis(out, 0, axis)


def _check_kernel(x_shape, k_shape, op):
    if len(k_shape) != 3 or k_shape[1] != k_shape[2]:
        raise ShapeError(f"{op}: kernel must be C x K x K, got {k_shape}")
    if k_shape[1] % 2:
        raise ShapeError(f"{op}: kernel size must be even, got {k_shape[1]}")
    if len(x_shape) < 3:
        raise ShapeError(f"{op}: input must be [..., C, H, W], got {x_shape}")
    if k_shape[0] not in (1, x_shape[-3]):
        raise ShapeError(f"{op}: kernel channels {k_shape[0]} do not match input channels {x_shape[-3]}")


def conv2d_depthwise_stride2(x, kernel, padding: str = "zero") -> Tensor:
    """Per-channel stride-2 correlation; output extent is ceil(n/2) per axis.

    ``out[c, i, j] = sum_{p,q} kernel[c, p, q] * xpad[c, 2i + p, 2j + q]`` where
    ``xpad`` is the (odd-extended, then right/bottom padded) input. A kernel
    with a single channel is shared by all channels.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_kernel(x.shape, kernel.shape, "conv2d_depthwise_stride2")
    K = kernel.shape[-1]
    H, W = x.shape[-2:]
    He, We = H + H % 2, W + W % 2
    if He + K - 2 < K or We + K - 2 < K or H < K or W < K:
        raise ShapeError(f"kernel {K}x{K} larger than input {H}x{W}")
    P = _pad_map(H, K - 2, padding)
    Q = _pad_map(W, K - 2, padding)
    xd, kd = x.data, kernel.data
    xp = _pad_axis(_pad_axis(xd, P, -2), Q, -1)
    h, w = He // 2, We // 2
    kb = kd[..., None, None]
    out = np.zeros(xd.shape[:-2] + (h, w), dtype=DTYPE)
    for p in range(K):
        for q in range(K):
            out += kb[:, p, q] * xp[..., p : p + 2 * h : 2, q : q + 2 * w : 2]

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for p in range(K):
                for q in range(K):
                    gp[..., p : p + 2 * h : 2, q : q + 2 * w : 2] += kb[:, p, q] * g
            gx = _fold_axis(_fold_axis(gp, Q, W, -1), P, H, -2)
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            red = tuple(range(g.ndim - 3)) + (g.ndim - 2, g.ndim - 1)
            for p in range(K):
                for q in range(K):
                    s = (g * xp[..., p : p + 2 * h : 2, q : q + 2 * w : 2]).sum(axis=red)
                    gk[:, p, q] = s.sum() if kd.shape[0] == 1 else s
        return gx, gk

    return Tensor._make(out, (x, kernel), backward)


def conv2d_transpose_depthwise_stride2(c, kernel, padding: str = "zero", out_size: tuple | None = None) -> Tensor:
    """Adjoint of :func:`conv2d_depthwise_stride2` on even extents.

    Coefficients are scattered at stride 2, the right/bottom padding is
    folded back according to ``padding``, and the result is cropped to
    ``out_size`` (default ``2h x 2w``) so odd extents round-trip.
    """
    c, kernel = as_tensor(c), as_tensor(kernel)
    _check_kernel(c.shape, kernel.shape, "conv2d_transpose_depthwise_stride2")
    K = kernel.shape[-1]
    h, w = c.shape[-2:]
    He, We = 2 * h, 2 * w
    Ho, Wo = out_size if out_size is not None else (He, We)
    if not (Ho in (He, He - 1) and Wo in (We, We - 1)):
        raise ShapeError(f"out_size {(Ho, Wo)} incompatible with coefficient grid {h}x{w}")
    P = _pad_map(He, K - 2, padding)
    Q = _pad_map(We, K - 2, padding)
    cd, kd = c.data, kernel.data
    kb = kd[..., None, None]
    full = np.zeros(cd.shape[:-2] + (He + K - 2, We + K - 2), dtype=DTYPE)
    for p in range(K):
        for q in range(K):
            full[..., p : p + He : 2, q : q + We : 2] += kb[:, p, q] * cd
    out = _fold_axis(_fold_axis(full, Q, We, -1), P, He, -2)[..., :Ho, :Wo]

    def backward(g):
        ge = np.zeros(cd.shape[:-2] + (He, We), dtype=DTYPE)
        ge[..., :Ho, :Wo] = g
        gfull = _pad_axis(_pad_axis(ge, P, -2), Q, -1)
        gc = gk = None
        if c.requires_grad:
            gc = np.zeros_like(cd)
            for p in range(K):
                for q in range(K):
                    gc += kb[:, p, q] * gfull[..., p : p + He : 2, q : q + We : 2]
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            red = tuple(range(cd.ndim - 3)) + (cd.ndim - 2, cd.ndim - 1)
            for p in range(K):
                for q in range(K):
                    s = (cd * gfull[..., p : p + He : 2, q : q + We : 2]).sum(axis=red)
                    gk[:, p, q] = s.sum() if kd.shape[0] == 1 else s
        return gc, gk

    return Tensor._make(out, (c, kernel), backward)


# -- finite differences ----------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar ``fn()`` wrt ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
               rtol: float = 1e-4, atol: float = 1e-6) -> float:
    """Largest relative error between autodiff and central differences.

    Relative error uses ``max(|analytic|, |numeric|, atol)`` as the scale.
    """
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(fn, p, h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    return worst
