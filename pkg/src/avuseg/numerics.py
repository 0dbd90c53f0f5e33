"""Dense tensors with reverse-mode automatic differentiation.

Every tensor produced by a primitive keeps a reference to its parents and a
vector-Jacobian closure. ``Tensor.backward`` walks the graph once in reverse
topological order. Arrays are float64 unless float32 data is passed in
explicitly (bulk inference only).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class DomainError(ValueError):
    """Input lies outside the domain of a primitive (e.g. log of 0)."""


class GraphError(RuntimeError):
    """Backward pass requested on an invalid or already-consumed graph."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float32:
        return arr
    return arr.astype(np.float64, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op", "_consumed")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor.__rop__

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _vjp: Callable | None = None, op: str = "leaf"):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op
        self._consumed = False

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, op=op)


# ---------------------------------------------------------------- broadcasting

def _is_scalar_like(shape: tuple) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _is_channel_bias(shape: tuple, full: tuple) -> bool:
    if len(shape) != len(full) or len(full) < 2:
        return False
    return shape[1] == full[1] and all(s == 1 for i, s in enumerate(shape) if i != 1)


def _binary_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if _is_scalar_like(sb) and len(sb) <= len(sa):
        return sa
    if _is_scalar_like(sa) and len(sa) <= len(sb):
        return sb
    if _is_channel_bias(sb, sa):
        return sa
    if _is_channel_bias(sa, sb):
        return sb
    raise ShapeError(op, sa, sb)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) < grad.ndim:
        grad = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ------------------------------------------------------------ elementwise ops

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero in denominator")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input (clamp with eps first)")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def power(a, k: float) -> Tensor:
    """a ** k for a scalar exponent; non-integer k needs a >= 0."""
    a = _wrap(a)
    k = float(k)
    if not k.is_integer() and np.any(a.data < 0):
        raise DomainError("power: negative base with non-integer exponent")
    if k == 0:
        return _make(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),), "power")
    out = a.data ** k

    def vjp(g):
        return (g * k * a.data ** (k - 1),)
    return _make(out, (a,), vjp, "power")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _wrap(a), _wrap(b)
    _binary_shape("maximum", a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))
    return _make(out, (a, b), vjp, "maximum")


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the value is inside."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (np.where(inside, g, 0.0),), "clip")


# ------------------------------------------------------------- reductions

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes], dtype=np.int64))
    return div(sum_(a, axes, keepdims), float(count))


# --------------------------------------------------------------- structure

def reshape(a, shape: tuple) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape: tuple) -> Tensor:
    """Explicit expansion of size-1 axes; the only non-scalar broadcast."""
    a = _wrap(a)
    if a.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(a.shape, shape)):
        raise ShapeError("broadcast_to", a.shape, shape)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, other))
                                         if i != axis % len(ref)):
            raise ShapeError("concat", ts[0].shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tuple(ts), vjp, "concat")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g
    return _make(out, (a, b), vjp, "matmul")


def softmax(a, axis: int = 1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), vjp, "softmax")


# ----------------------------------------------------------- spatial ops

def _pad_amount(k: int, dilation: int, padding: str) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("conv2d", (k, k), ("odd kernel required for same padding",))
        return dilation * (k - 1) // 2
    raise ValueError(f"conv2d: unknown padding {padding!r}")


def conv2d(x, w, padding: str = "same", dilation: int = 1) -> Tensor:
    """Stride-1 2D cross-correlation.

    Args:
        x: input of shape (N, Cin, H, W).
        w: kernel of shape (Cout, Cin, kh, kw).
        padding: ``"same"`` (zero padding, output H x W) or ``"valid"``.
        dilation: spacing between kernel taps.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = _pad_amount(kh, dilation, padding), _pad_amount(kw, dilation, padding)
    ho, wo = h + 2 * ph - dilation * (kh - 1), wd + 2 * pw - dilation * (kw - 1)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # im2col with batch leading: cols[n, (c, i, j), (r, s)]
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + ho, c0:c0 + wo]
    k = cin * kh * kw
    cols = cols.reshape(n, k, ho * wo)
    w2 = w.data.reshape(cout, k)
    out = np.matmul(w2, cols).reshape(n, cout, ho, wo)

    def vjp(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + ho, c0:c0 + wo] += dcols[:, :, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
        return gx, gw
    return _make(out, (x, w), vjp, "conv2d")


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    x = _wrap(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError("max_pool2d", x.shape, (size, size))
    blocks = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // size, w // size, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)
    return _make(out, (x,), vjp, "max_pool2d")


def upsample_nearest(x, scale: int = 2) -> Tensor:
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", x.shape)
    out = x.data.repeat(scale, axis=2).repeat(scale, axis=3)
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)
    return _make(out, (x,), vjp, "upsample_nearest")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: root is detached from any differentiable input")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; rebuild it before calling again")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None or node._vjp is not None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    loss._consumed = True


# ------------------------------------------------------- gradient checking

def numerical_gradient(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = fn()
        flat[k] = orig - eps
        fm = fn()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).ravel())
    den = np.linalg.norm(a.ravel()) + np.linalg.norm(b.ravel())
    return 0.0 if den == 0 else float(num / den)


def gradcheck(build: Callable[..., Tensor], arrays: Sequence[np.ndarray],
              eps: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``build(*tensors)`` against finite differences.

    Returns the worst norm-wise relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def fn(i=i):
            return float(build(*[Tensor(a) for a in arrays]).data)
        fd = numerical_gradient(fn, arrays[i], eps)
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(ad, fd))
    return worst
