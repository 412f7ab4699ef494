"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` walks that tape once in reverse topological order.  Tapes are
single use: interior nodes are released after the traversal and a second call
raises :class:`GraphConsumedError`.

Shapes follow numpy broadcasting for the elementwise ops; spatial ops work on
the trailing ``(C, H, W)`` axes and accept any number of leading batch axes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class GraphConsumedError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and weights."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0

    def backward(g):
        return (g * keep,)

    return _result(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), backward, "relu")


def tabs(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return _result(np.abs(x.data), (x,), backward, "abs")


def square(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (2 * g * x.data,)

    return _result(x.data * x.data, (x,), backward, "square")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _result(np.clip(x.data, lo, hi), (x,), backward, "clamp")


# --- reductions and shape ---------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(x) -> Tensor:
    """Global maximum; the gradient is shared equally among tied arg-maxima."""
    x = as_tensor(x)
    value = x.data.max()
    hit = x.data == value

    def backward(g):
        return (g * hit / hit.sum(),)

    return _result(np.asarray(value), (x,), backward, "max")


def tmin(x) -> Tensor:
    x = as_tensor(x)
    value = x.data.min()
    hit = x.data == value

    def backward(g):
        return (g * hit / hit.sum(),)

    return _result(np.asarray(value), (x,), backward, "min")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), backward, "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def take(x, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back into place."""
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), backward, "take")


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 cross-correlation with zero padding that preserves H and W.

    ``x`` is ``(..., C, H, W)``, ``weight`` is ``(O, C, kh, kw)`` with odd
    kernel extents, ``bias`` is ``(O,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 3 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected (...,C,H,W) input and 4-d kernel, got {x.shape}, {weight.shape}")
    out_c, in_c, kh, kw = weight.shape
    if x.shape[-3] != in_c:
        raise ShapeError("conv2d", f"input has {x.shape[-3]} channels, kernel expects {in_c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", f"kernel extents must be odd, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xb, lead = _as_batched(x.data)
    n, _, h, w = xb.shape
    padded = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # n, c, h, w, kh, kw
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, in_c * kh * kw, h * w)
    kernel = weight.data.reshape(out_c, -1)
    out = np.matmul(kernel, cols)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out_c,):
            raise ShapeError("conv2d", f"bias shape {bias.shape} != ({out_c},)")
        out = out + bias.data[:, None]
        parents.append(bias)
    out = out.reshape(lead + (out_c, h, w))

    def backward(g):
        gb = g.reshape(n, out_c, h * w)
        gx = gw = gbias = None
        if weight.requires_grad:
            gw = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(kernel.T, gb).reshape(n, in_c, kh, kw, h, w)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + h, j:j + w] += gcols[:, :, i, j]
            gx = gpad[:, :, ph:ph + h, pw:pw + w].reshape(x.shape)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2))
        return (gx, gw, gbias) if bias is not None else (gx, gw)

    return _result(out, parents, backward, "conv2d")


def avg_pool(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling over (H, W).

    Ragged trailing blocks (ceil mode) average only the in-bounds elements.
    """
    x = as_tensor(x)
    if x.ndim < 2 or k < 1:
        raise ShapeError("avg_pool", f"bad input {x.shape} or kernel {k}")
    h, w = x.shape[-2:]
    oh, ow = -(-h // k), -(-w // k)
    ph, pw = oh * k - h, ow * k - w
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    xp = np.pad(x.data, pad)
    blocks = xp.reshape(x.shape[:-2] + (oh, k, ow, k))
    counts = np.pad(np.ones((h, w)), ((0, ph), (0, pw))).reshape(oh, k, ow, k).sum(axis=(1, 3))
    out = blocks.sum(axis=(-3, -1)) / counts.astype(x.dtype)

    def backward(g):
        share = g / counts
        expanded = np.repeat(np.repeat(share, k, axis=-2), k, axis=-1)
        return (expanded[..., :h, :w],)

    return _result(out.astype(x.dtype, copy=False), (x,), backward, "avg_pool")


def l2_normalize(x, axis: int = 0, eps: float = 1e-12) -> Tensor:
    """Divide by the L2 norm along ``axis``; all-zero vectors map to zeros."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        regular = (g - y * proj) / denom
        return (np.where(norm > eps, regular, g / denom),)

    return _result(y, (x,), backward, "l2_normalize")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped: matches cell-centre coordinates across strides
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - frac
    m[np.arange(n_out), i1] += frac
    return m.astype(dtype)


def bilinear_resize(x, size: tuple[int, int]) -> Tensor:
    """Resample the trailing (H, W) axes to ``size`` with bilinear weights."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_resize", f"need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    oh, ow = size
    ry = _interp_matrix(h, oh, x.dtype)
    rx = _interp_matrix(w, ow, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _result(out, (x,), backward, "bilinear_resize")


def grid_sample(x, ys: np.ndarray, xs: np.ndarray, tol: float = 1e-6) -> Tensor:
    """Bilinear sampling of ``(..., C, H, W)`` at pixel coordinates ``(ys, xs)``.

    Pixel centres sit at integer coordinates.  Sample points outside
    ``[0, W-1] x [0, H-1]`` (beyond ``tol``) produce zeros.  Differentiable with
    respect to ``x`` only; the coordinates are treated as constants.
    """
    x = as_tensor(x)
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if ys.shape != xs.shape:
        raise ShapeError("grid_sample", f"coordinate grids differ: {ys.shape} vs {xs.shape}")
    h, w = x.shape[-2:]
    valid = (xs >= -tol) & (xs <= w - 1 + tol) & (ys >= -tol) & (ys <= h - 1 + tol)
    cx = np.clip(xs, 0, w - 1)
    cy = np.clip(ys, 0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx = cx - x0
    fy = cy - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    corners = [
        (y0 * w + x0, (1 - fy) * (1 - fx)),
        (y0 * w + x1, (1 - fy) * fx),
        (y1 * w + x0, fy * (1 - fx)),
        (y1 * w + x1, fy * fx),
    ]
    corners = [(idx.ravel(), (wt * valid).ravel().astype(x.dtype)) for idx, wt in corners]
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, h * w)
    out = sum(flat[:, idx] * wt for idx, wt in corners)
    out = out.reshape(lead + ys.shape)
    b = flat.shape[0]

    def backward(g):
        gf = g.reshape(b, -1)
        offsets = (np.arange(b) * h * w)[:, None]
        total = np.zeros(b * h * w)
        for idx, wt in corners:
            total += np.bincount((idx[None, :] + offsets).ravel(), weights=(gf * wt).ravel(), minlength=b * h * w)
        return (total.reshape(x.shape).astype(x.dtype, copy=False),)

    return _result(out, (x,), backward, "grid_sample")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


_FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "avg_pool": avg_pool,
    "l2_normalize": l2_normalize,
    "bilinear_resize": bilinear_resize,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named primitive ops."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; expected one of {sorted(_FORWARD_OPS)}") from None
    return fn(*inputs, **kwargs)


# --- reverse pass -------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(root)/d(.) to every leaf reachable from ``root``.

    Returns the gradients of trainable :class:`~matres.params.Parameter` leaves
    keyed by parameter name.  Plain leaf tensors with ``requires_grad`` get
    their ``.grad`` buffer filled instead.  Frozen parameters never require
    grad, so gradients flow through the ops that use them but never land on
    them.
    """
    if root.data.size != 1:
        raise ShapeError("backward", f"root must be a scalar, got shape {root.shape}")
    if root._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    if not root.requires_grad:
        return {}
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # all contributions are summed in `grads` before a leaf is popped
            node.grad = g
            name = getattr(node, "name", None)
            if name is not None:
                out[name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()
    return out
