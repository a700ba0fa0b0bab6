"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh node recording its parents and a closure that maps
the upstream gradient onto the parents. ``Tensor.backward`` walks the graph
in reverse topological order exactly once and accumulates into ``.grad``.

Broadcasting is deliberately limited to equal shapes or a scalar operand.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True
_LOG_MODE = "strict"
_LOG_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class DomainError(ValueError):
    """An input lies outside the op's mathematical domain."""


class ContractError(RuntimeError):
    """A caller broke an op's contract (non-scalar loss, shape-changing hook...)."""


def set_default_dtype(dtype: str | type) -> None:
    """Switch the working precision; ``"f64"`` (default) or ``"f32"``."""
    global _DTYPE
    _DTYPE = {"f64": np.float64, "f32": np.float32}.get(dtype, dtype)
    if _DTYPE not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")


def get_default_dtype() -> type:
    return _DTYPE


def set_log_mode(mode: str) -> None:
    """``strict`` raises on log(x<=0); ``lenient`` clamps the input to a tiny epsilon."""
    global _LOG_MODE
    if mode not in ("strict", "lenient"):
        raise ValueError(f"log mode must be 'strict' or 'lenient', got {mode!r}")
    _LOG_MODE = mode


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic introspection ------------------------------------------------
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
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph traversal ----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every requires-grad node."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not require grad; nothing to differentiate")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        upstream: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg

    # -- operator sugar -----------------------------------------------------
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
        if isinstance(other, Tensor):
            raise NotImplementedError("tensor/tensor division is not part of the op set")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.isscalar(x)


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a_, b_ = as_tensor(a), as_tensor(b)
    if a_.shape != b_.shape and not (_is_scalar(a_) or _is_scalar(b_)):
        raise DimensionError(f"{op}: shapes {a_.shape} and {b_.shape} are not broadcast-compatible "
                             "(only equal shapes or scalar operands are supported)")
    return a_, b_


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo scalar broadcasting
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_fit(g * bd, a.shape), _fit(g * ad, b.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        if _LOG_MODE == "strict":
            bad = np.argwhere(xd <= 0)[0]
            raise DomainError(f"log of non-positive value {xd[tuple(bad)]!r} at index {tuple(bad)}")
        xd = np.maximum(xd, _LOG_EPS)
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def custom_grad(x: Tensor, forward_fn: Callable[[np.ndarray], np.ndarray],
                backward_fn: Callable[[np.ndarray], np.ndarray], name: str = "custom") -> Tensor:
    """Apply ``forward_fn`` but differentiate with ``backward_fn(x)`` as local derivative.

    Both callables take and return arrays of ``x``'s shape; anything else is a
    contract violation.
    """
    xd = x.data
    y = np.asarray(forward_fn(xd), dtype=xd.dtype)
    if y.shape != xd.shape:
        raise ContractError(f"{name}: forward_fn changed shape {xd.shape} -> {y.shape}")

    def back(g):
        d = np.asarray(backward_fn(xd), dtype=xd.dtype)
        if d.shape != xd.shape:
            raise ContractError(f"{name}: backward_fn changed shape {xd.shape} -> {d.shape}")
        return (g * d,)

    return _node(y, (x,), back, name)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _node(y, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch dimensions."""
    return reshape(x, (x.shape[0], -1))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 (the one place channel broadcasting is allowed)."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"bias_add: bias {bias.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    return _node(x.data + bias.data.reshape(view), (x, bias),
                 lambda g: (g, g.sum(axis=red)), "bias_add")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else bias_add(y, bias)


# -- reductions ---------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not axes:
        raise DomainError("reduction over an empty axis set")
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DomainError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return _node(x.data.sum(axis=axes), (x,),
                 lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),), "sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DomainError("mean over zero elements")
    return scale(reduce_sum(x, axes), 1.0 / count)


# -- softmax family -----------------------------------------------------------
def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot) / temperature,)

    return _node(y, (x,), back, "softmax")


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _node(y, (x,), back, "log_softmax")


# -- structural ---------------------------------------------------------------
def take(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing; the gradient scatters back with accumulation."""
    y = x.data[index]
    if isinstance(y, np.ndarray) and np.shares_memory(y, x.data):
        y = y.copy()
    else:
        y = np.asarray(y)
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(y, (x,), back, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("stack of an empty sequence")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise DimensionError(f"stack: shapes {first} and {t.shape} differ")
    y = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def back(g):
        parts = np.split(g, n, axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _node(y, tuple(tensors), back, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    y = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _node(y, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum, e.g. ``"nbd,abd->nba"``; no index may repeat within an operand."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index in {s!r}")
    if not set(sa) <= set(sb) | set(out) or not set(sb) <= set(sa) | set(out):
        raise ContractError(f"einsum: {spec!r} sums an index private to one operand")
    try:
        y = np.einsum(f"{sa},{sb}->{out}", a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec!r}: shapes {a.shape}, {b.shape}") from exc
    ad, bd = a.data, b.data

    def back(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bd, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, ad, optimize=True) if b.requires_grad else None
        return ga, gb

    return _node(np.asarray(y), (a, b), back, "einsum")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# -- convolution & pooling ----------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int, floor: bool = False) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(f"kernel {kernel} exceeds padded size {size + 2 * padding}")
    if span % stride and not floor:
        raise DimensionError(f"output size ({size} + 2*{padding} - {kernel})/{stride} + 1 is not an integer")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, floor: bool = False) -> Tensor:
    """2-D cross-correlation over ``x[b, c, h, w]`` with ``weight[c_out, c, kh, kw]``.

    ``floor=True`` discards a trailing partial window instead of raising,
    the usual framework behaviour for strided convs on even sizes.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    b, c, h, w = x.shape
    co, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding, floor)
    wo = conv_output_size(w, kw, stride, padding, floor)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col in channels-last layout so every patch copy moves contiguous channel runs
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(b * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(co, -1)
    y = np.ascontiguousarray((cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2))
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, ho, wo, kh, kw, c)
            gxt = np.zeros(xt.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gxp = gxt.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(y, parents, back, "conv2d")


def _pool_view(xd: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = xd.shape
    if h % k or w % k:
        raise DimensionError(f"pool size {k} does not divide spatial dims {(h, w)}")
    return xd.reshape(b, c, h // k, k, w // k, k)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    view = _pool_view(x.data, k)
    shape = x.shape
    inv = 1.0 / (k * k)

    def back(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None] * inv, view.shape)
        return (gg.reshape(shape),)

    return _node(view.mean(axis=(3, 5)), (x,), back, "avg_pool2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pool; ties route the gradient to the first maximum."""
    view = _pool_view(x.data, k)
    b, c, ho, _, wo, _ = view.shape
    flat = view.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def back(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        gv = gf.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gv.reshape(shape),)

    return _node(y, (x,), back, "max_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    b, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _node(y, (x,), back, "upsample_nearest")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
