"""A small reverse-mode autodiff core on top of numpy.

The supported operation set is closed. Everything the models need is composed
from these primitives:

    add, sub, mul, scale, matmul, relu, tanh, softmax, layer_norm,
    embedding, concat, reshape, transpose, sum, mean, sq_l2,
    cross_entropy, stop_gradient, straight_through

Gradients of a value used several times are summed. Parameters flagged as
non-trainable still pass gradient through to their inputs' other operands but
never accumulate a gradient of their own.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_default_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference only)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced a non-finite value")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        elif isinstance(data, (np.float32, np.float64)):
            # 0-d reduction results keep their precision
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor; only trainable parameters receive gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.trainable = True
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return as_tensor(a), as_tensor(b)


def _make(data, parents, backward_fn, op) -> Tensor:
    _check_finite(data, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def _bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), _bw, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), _bw, "matmul")


# --- nonlinearities ---------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), _bw, "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def _bw(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), _bw, "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), _bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gamma.shape}, {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), _bw, "layer_norm")


# --- indexing and structure -------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: id out of range [0, {n})")

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), _bw, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), _bw, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def _bw(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), _bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _bw(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), _bw, "transpose")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --- losses and distances ---------------------------------------------------


def sq_l2(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance over the last axis."""
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def _bw(g):
        gd = 2.0 * diff * g[..., None]
        return gd, -gd

    return _make((diff * diff).sum(axis=-1), (a, b), _bw, "sq_l2")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("cross_entropy: mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def _bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (mask[..., None] * (g / count)),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "cross_entropy")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, op="stop_gradient")


def straight_through(r: Tensor, q: Tensor) -> Tensor:
    """Forward ``q`` exactly; backward hands the incoming gradient to ``r`` unchanged."""
    if r.shape != q.shape:
        raise ShapeError(f"straight_through: shapes {r.shape} and {q.shape} differ")

    def _bw(g):
        return (g,)

    return _make(q.data.copy(), (r,), _bw, "straight_through")


# --- backward pass ----------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every trainable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if isinstance(node, Parameter) and not node.trainable:
                continue
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def evaluate_with_gradients(fn: Callable[[], Tensor], params: Sequence[Parameter]):
    """Run ``fn`` and return its scalar value plus a gradient per parameter name.

    Frozen parameters are reported with an all-zero gradient.
    """
    zero_grad(params)
    out = fn()
    out.backward()
    grads = {}
    for p in params:
        grads[p.name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out, grads


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    max_coords: int | None = 20,
    seed: int = 0,
    details: dict | None = None,
    numeric_fn: Callable[[], Tensor] | None = None,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    At most ``max_coords`` randomly chosen coordinates per parameter are probed.
    Frozen parameters are not probed; they are recorded as exact if their
    analytic gradient is zero. ``numeric_fn``, when given, is the function
    probed by the differences (a smooth surrogate whose exact gradient the
    analytic pass is supposed to produce, e.g. for straight-through ops).
    """
    probe = numeric_fn or fn
    if not 0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"finite_difference_check needs float64 parameters; {p.name} is {p.data.dtype}")
    _, grads = evaluate_with_gradients(fn, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads[p.name]
        if not p.trainable:
            if details is not None:
                details[p.name] = 0.0 if not analytic.any() else float("inf")
            continue
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        err_p = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = probe().item()
            flat[i] = orig - step
            f_minus = probe().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"finite_difference_check: non-finite value probing {p.name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            err_p = max(err_p, err)
        if details is not None:
            details[p.name] = err_p
        worst = max(worst, err_p)
    return worst


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Iterable[Parameter]) -> None:
        params = [p for p in params if p.trainable and p.grad is not None]
        for p in params:
            if not np.isfinite(p.grad).all():
                raise NonFiniteError(f"Adam: non-finite gradient for parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in params:
            g = p.grad
            m = self.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[p.name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[p.name] = m
            self.v[p.name] = v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def reset(self, name: str, rows=None) -> None:
        """Drop moment state for a parameter, or for selected rows of it."""
        if name not in self.m:
            return
        if rows is None:
            del self.m[name], self.v[name]
        else:
            self.m[name][rows] = 0.0
            self.v[name][rows] = 0.0
