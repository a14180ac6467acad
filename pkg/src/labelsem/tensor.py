"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable primitive used by the encoders and heads lives in the
``OPS`` registry and is reached through :func:`apply`.  Thin functional
wrappers (``matmul``, ``softmax``, ...) are provided for readability.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class UnknownOpError(KeyError):
    pass


class StaleTapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


_ids = itertools.count()


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.records: list[tuple] = []
        self.generation = 0

    def clear(self):
        self.records.clear()
        self.generation += 1

    def __len__(self):
        return len(self.records)


_tape = Tape()
_grad_enabled = True


def get_tape() -> Tape:
    return _tape


def reset_tape() -> Tape:
    """Start a fresh forward pass; previously recorded outputs become stale."""
    _tape.clear()
    return _tape


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_record", "_generation")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._record = None  # index into the tape; None for leaves
        self._generation = None

    @classmethod
    def _from_op(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = next(_ids)
        t._record = None
        t._generation = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return apply("add", [self, _wrap(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return apply("sub", [self, _wrap(other)])

    def __rsub__(self, other):
        return apply("sub", [_wrap(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply("scale", [self], factor=float(other))
        return apply("mul", [self, _wrap(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return apply("scale", [self], factor=1.0 / float(other))
        return apply("div", [self, _wrap(other)])

    def __neg__(self):
        return apply("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, _wrap(other)])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class GradientMap(dict):
    """Maps leaf ``node_id`` to its gradient array."""

    def of(self, leaf: Tensor) -> np.ndarray:
        g = self.get(leaf.node_id)
        return np.zeros_like(leaf.data) if g is None else g


# ----------------------------------------------------------------------------
# primitive ops
# ----------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _axis(name, x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{name}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


class Op:
    """A primitive: ``forward`` returns (output, ctx); ``backward`` returns input grads."""

    name = ""

    def forward(self, xs, **attrs):
        raise NotImplementedError

    def backward(self, g, ctx, xs, out, **attrs):
        raise NotImplementedError


OPS: dict[str, Op] = {}


def register(cls):
    OPS[cls.name] = cls()
    return cls


@register
class Add(Op):
    name = "add"

    def forward(self, xs):
        a, b = xs
        _check_broadcast(self.name, a, b)
        return a + b, None

    def backward(self, g, ctx, xs, out):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


@register
class Sub(Op):
    name = "sub"

    def forward(self, xs):
        a, b = xs
        _check_broadcast(self.name, a, b)
        return a - b, None

    def backward(self, g, ctx, xs, out):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


@register
class Mul(Op):
    name = "mul"

    def forward(self, xs):
        a, b = xs
        _check_broadcast(self.name, a, b)
        return a * b, None

    def backward(self, g, ctx, xs, out):
        a, b = xs
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


@register
class Div(Op):
    name = "div"

    def forward(self, xs):
        a, b = xs
        _check_broadcast(self.name, a, b)
        return a / b, None

    def backward(self, g, ctx, xs, out):
        a, b = xs
        return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]


@register
class Scale(Op):
    name = "scale"

    def forward(self, xs, factor):
        return xs[0] * factor, None

    def backward(self, g, ctx, xs, out, factor):
        return [g * factor]


@register
class MatMul(Op):
    """(k,)@(k,m), (n,k)@(k,m), (B,n,k)@(B,k,m) or (B,n,k)@(k,m)."""

    name = "matmul"

    def forward(self, xs):
        a, b = xs
        if b.ndim < 2 or (a.ndim < 2 and b.ndim != 2) or b.ndim > max(a.ndim, 2):
            raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
        return np.matmul(a, b), None

    def backward(self, g, ctx, xs, out):
        a, b = xs
        if a.ndim == 1:
            return [b @ g, np.outer(a, g)]
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        if a.ndim == 3 and b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return [ga, gb]


@register
class Transpose(Op):
    """Swap the last two axes."""

    name = "transpose"

    def forward(self, xs):
        if xs[0].ndim < 2:
            raise ShapeError(f"transpose: needs rank >= 2, got {xs[0].shape}")
        return np.swapaxes(xs[0], -1, -2), None

    def backward(self, g, ctx, xs, out):
        return [np.swapaxes(g, -1, -2)]


@register
class Reshape(Op):
    name = "reshape"

    def forward(self, xs, shape):
        x = xs[0]
        shape = tuple(shape)
        if int(np.prod(shape)) != x.size or len(shape) > MAX_RANK:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
        return x.reshape(shape), None

    def backward(self, g, ctx, xs, out, shape):
        return [g.reshape(xs[0].shape)]


@register
class Concat(Op):
    name = "concat"

    def forward(self, xs, axis=-1):
        ax = _axis(self.name, xs[0], axis)
        for x in xs[1:]:
            if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax
            ):
                raise ShapeError(
                    f"concat: shapes {[x.shape for x in xs]} disagree off axis {axis}"
                )
        return np.concatenate(xs, axis=ax), ax

    def backward(self, g, ax, xs, out, axis=-1):
        bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return np.split(g, bounds, axis=ax)


@register
class Slice(Op):
    name = "slice"

    def forward(self, xs, start, stop, axis=-1):
        x = xs[0]
        ax = _axis(self.name, x, axis)
        if not 0 <= start < stop <= x.shape[ax]:
            raise ShapeError(f"slice: [{start}:{stop}] out of range for extent {x.shape[ax]}")
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, stop)
        return x[tuple(idx)], tuple(idx)

    def backward(self, g, idx, xs, out, **attrs):
        gx = np.zeros_like(xs[0])
        gx[idx] = g
        return [gx]


@register
class Take(Op):
    """Gather rows along axis 0 (embedding lookup, pair/triplet indexing)."""

    name = "take"

    def forward(self, xs, indices):
        x = xs[0]
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ShapeError(f"take: index out of range for extent {x.shape[0]}")
        if idx.ndim + x.ndim - 1 > MAX_RANK:
            raise ShapeError(f"take: result rank exceeds {MAX_RANK}")
        return x[idx], idx

    def backward(self, g, idx, xs, out, **attrs):
        gx = np.zeros_like(xs[0])
        np.add.at(gx, idx, g)
        return [gx]


@register
class Repeat(Op):
    """Broadcast-repeat a tensor ``times`` along a new leading axis (the ⊗I product)."""

    name = "repeat"

    def forward(self, xs, times):
        x = xs[0]
        if x.ndim + 1 > MAX_RANK or times < 1:
            raise ShapeError(f"repeat: cannot repeat shape {x.shape} {times} times")
        return np.broadcast_to(x, (times,) + x.shape).copy(), None

    def backward(self, g, ctx, xs, out, times):
        return [g.sum(axis=0)]


@register
class Tanh(Op):
    name = "tanh"

    def forward(self, xs):
        return np.tanh(xs[0]), None

    def backward(self, g, ctx, xs, out):
        return [g * (1.0 - out * out)]


@register
class Relu(Op):
    name = "relu"

    def forward(self, xs):
        return np.maximum(xs[0], 0.0), None

    def backward(self, g, ctx, xs, out):
        return [g * (xs[0] > 0)]


@register
class Exp(Op):
    name = "exp"

    def forward(self, xs):
        return np.exp(xs[0]), None

    def backward(self, g, ctx, xs, out):
        return [g * out]


@register
class Log(Op):
    name = "log"

    def forward(self, xs, floor=0.0):
        x = xs[0]
        if floor <= 0.0 and np.any(x <= 0):
            raise ValueError("log: non-positive input without a floor")
        return np.log(np.maximum(x, floor) if floor > 0 else x), None

    def backward(self, g, ctx, xs, out, floor=0.0):
        x = xs[0]
        return [np.where(x > floor, g / np.maximum(x, floor if floor > 0 else 1e-300), 0.0)]


def _masked_logits(x, mask, axis):
    if mask is None:
        return x
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if np.any(~m.any(axis=axis)):
        raise ShapeError("softmax: every position along the axis is masked")
    return np.where(m, x, -np.inf)


@register
class Softmax(Op):
    """Softmax along ``axis``; masked-out entries get probability exactly 0."""

    name = "softmax"

    def forward(self, xs, axis=-1, mask=None):
        x = xs[0]
        ax = _axis(self.name, x, axis)
        z = _masked_logits(x, mask, ax)
        e = np.exp(z - z.max(axis=ax, keepdims=True))
        return e / e.sum(axis=ax, keepdims=True), ax

    def backward(self, g, ax, xs, out, **attrs):
        return [out * (g - (g * out).sum(axis=ax, keepdims=True))]


@register
class LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, xs, axis=-1, mask=None):
        x = xs[0]
        ax = _axis(self.name, x, axis)
        z = _masked_logits(x, mask, ax)
        s = z - z.max(axis=ax, keepdims=True)
        out = s - np.log(np.exp(s).sum(axis=ax, keepdims=True))
        # masked entries are -inf; keep them out of downstream arithmetic
        return np.where(np.isfinite(out), out, 0.0), (ax, np.isfinite(out))

    def backward(self, g, ctx, xs, out, **attrs):
        ax, live = ctx
        p = np.where(live, np.exp(out), 0.0)
        g = np.where(live, g, 0.0)
        return [g - p * g.sum(axis=ax, keepdims=True)]


@register
class Sum(Op):
    name = "sum"

    def forward(self, xs, axis=None, keepdims=False):
        x = xs[0]
        if axis is not None:
            _axis(self.name, x, axis)
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), None

    def backward(self, g, ctx, xs, out, axis=None, keepdims=False):
        x = xs[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, x.shape).copy()]


@register
class Mean(Op):
    name = "mean"

    def forward(self, xs, axis=None, keepdims=False):
        x = xs[0]
        if axis is not None:
            _axis(self.name, x, axis)
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None

    def backward(self, g, ctx, xs, out, axis=None, keepdims=False):
        x = xs[0]
        n = x.size if axis is None else x.shape[axis]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / n, x.shape).copy()]


def _pool_mask(name, x, mask):
    """Mask over all axes but the last, broadcast over features."""
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"{name}: mask shape {m.shape} does not match {x.shape[:-1]}")
    if np.any(~m.any(axis=-1)):
        raise ShapeError(f"{name}: a sequence has no unmasked positions")
    return m[..., None]


@register
class MaxPool(Op):
    """Max over the position axis (second to last), ignoring masked positions."""

    name = "max_pool"

    def forward(self, xs, mask=None):
        x = xs[0]
        if x.ndim < 2:
            raise ShapeError(f"max_pool: needs rank >= 2, got {x.shape}")
        m = _pool_mask(self.name, x, mask)
        z = x if m is None else np.where(m, x, -np.inf)
        arg = z.argmax(axis=-2)
        return np.take_along_axis(x, arg[..., None, :], axis=-2)[..., 0, :], arg

    def backward(self, g, arg, xs, out, **attrs):
        gx = np.zeros_like(xs[0])
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=-2)
        return [gx]


@register
class AvgPool(Op):
    """Mean over the position axis (second to last), counting only unmasked positions."""

    name = "avg_pool"

    def forward(self, xs, mask=None):
        x = xs[0]
        if x.ndim < 2:
            raise ShapeError(f"avg_pool: needs rank >= 2, got {x.shape}")
        m = _pool_mask(self.name, x, mask)
        if m is None:
            w = np.full(x.shape[:-1] + (1,), 1.0 / x.shape[-2])
        else:
            w = m / m.sum(axis=-2, keepdims=True)
        return (x * w).sum(axis=-2), w

    def backward(self, g, w, xs, out, **attrs):
        return [g[..., None, :] * w]


def _conv_pads(width, padding):
    if padding == "same":
        return (width - 1) // 2, width // 2
    if padding == "valid":
        return 0, 0
    raise ValueError(f"conv1d: unknown padding {padding!r}")


@register
class Conv1d(Op):
    """Convolution over positions. x: (n, d_in) or (B, n, d_in); w: (width, d_in, d_out)."""

    name = "conv1d"

    def forward(self, xs, padding="same"):
        x, w = xs
        if w.ndim != 3 or x.ndim not in (2, 3) or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
        width = w.shape[0]
        if width < 1:
            raise ShapeError("conv1d: kernel width must be >= 1")
        lo, hi = _conv_pads(width, padding)
        xb = x if x.ndim == 3 else x[None]
        n = xb.shape[1]
        n_out = n + lo + hi - width + 1
        if n_out < 1:
            raise ShapeError(f"conv1d: sequence length {n} shorter than kernel width {width}")
        xp = np.pad(xb, ((0, 0), (lo, hi), (0, 0)))
        cols = np.concatenate([xp[:, j:j + n_out] for j in range(width)], axis=-1)
        out = cols @ w.reshape(-1, w.shape[2])
        return (out if x.ndim == 3 else out[0]), (cols, lo, n_out)

    def backward(self, g, ctx, xs, out, padding="same"):
        x, w = xs
        cols, lo, n_out = ctx
        width, d_in, d_out = w.shape
        gb = g if g.ndim == 3 else g[None]
        gw = (cols.reshape(-1, cols.shape[-1]).T @ gb.reshape(-1, d_out)).reshape(w.shape)
        gcols = gb @ w.reshape(-1, d_out).T
        n = x.shape[-2]
        gxp = np.zeros((gb.shape[0], n_out + width - 1, d_in))
        for j in range(width):
            gxp[:, j:j + n_out] += gcols[..., j * d_in:(j + 1) * d_in]
        gx = gxp[:, lo:lo + n]
        return [gx if x.ndim == 3 else gx[0], gw]


@register
class LayerNorm(Op):
    """Normalise the last axis to zero mean and unit variance (no affine part)."""

    name = "layer_norm"

    def forward(self, xs, eps=1e-5):
        x = xs[0]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return xc * inv, inv

    def backward(self, g, inv, xs, out, eps=1e-5):
        d = out.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - out * gy)]


@register
class L2Norm(Op):
    """Euclidean norm along the last axis."""

    name = "l2norm"

    def forward(self, xs):
        return np.sqrt((xs[0] ** 2).sum(axis=-1)), None

    def backward(self, g, ctx, xs, out):
        safe = np.where(out > 0, out, 1.0)
        return [np.where(out[..., None] > 0, xs[0] / safe[..., None], 0.0) * g[..., None]]


@register
class CosineSim(Op):
    """Pairwise cosine similarity matrix between the rows of a (N, d) and b (M, d)."""

    name = "cosine_sim"

    def forward(self, xs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ShapeError(f"cosine_sim: incompatible shapes {a.shape} and {b.shape}")
        na = np.sqrt((a * a).sum(axis=1, keepdims=True))
        nb = np.sqrt((b * b).sum(axis=1, keepdims=True))
        if np.any(na == 0) or np.any(nb == 0):
            raise ValueError("cosine_sim: zero-norm row, cosine similarity undefined")
        an, bn = a / na, b / nb
        return an @ bn.T, (an, bn, na, nb)

    def backward(self, g, ctx, xs, out):
        an, bn, na, nb = ctx
        gan = g @ bn
        gbn = g.T @ an
        ga = (gan - an * (gan * an).sum(axis=1, keepdims=True)) / na
        gb = (gbn - bn * (gbn * bn).sum(axis=1, keepdims=True)) / nb
        return [ga, gb]


@register
class SqDist(Op):
    """Row-wise squared Euclidean distance between equally shaped tensors."""

    name = "sq_dist"

    def forward(self, xs):
        a, b = xs
        if a.shape != b.shape:
            raise ShapeError(f"sq_dist: shapes differ, {a.shape} vs {b.shape}")
        d = a - b
        return (d * d).sum(axis=-1), d

    def backward(self, g, d, xs, out):
        gd = 2.0 * d * g[..., None]
        return [gd, -gd]


@register
class EuclideanDist(Op):
    """Row-wise Euclidean distance; the subgradient at coincident points is 0."""

    name = "euclidean_dist"

    def forward(self, xs):
        a, b = xs
        if a.shape != b.shape:
            raise ShapeError(f"euclidean_dist: shapes differ, {a.shape} vs {b.shape}")
        d = a - b
        return np.sqrt((d * d).sum(axis=-1)), d

    def backward(self, g, d, xs, out):
        safe = np.where(out > 0, out, 1.0)[..., None]
        gd = np.where(out[..., None] > 0, d / safe, 0.0) * g[..., None]
        return [gd, -gd]


# ----------------------------------------------------------------------------
# tape machinery
# ----------------------------------------------------------------------------


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``op_kind`` on ``inputs`` and record it when gradients are needed."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {op_kind!r}") from None
    inputs = [_wrap(x) for x in inputs]
    for x in inputs:
        if x._record is not None and x._generation != _tape.generation:
            raise StaleTapeError(f"{op_kind}: input was produced on a cleared tape")
    arrays = [x.data for x in inputs]
    out_arr, ctx = op.forward(arrays, **attrs)
    out_arr = np.asarray(out_arr, dtype=np.float64)
    if out_arr.ndim > MAX_RANK:
        raise ShapeError(f"{op_kind}: result rank {out_arr.ndim} exceeds {MAX_RANK}")
    out = Tensor._from_op(out_arr)
    if _grad_enabled and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        out._record = len(_tape.records)
        out._generation = _tape.generation
        _tape.records.append((op, inputs, out, ctx, attrs))
    return out


def backward(loss: Tensor) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to every reachable requires-grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = GradientMap()
    if not loss.requires_grad:
        return grads
    if loss.is_leaf:
        grads[loss.node_id] = np.ones_like(loss.data)
        return grads
    if loss._generation != _tape.generation:
        raise StaleTapeError("backward: loss belongs to a cleared tape")
    pending = {loss.node_id: np.ones_like(loss.data)}
    for op, inputs, out, ctx, attrs in reversed(_tape.records[: loss._record + 1]):
        g = pending.pop(out.node_id, None)
        if g is None:
            continue
        in_grads = op.backward(g, ctx, [x.data for x in inputs], out.data, **attrs)
        for x, gx in zip(inputs, in_grads):
            if not x.requires_grad:
                continue
            target = grads if x.is_leaf else pending
            prev = target.get(x.node_id)
            target[x.node_id] = gx if prev is None else prev + gx
    return grads


def grad_check(
    fn: Callable[[], Tensor], leaves: Iterable[Tensor], eps: float = 1e-5
) -> float:
    """Max over leaf entries of |analytic - central difference| / max(1, |central difference|).

    ``fn`` rebuilds the scalar from the current leaf values; leaves are
    perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = list(leaves)
    reset_tape()
    loss = fn()
    again = fn().data
    if not np.array_equal(loss.data, again):
        raise NonDeterministicError("two forward passes disagree")
    grads = backward(loss)
    worst = 0.0
    for leaf in leaves:
        analytic = grads.of(leaf)
        flat = leaf.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        with no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = float(fn().data.reshape(-1)[0])
                flat[k] = orig - eps
                down = float(fn().data.reshape(-1)[0])
                flat[k] = orig
                num = (up - down) / (2.0 * eps)
                worst = max(worst, abs(a_flat[k] - num) / max(1.0, abs(num)))
    return worst


# ----------------------------------------------------------------------------
# functional wrappers
# ----------------------------------------------------------------------------


def add(a, b):
    return apply("add", [a, b])


def sub(a, b):
    return apply("sub", [a, b])


def mul(a, b):
    return apply("mul", [a, b])


def matmul(a, b):
    return apply("matmul", [a, b])


def transpose(x):
    return apply("transpose", [x])


def reshape(x, shape):
    return apply("reshape", [x], shape=tuple(shape))


def concat(xs, axis=-1):
    return apply("concat", list(xs), axis=axis)


def slice_(x, start, stop, axis=-1):
    return apply("slice", [x], start=start, stop=stop, axis=axis)


def take(x, indices):
    return apply("take", [x], indices=np.asarray(indices, dtype=np.int64))


def embedding(table, ids):
    return take(table, ids)


def repeat(x, times):
    return apply("repeat", [x], times=times)


def tanh(x):
    return apply("tanh", [x])


def relu(x):
    return apply("relu", [x])


def exp(x):
    return apply("exp", [x])


def log(x, floor=LOG_FLOOR):
    return apply("log", [x], floor=floor)


def softmax(x, axis=-1, mask=None):
    return apply("softmax", [x], axis=axis, mask=mask)


def log_softmax(x, axis=-1, mask=None):
    return apply("log_softmax", [x], axis=axis, mask=mask)


def sum_(x, axis=None, keepdims=False):
    return apply("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", [x], axis=axis, keepdims=keepdims)


def max_pool(x, mask=None):
    return apply("max_pool", [x], mask=mask)


def avg_pool(x, mask=None):
    return apply("avg_pool", [x], mask=mask)


def conv1d(x, w, padding="same"):
    return apply("conv1d", [x, w], padding=padding)


def layer_norm(x, eps=1e-5):
    return apply("layer_norm", [x], eps=eps)


def l2norm(x):
    return apply("l2norm", [x])


def cosine_sim(a, b):
    return apply("cosine_sim", [a, b])


def sq_dist(a, b):
    return apply("sq_dist", [a, b])


def euclidean_dist(a, b):
    return apply("euclidean_dist", [a, b])


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Batch mean of -log p(true class); the log is floored at ``LOG_FLOOR``."""
    targets = np.asarray(targets, dtype=np.int64)
    n, m = probs.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0]} targets for {n} rows")
    onehot = np.zeros((n, m))
    onehot[np.arange(n), targets] = 1.0
    picked = sum_(mul(probs, onehot), axis=1)
    return -mean(log(picked))
