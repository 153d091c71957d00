"""Reverse-mode automatic differentiation on dense float64 arrays.

Every operation returns a new :class:`Tensor` holding forward values plus a
closure that knows how to push gradients back to its inputs.  Calling
``backward()`` on a scalar result walks the recorded graph once in reverse
topological order and accumulates gradients into every tensor on the path
that was created with ``requires_grad=True``.

Semantics worth knowing:

* everything is float64; integer input is converted on construction;
* gradients accumulate additively across uses of a tensor and across
  repeated ``backward()`` calls -- call ``zero_grad()`` between steps;
* elementwise ops require identical shapes or a 0-d operand; any other
  mismatch raises :class:`ShapeError`.  Axis expansion is explicit via
  ``repeat`` / ``tile_rows`` / ``add_bias``.
"""

from __future__ import annotations

import os
import struct

import numpy as np


class ShapeError(ValueError):
    pass


def _check_same_shape(a: "Tensor", b: "Tensor") -> None:
    if a.values.shape != b.values.shape and a.values.ndim != 0 and b.values.ndim != 0:
        raise ShapeError(
            f"elementwise op needs matching shapes or a scalar operand, "
            f"got {a.values.shape} vs {b.values.shape}"
        )


def _reduce_to(shape: tuple, g: np.ndarray) -> np.ndarray:
    # Undo the implicit scalar broadcast: a 0-d operand collects the full sum.
    if shape == ():
        return np.asarray(g.sum())
    return g


class Tensor:
    """A node in the computation graph: float64 values plus a grad buffer."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward_fn = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- grad bookkeeping ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every requires_grad tensor.

        ``self`` must hold a single element and must depend on at least one
        tensor with ``requires_grad=True``.
        """
        if self.values.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that requires no grad")
        order = _topo_order(self)
        # Adjoints live in a scratch map so repeated backward() calls re-derive
        # the same contributions instead of compounding stale internal grads.
        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            node._add_grad(g)
            if node._backward_fn is not None:
                for parent, pg in node._backward_fn(g):
                    if not parent.requires_grad:
                        continue
                    buf = adjoint.get(id(parent))
                    if buf is None:
                        adjoint[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
                    else:
                        buf += pg

    # -- arithmetic operators ----------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # -- op methods ---------------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def clamp_min(self, floor: float):
        return clamp_min(self, floor)

    def softmax(self, axis: int):
        return softmax(self, axis)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def repeat(self, n: int, axis: int):
        return repeat(self, n, axis)

    def tile_rows(self, n: int):
        return tile_rows(self, n)

    def take(self, indices, axis: int):
        return take(self, indices, axis)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as a constant Tensor; pass Tensors through unchanged."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    seen.add(id(root))
    while stack:
        node, child = stack[-1]
        if child < len(node._parents):
            stack[-1] = (node, child + 1)
            nxt = node._parents[child]
            if id(nxt) not in seen:
                seen.add(id(nxt))
                stack.append((nxt, 0))
        else:
            stack.pop()
            order.append(node)
    return order


def _from_op(values: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# -- elementwise binary ops ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    av, bv = a.values, b.values

    def bw(g):
        return ((a, _reduce_to(av.shape, g)), (b, _reduce_to(bv.shape, g)))

    return _from_op(av + bv, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    av, bv = a.values, b.values

    def bw(g):
        return ((a, _reduce_to(av.shape, g)), (b, _reduce_to(bv.shape, -g)))

    return _from_op(av - bv, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    av, bv = a.values, b.values

    def bw(g):
        return ((a, _reduce_to(av.shape, g * bv)), (b, _reduce_to(bv.shape, g * av)))

    return _from_op(av * bv, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    av, bv = a.values, b.values

    def bw(g):
        return (
            (a, _reduce_to(av.shape, g / bv)),
            (b, _reduce_to(bv.shape, -g * av / (bv * bv))),
        )

    return _from_op(av / bv, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return ((a, -g),)

    return _from_op(-a.values, (a,), bw)


# -- elementwise unary ops -------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_v = np.exp(a.values)

    def bw(g):
        return ((a, g * out_v),)

    return _from_op(out_v, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values

    def bw(g):
        return ((a, g / av),)

    return _from_op(np.log(av), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0.0

    def bw(g):
        return ((a, g * mask),)

    return _from_op(a.values * mask, (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out_v = np.logaddexp(0.0, av)
    # d softplus / dx == sigmoid(x), written branch-wise to stay finite.
    sig = np.where(av >= 0, 1.0 / (1.0 + np.exp(-np.abs(av))), np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))

    def bw(g):
        return ((a, g * sig),)

    return _from_op(out_v, (a,), bw)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.values > floor

    def bw(g):
        return ((a, g * mask),)

    return _from_op(np.maximum(a.values, floor), (a,), bw)


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((a, s * (g - inner)),)

    return _from_op(s, (a,), bw)


# -- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.values.shape
    out_v = a.values.sum(axis=axes)

    def bw(g):
        gg = g
        for ax in sorted(axes):
            gg = np.expand_dims(gg, ax)
        return ((a, np.broadcast_to(gg, in_shape)),)

    return _from_op(out_v, (a,), bw)


def tensor_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.values.shape
    count = 1
    for ax in axes:
        count *= in_shape[ax]
    out_v = a.values.mean(axis=axes)

    def bw(g):
        gg = g / count
        for ax in sorted(axes):
            gg = np.expand_dims(gg, ax)
        return ((a, np.broadcast_to(gg, in_shape)),)

    return _from_op(out_v, (a,), bw)


# -- linear algebra and shaping --------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return ((a, g @ bv.T), (b, av.T @ g))

    return _from_op(av @ bv, (a, b), bw)


def add_bias(x, b) -> Tensor:
    """Row-broadcast bias add: ``x`` is (n, f), ``b`` is (f,)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias needs (n,f) plus (f,), got {x.shape} and {b.shape}")

    def bw(g):
        return ((x, g), (b, g.sum(axis=0)))

    return _from_op(x.values + b.values[None, :], (x, b), bw)


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    out_v = np.concatenate([t.values for t in ts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            key = tuple(slice(None) for _ in range(axis)) + (slice(lo, hi),)
            outs.append((t, g[key]))
        return tuple(outs)

    return _from_op(out_v, tuple(ts), bw)


def stack_rows(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [as_tensor(t) for t in tensors]
    return concat([t.reshape((1,) + t.shape) for t in ts], axis=0)


def index(a, key) -> Tensor:
    a = as_tensor(a)
    _reject_fancy(key)
    in_shape = a.values.shape
    out_v = a.values[key]

    def bw(g):
        buf = np.zeros(in_shape)
        buf[key] += g
        return ((a, buf),)

    return _from_op(np.array(out_v, copy=True), (a,), bw)


def _reject_fancy(key) -> None:
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if isinstance(p, (list, np.ndarray)):
            raise ShapeError("array indexing is not supported here; use take()")


def take(a, indices, axis: int) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take needs a 1-d index array, got shape {idx.shape}")
    axis = axis % a.ndim
    in_shape = a.values.shape
    out_v = np.take(a.values, idx, axis=axis)

    def bw(g):
        buf = np.zeros(in_shape)
        np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        return ((a, buf),)

    return _from_op(out_v, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.values.shape
    out_v = a.values.reshape(shape)

    def bw(g):
        return ((a, g.reshape(in_shape)),)

    return _from_op(out_v, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return ((a, g.transpose(inv)),)

    return _from_op(a.values.transpose(axes), (a,), bw)


def repeat(a, n: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``n`` times consecutively."""
    a = as_tensor(a)
    axis = axis % a.ndim
    in_shape = a.values.shape
    out_v = np.repeat(a.values, n, axis=axis)
    back_shape = in_shape[: axis + 1] + (n,) + in_shape[axis + 1 :]

    def bw(g):
        return ((a, g.reshape(back_shape).sum(axis=axis + 1)),)

    return _from_op(out_v, (a,), bw)


def tile_rows(a, n: int) -> Tensor:
    """Tile the whole array ``n`` times along axis 0."""
    a = as_tensor(a)
    in_shape = a.values.shape
    reps = (n,) + (1,) * (a.ndim - 1)
    out_v = np.tile(a.values, reps)

    def bw(g):
        return ((a, g.reshape((n,) + in_shape).sum(axis=0)),)

    return _from_op(out_v, (a,), bw)


def dilated_conv1d(x, kernels, bias=None, dilation: int = 1) -> Tensor:
    """Causal dilated convolution along the last axis.

    Args:
        x: input of shape (c_in, t).
        kernels: filter bank of shape (c_out, c_in, kw).
        bias: optional (c_out,) bias.
        dilation: spacing between kernel taps.

    The input is padded on the left with ``(kw - 1) * dilation`` zeros, so
    output step t only sees input steps <= t.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv needs (c_in,t) and (c_out,c_in,kw), got {x.shape} and {kernels.shape}")
    c_in, t = x.shape
    c_out, kc_in, kw = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    pad = (kw - 1) * dilation
    xp = np.concatenate([np.zeros((c_in, pad)), x.values], axis=1)
    out_v = np.zeros((c_out, t))
    for j in range(kw):
        out_v += kernels.values[:, :, j] @ xp[:, j * dilation : j * dilation + t]
    parents: list[Tensor] = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv bias must be ({c_out},), got {bias.shape}")
        out_v += bias.values[:, None]
        parents.append(bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros((c_out, c_in, kw))
        for j in range(kw):
            seg = slice(j * dilation, j * dilation + t)
            gk[:, :, j] = g @ xp[:, seg].T
            gxp[:, seg] += kernels.values[:, :, j].T @ g
        outs = [(x, gxp[:, pad:]), (kernels, gk)]
        if bias is not None:
            outs.append((bias, g.sum(axis=1)))
        return tuple(outs)

    return _from_op(out_v, tuple(parents), bw)


# -- verification helper ---------------------------------------------------


def grad_check(f, xs, eps: float = 1e-4) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    Args:
        f: callable evaluating a scalar Tensor from the current values of
            ``xs`` (it must rebuild its graph on every call).
        xs: a Tensor or sequence of Tensors with ``requires_grad=True``.
        eps: finite-difference step.

    Returns:
        Max over all coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    xs = list(xs)
    for x in xs:
        x.zero_grad()
    out = f()
    out.backward()
    analytic = [np.zeros_like(x.values) if x.grad is None else x.grad.copy() for x in xs]
    worst = 0.0
    for x, an in zip(xs, analytic):
        flat = x.values.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(1.0, abs(an_flat[i]), abs(numeric))
            worst = max(worst, abs(an_flat[i] - numeric) / denom)
    for x in xs:
        x.zero_grad()
    return worst


# -- named-tensor container ------------------------------------------------

_MAGIC = b"NTC1"
_VERSION = 1


def save_tensors(path: str, named: dict) -> None:
    """Write named float64 arrays to ``path`` (atomic: temp file + rename)."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_tensors(path: str) -> dict:
    """Read a container written by :func:`save_tensors`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"not a tensor container: {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported container version {version} in {path}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}q", blob, offset)
        offset += 8 * ndim
        n_items = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n_items, offset=offset).reshape(shape)
        offset += 8 * n_items
        out[name] = np.array(arr, dtype=np.float64)
    return out
