"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation goes through :func:`apply`, which looks the
op kind up in a registry, computes the forward value with numpy and, when any
input requires a gradient, records a node holding a backward closure.
:func:`backward` orders the recorded nodes into a :class:`Tape` and runs them
in reverse.

Gradient contract: each call to :func:`backward` *overwrites* ``grad`` on
every leaf reachable from the loss. Use :func:`zero_grad` to reset
explicitly.

Broadcasting is deliberately narrow: binary elementwise ops accept either
equal shapes or a second operand whose shape equals a trailing slice of the
first (a bias broadcast over leading dimensions). Anything else is a
:class:`ShapeError`; use :func:`expand` to repeat along an axis explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericDomainError(ArithmeticError):
    """A forward value left the finite reals (overflow, log of <= 0, ...)."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording on the current thread (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def dtype_of(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ContractError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def constant(data, like: Tensor | None = None, dtype=None) -> Tensor:
    """Non-differentiable tensor, cast to ``like``'s dtype when given."""
    if like is not None:
        dtype = like.dtype
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: Callable
    seq: int = field(default_factory=lambda: next(_seq))


@dataclass
class Tape:
    """Operations reachable from one output, in recording (topological) order.

    Each entry is ``(output_tensor, node)``.  Node sequence numbers are
    assigned at record time, so sorting by them yields an order where every
    node's inputs precede it.
    """

    nodes: list

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        found = {}
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in found:
                continue
            found[id(node)] = (t, node)
            stack.extend(node.inputs)
        return cls(sorted(found.values(), key=lambda tn: tn[1].seq))

    def leaves(self) -> list:
        seen, out = set(), []
        for _, node in self.nodes:
            for t in node.inputs:
                if t._node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


class _GradBuffer:
    """Accumulates incoming gradients per tensor, copying only when needed."""

    def __init__(self):
        self._bufs: dict = {}

    def add(self, t: Tensor, g: np.ndarray, index=None):
        key = id(t)
        entry = self._bufs.get(key)
        if index is None:
            if entry is None:
                self._bufs[key] = [g, False]
            elif entry[1]:
                entry[0] += g
            else:
                self._bufs[key] = [entry[0] + g, True]
            return
        if entry is None:
            buf = np.zeros(t.shape, dtype=t.dtype)
            self._bufs[key] = entry = [buf, True]
        elif not entry[1]:
            entry[0] = entry[0].copy()
            entry[1] = True
        if _is_basic(index):
            entry[0][index] += g
        else:
            np.add.at(entry[0], index, g)

    def pop(self, t: Tensor):
        entry = self._bufs.pop(id(t), None)
        return None if entry is None else entry[0]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf reachable from a scalar ``loss``.

    Leaf gradients are overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise ContractError("loss is not on the tape (no input requires grad)")
    buf = _GradBuffer()
    buf.add(loss, np.ones_like(loss.data))
    for out, node in reversed(tape.nodes):
        g = buf.pop(out)
        if g is None:
            continue

        def acc(i, grad, index=None, _inputs=node.inputs):
            t = _inputs[i]
            if t.requires_grad:
                buf.add(t, grad, index)

        node.backward(g, acc)
    for leaf in tape.leaves():
        g = buf.pop(leaf)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=leaf.dtype)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# op registry

_OPS: dict = {}


def _register(kind: str):
    def deco(fn):
        _OPS[kind] = fn
        return fn

    return deco


def op_kinds() -> list:
    return sorted(_OPS)


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run ``op_kind`` on ``inputs`` and record it when gradients are needed."""
    try:
        impl = _OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}")
    inputs = tuple(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ContractError(f"{op_kind}: inputs must be Tensors, got {type(t).__name__}")
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ContractError(f"{op_kind}: mixed precisions {sorted(map(str, dtypes))}")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, bwd = impl([t.data for t in inputs], **attrs)
    if not np.all(np.isfinite(value)):
        raise NumericDomainError(f"{op_kind} produced non-finite values")
    out = Tensor(value)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op_kind, inputs, bwd)
    return out


def _trailing(a: np.ndarray, b: np.ndarray, op: str) -> int:
    """Number of leading axes of ``a`` that ``b`` is broadcast over."""
    if a.shape == b.shape:
        return 0
    k = a.ndim - b.ndim
    if k > 0 and a.shape[k:] == b.shape:
        return k
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor bias-compatible")


@_register("add")
def _add(xs):
    a, b = xs
    k = _trailing(a, b, "add")

    def bwd(g, acc):
        acc(0, g)
        acc(1, g.sum(axis=tuple(range(k))) if k else g)

    return a + b, bwd


@_register("sub")
def _sub(xs):
    a, b = xs
    k = _trailing(a, b, "sub")

    def bwd(g, acc):
        acc(0, g)
        acc(1, -(g.sum(axis=tuple(range(k))) if k else g))

    return a - b, bwd


@_register("mul")
def _mul(xs):
    a, b = xs
    k = _trailing(a, b, "mul")

    def bwd(g, acc):
        acc(0, g * b)
        gb = g * a
        acc(1, gb.sum(axis=tuple(range(k))) if k else gb)

    return a * b, bwd


@_register("scale")
def _scale(xs, c: float):
    (a,) = xs

    def bwd(g, acc):
        acc(0, g * c)

    return a * c, bwd


@_register("matmul")
def _matmul(xs):
    a, b = xs
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bwd(g, acc):
        acc(0, g @ b.T)
        acc(1, a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1]))

    return a @ b, bwd


@_register("bmm")
def _bmm(xs):
    a, b = xs
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot batch-multiply {a.shape} by {b.shape}")

    def bwd(g, acc):
        acc(0, g @ b.transpose(0, 2, 1))
        acc(1, a.transpose(0, 2, 1) @ g)

    return a @ b, bwd


@_register("concat")
def _concat(xs, axis: int = -1):
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: {x.shape} does not match {ref.shape} off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bwd(g, acc):
        for i in range(len(xs)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            acc(i, g[tuple(idx)])

    return np.concatenate(xs, axis=ax), bwd


@_register("stack")
def _stack(xs, axis: int = 0):
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"stack: {x.shape} does not match {xs[0].shape}")
    out = np.stack(xs, axis=axis)
    ax = axis % out.ndim

    def bwd(g, acc):
        for i in range(len(xs)):
            acc(i, np.take(g, i, axis=ax))

    return out, bwd


@_register("slice")
def _slice(xs, index):
    (a,) = xs
    out = a[index]

    def bwd(g, acc):
        acc(0, g, index)

    return out, bwd


@_register("reshape")
def _reshape(xs, shape):
    (a,) = xs
    try:
        out = a.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {e}")

    def bwd(g, acc):
        acc(0, g.reshape(a.shape))

    return out, bwd


@_register("transpose")
def _transpose(xs, axes=None):
    (a,) = xs
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def bwd(g, acc):
        acc(0, g.transpose(inv))

    return a.transpose(axes), bwd


@_register("expand")
def _expand(xs, axis: int, n: int):
    (a,) = xs
    out = np.repeat(np.expand_dims(a, axis), n, axis=axis)

    def bwd(g, acc):
        acc(0, g.sum(axis=axis))

    return out, bwd


@_register("tanh")
def _tanh(xs):
    y = np.tanh(xs[0])

    def bwd(g, acc):
        acc(0, g * (1.0 - y * y))

    return y, bwd


def _sigmoid_np(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@_register("sigmoid")
def _sigmoid(xs):
    y = _sigmoid_np(xs[0])

    def bwd(g, acc):
        acc(0, g * y * (1.0 - y))

    return y, bwd


@_register("relu")
def _relu(xs):
    (a,) = xs
    pos = a > 0

    def bwd(g, acc):
        acc(0, g * pos)

    return a * pos, bwd


@_register("exp")
def _exp(xs):
    y = np.exp(xs[0])

    def bwd(g, acc):
        acc(0, g * y)

    return y, bwd


@_register("log")
def _log(xs):
    (a,) = xs
    if np.any(a <= 0):
        raise NumericDomainError("log of a non-positive value")

    def bwd(g, acc):
        acc(0, g / a)

    return np.log(a), bwd


def _lse_np(a, axis, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


@_register("softmax")
def _softmax(xs, axis: int = -1):
    (a,) = xs
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, acc):
        acc(0, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return y, bwd


@_register("log_softmax")
def _log_softmax(xs, axis: int = -1):
    (a,) = xs
    y = a - _lse_np(a, axis, keepdims=True)

    def bwd(g, acc):
        acc(0, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return y, bwd


@_register("reduce_sum")
def _reduce_sum(xs, axis=None):
    (a,) = xs

    def bwd(g, acc):
        if axis is None:
            acc(0, np.broadcast_to(g, a.shape).copy())
        else:
            acc(0, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return np.asarray(a.sum(axis=axis)), bwd


@_register("reduce_logsumexp")
def _reduce_lse(xs, axis=None):
    (a,) = xs
    if axis is None:
        flat = a.reshape(-1)
        out = _lse_np(flat, 0)
        w = np.exp(flat - out).reshape(a.shape)

        def bwd(g, acc):
            acc(0, g * w)

        return np.asarray(out), bwd
    out = _lse_np(a, axis)
    w = np.exp(a - np.expand_dims(out, axis))

    def bwd(g, acc):
        acc(0, np.expand_dims(g, axis) * w)

    return out, bwd


@_register("embedding_lookup")
def _embedding(xs, ids):
    (table,) = xs
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding_lookup: ids outside 0..{table.shape[0] - 1}")

    def bwd(g, acc):
        dt = np.zeros_like(table)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        acc(0, dt)

    return table[ids], bwd


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _padding(p):
    if np.isscalar(p):
        return ((p, p), (p, p))
    p = tuple(p)
    if np.isscalar(p[0]):
        return ((p[0], p[0]), (p[1], p[1]))
    return (tuple(p[0]), tuple(p[1]))


def conv_output_size(size: int, kernel: int, stride: int, pad_before: int = 0, pad_after: int = 0) -> int:
    """Floor-based output length of a convolution or pooling window."""
    return (size + pad_before + pad_after - kernel) // stride + 1


@_register("conv2d")
def _conv2d(xs, stride=1, padding=0):
    """NCHW cross-correlation; inputs are (x, w) or (x, w, bias)."""
    x, w = xs[0], xs[1]
    bias = xs[2] if len(xs) > 2 else None
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {w.shape[0]} output channels")
    sh, sw = _pair(stride)
    (pt, pb), (pl, pr) = _padding(padding)
    n, c, hgt, wid = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(hgt, kh, sh, pt, pb)
    wo = conv_output_size(wid, kw, sw, pl, pr)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # cols: [n, ho, wo, c*kh*kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)
    wmat = w.reshape(o, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]

    def bwd(g, acc):
        gt = g.transpose(0, 2, 3, 1)  # [n, ho, wo, o]
        acc(1, (gt.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(w.shape))
        if bias is not None:
            acc(2, g.sum(axis=(0, 2, 3)))
        dcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        acc(0, dxp[:, :, pt : pt + hgt, pl : pl + wid])

    return np.ascontiguousarray(out), bwd


@_register("maxpool2d")
def _maxpool2d(xs, kernel=2, stride=None):
    (x,) = xs
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, c, hgt, wid = x.shape
    ho, wo = conv_output_size(hgt, kh, sh), conv_output_size(wid, kw, sw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: window {kh}x{kw} does not fit input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g, acc):
        dx = np.zeros_like(x)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g * (arg == k)
        acc(0, dx)

    return out, bwd


@_register("lstm")
def _lstm(xs, reverse: bool = False):
    """Masked LSTM recurrence over a pre-projected input sequence.

    Inputs: ``xproj`` [B, T, 4H] (input projection plus bias), ``w_h``
    [H, 4H], ``mask`` [B, T] (1 for valid frames), ``h0``, ``c0`` [B, H].
    Gate layout along the last axis is (input, forget, output, cell).
    Output is [B, T, 2H]: hidden states then cell states.  At masked frames
    both are zeroed, which lets a reversed scan start cleanly at each
    sequence's last valid frame.
    """
    xproj, w_h, mask, h0, c0 = xs
    bsz, steps, four_h = xproj.shape
    hid = four_h // 4
    if w_h.shape != (hid, four_h) or mask.shape != (bsz, steps) or h0.shape != (bsz, hid) or c0.shape != (bsz, hid):
        raise ShapeError(
            f"lstm: xproj {xproj.shape}, w_h {w_h.shape}, mask {mask.shape}, h0 {h0.shape}, c0 {c0.shape}"
        )
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    out = np.empty((bsz, steps, 2 * hid), dtype=xproj.dtype)
    gates = np.empty((bsz, steps, four_h), dtype=xproj.dtype)
    tanh_c = np.empty((bsz, steps, hid), dtype=xproj.dtype)
    h_prev = np.empty((bsz, steps, hid), dtype=xproj.dtype)
    c_prev = np.empty((bsz, steps, hid), dtype=xproj.dtype)
    h, c = h0, c0
    for t in order:
        z = xproj[:, t] + h @ w_h
        sig = _sigmoid_np(z[:, : 3 * hid])
        g = np.tanh(z[:, 3 * hid :])
        c_new = sig[:, hid : 2 * hid] * c + sig[:, :hid] * g
        tc = np.tanh(c_new)
        h_new = sig[:, 2 * hid :] * tc
        m = mask[:, t : t + 1]
        h_prev[:, t], c_prev[:, t] = h, c
        gates[:, t, : 3 * hid], gates[:, t, 3 * hid :] = sig, g
        tanh_c[:, t] = tc
        h, c = m * h_new, m * c_new
        out[:, t, :hid], out[:, t, hid:] = h, c

    def bwd(gout, acc):
        dz_all = np.zeros_like(gates)
        dh = np.zeros((bsz, hid), dtype=xproj.dtype)
        dc = np.zeros((bsz, hid), dtype=xproj.dtype)
        for t in reversed(order):
            m = mask[:, t : t + 1]
            dh_new = m * (gout[:, t, :hid] + dh)
            dc_new = m * (gout[:, t, hid:] + dc)
            i, f, o = gates[:, t, :hid], gates[:, t, hid : 2 * hid], gates[:, t, 2 * hid : 3 * hid]
            g = gates[:, t, 3 * hid :]
            tc = tanh_c[:, t]
            dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :hid] = dc_new * g * i * (1.0 - i)
            dz[:, hid : 2 * hid] = dc_new * c_prev[:, t] * f * (1.0 - f)
            dz[:, 2 * hid : 3 * hid] = dh_new * tc * o * (1.0 - o)
            dz[:, 3 * hid :] = dc_new * i * (1.0 - g * g)
            dh = dz @ w_h.T
            dc = dc_new * f
        acc(0, dz_all)
        acc(1, h_prev.reshape(-1, hid).T @ dz_all.reshape(-1, four_h))
        acc(3, dh)
        acc(4, dc)

    return out, bwd


# ---------------------------------------------------------------------------
# thin functional wrappers


def add(a, b):
    return apply("add", [a, b])


def sub(a, b):
    return apply("sub", [a, b])


def mul(a, b):
    return apply("mul", [a, b])


def scale(a, c: float):
    return apply("scale", [a], c=c)


def matmul(a, b):
    return apply("matmul", [a, b])


def bmm(a, b):
    return apply("bmm", [a, b])


def concat(xs, axis: int = -1):
    return apply("concat", xs, axis=axis)


def stack(xs, axis: int = 0):
    return apply("stack", xs, axis=axis)


def slice_(a, index):
    return apply("slice", [a], index=index)


def reshape(a, shape):
    return apply("reshape", [a], shape=tuple(shape))


def transpose(a, axes=None):
    return apply("transpose", [a], axes=axes)


def expand(a, axis: int, n: int):
    return apply("expand", [a], axis=axis, n=n)


def tanh(a):
    return apply("tanh", [a])


def sigmoid(a):
    return apply("sigmoid", [a])


def relu(a):
    return apply("relu", [a])


def exp(a):
    return apply("exp", [a])


def log(a):
    return apply("log", [a])


def softmax(a, axis: int = -1):
    return apply("softmax", [a], axis=axis)


def log_softmax(a, axis: int = -1):
    return apply("log_softmax", [a], axis=axis)


def reduce_sum(a, axis=None):
    return apply("reduce_sum", [a], axis=axis)


def reduce_logsumexp(a, axis=None):
    return apply("reduce_logsumexp", [a], axis=axis)


def embedding_lookup(table, ids):
    return apply("embedding_lookup", [table], ids=ids)


def conv2d(x, w, bias=None, stride=1, padding=0):
    inputs = [x, w] if bias is None else [x, w, bias]
    return apply("conv2d", inputs, stride=stride, padding=padding)


def maxpool2d(x, kernel=2, stride=None):
    return apply("maxpool2d", [x], kernel=kernel, stride=stride)


def lstm(xproj, w_h, mask, h0, c0, reverse: bool = False):
    return apply("lstm", [xproj, w_h, mask, h0, c0], reverse=reverse)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5, coords=None, stencil: int = 2) -> float:
    """Largest relative gap between the tape gradient of ``f`` and central differences.

    ``coords`` optionally restricts the comparison to a subset of flat
    indices (useful for large parameter tensors). ``stencil=4`` uses the
    fourth-order five-point formula, which tolerates a larger ``eps`` and so
    keeps roundoff down on coordinates whose gradient is small next to ``f``.
    """
    if stencil not in (2, 4):
        raise ContractError(f"stencil must be 2 or 4, got {stencil}")
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64), requires_grad=True)
    loss = f(x)
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericDomainError("f(point) is not finite")
    backward(loss)
    analytic = x.grad.reshape(-1)
    base = x.data.reshape(-1).copy()
    idx = range(base.size) if coords is None else coords

    def at(i, step):
        xp = base.copy()
        xp[i] += step
        return f(Tensor(xp.reshape(x.shape))).item()

    worst = 0.0
    with no_grad():
        for i in idx:
            if stencil == 2:
                numeric = (at(i, eps) - at(i, -eps)) / (2.0 * eps)
            else:
                numeric = (8.0 * (at(i, eps) - at(i, -eps)) - (at(i, 2 * eps) - at(i, -2 * eps))) / (12.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def directional_check(f: Callable[[Tensor], Tensor], point, directions: int = 3, eps: float = 1e-5,
                      seed: int = 0) -> float:
    """Relative gap between ``<grad f, d>`` and its central difference along random unit directions.

    Unlike the per-coordinate check this is not swamped by roundoff on
    coordinates whose gradient is tiny, so it suits whole parameter tensors.
    """
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64), requires_grad=True)
    loss = f(x)
    if loss.size != 1:
        raise ContractError(f"directional_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    g = x.grad
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for _ in range(directions):
            d = rng.normal(size=x.shape)
            d /= np.linalg.norm(d)
            fp = f(Tensor(x.data + eps * d)).item()
            fm = f(Tensor(x.data - eps * d)).item()
            numeric = (fp - fm) / (2.0 * eps)
            analytic = float(np.sum(g * d))
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return worst
