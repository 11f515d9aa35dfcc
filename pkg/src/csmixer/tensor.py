"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` when at least one
input requires a gradient. Outside a tape nothing is recorded and results are
plain values::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad  # ndarray of shape (3, 2)

Broadcasting is deliberately absent except for tensor-scalar arithmetic and the
explicit bias/affine operations (``linear``, ``layer_norm``, ``conv2d``).
"""
from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from math import prod
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._is_leaf = True
        return t

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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


@dataclass
class Tape:
    """Ordered record of differentiable operations (one per thread of work)."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        else:  # pragma: no cover - misuse
            raise TapeError("tape exited out of order")

    def record(self, inputs, output, backward) -> None:
        self.nodes.append(Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Replay recorded rules in reverse, accumulating into leaf ``.grad``."""
        if loss.size != 1 or loss.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._is_leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def clear(self) -> None:
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise TapeError("loss is not connected to a tape")
    loss._tape.backward(loss)


def _result(arr: np.ndarray, inputs: Sequence[Tensor], bw) -> Tensor:
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        out._tape = tape
        tape.record(inputs, out, bw)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _result(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())))
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = float(b)
        return _result(a.data * s, (a,), lambda g: (g * s,))
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        return _result(a.data * b.data, (a, b),
                       lambda g: (g * b.data, np.asarray((g * a.data).sum())))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    return _result(_kernels.active.gelu(xd), (x,),
                   lambda g: (_kernels.active.gelu_grad(xd, g),))


def elementwise(op: str, *operands) -> Tensor:
    if op == "add":
        return add(*operands)
    if op == "mul":
        return mul(*operands)
    if op == "gelu":
        (x,) = operands
        return gelu(x)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# contractions
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., p, q] @ b[q, r]``."""
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``b`` of shape (out,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot contract {x.shape} with {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match output width {w.shape[1]}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(xd.shape[:-1] + (wd.shape[1],))
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, bw)


_EINSUM_RE = re.compile(r"^([a-zA-Z]+),([a-zA-Z]+)->([a-zA-Z]*)$")


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand."""
    m = _EINSUM_RE.match(subscripts.replace(" ", ""))
    if not m:
        raise ValueError(f"unsupported einsum spec {subscripts!r}")
    sa, sb, so = m.groups()
    for s in (sa, sb, so):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in {subscripts!r}")
    if not set(sa) <= set(sb) | set(so) or not set(sb) <= set(sa) | set(so):
        raise ValueError(f"einsum {subscripts!r}: every operand index must survive")
    sizes: dict[str, int] = {}
    for sub_, t in ((sa, a), (sb, b)):
        if len(sub_) != t.ndim:
            raise ShapeError(f"einsum {subscripts!r}: operand rank {t.ndim} vs {sub_!r}")
        for ch, n in zip(sub_, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {subscripts!r}: index {ch} has extents {sizes[ch]} and {n}")
    ad, bd = a.data, b.data
    out = np.einsum(f"{sa},{sb}->{so}", ad, bd, optimize=True)

    def bw(g):
        ga = np.einsum(f"{so},{sb}->{sa}", g, bd, optimize=True)
        gb = np.einsum(f"{so},{sa}->{sb}", g, ad, optimize=True)
        return ga, gb

    return _result(np.asarray(out), (a, b), bw)


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {src} -> {shape}: {e}") from None
    return _result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    arrs = [t.data for t in tensors]
    ax = axis % arrs[0].ndim
    for a in arrs[1:]:
        if a.ndim != arrs[0].ndim or any(
                a.shape[i] != arrs[0].shape[i] for i in range(a.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([a.shape[ax] for a in arrs])[:-1]
    return _result(np.concatenate(arrs, axis=ax), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=ax)))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.full(src, float(g)),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = np.expand_dims(g, tuple(a % len(src) for a in axes))
        return (np.broadcast_to(gg, src).copy(),)

    return _result(out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = prod(x.shape[a] for a in axes)
    return mul(sum(x, axis), 1.0 / n)


# --------------------------------------------------------------------------
# rearrange
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\(([^()]*)\)|([A-Za-z_][A-Za-z0-9_]*)")


def _parse_side(side: str) -> list[list[str]]:
    groups: list[list[str]] = []
    pos = 0
    side = side.strip()
    while pos < len(side):
        if side[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(side, pos)
        if not m:
            raise ValueError(f"bad rearrange pattern near {side[pos:]!r}")
        if m.group(1) is not None:
            names = m.group(1).split()
            if not names:
                raise ValueError("empty group in rearrange pattern")
            groups.append(names)
        else:
            groups.append([m.group(2)])
        pos = m.end()
    return groups


@dataclass(frozen=True)
class RearrangeSpec:
    """Parsed ``"(a b) c -> a (b c)"`` pattern: a pure axis regrouping."""

    left: tuple[tuple[str, ...], ...]
    right: tuple[tuple[str, ...], ...]

    @classmethod
    def parse(cls, pattern: str) -> "RearrangeSpec":
        if pattern.count("->") != 1:
            raise ValueError(f"pattern needs exactly one '->': {pattern!r}")
        lhs, rhs = pattern.split("->")
        left = tuple(tuple(g) for g in _parse_side(lhs))
        right = tuple(tuple(g) for g in _parse_side(rhs))
        lnames = [n for g in left for n in g]
        rnames = [n for g in right for n in g]
        if len(set(lnames)) != len(lnames) or sorted(lnames) != sorted(rnames):
            raise ValueError(f"pattern sides must use the same axes once each: {pattern!r}")
        return cls(left, right)

    def inverse(self) -> "RearrangeSpec":
        return RearrangeSpec(self.right, self.left)

    def axis_sizes(self, shape, sizes: dict[str, int]) -> dict[str, int]:
        if len(shape) != len(self.left):
            raise ShapeError(f"rearrange: input rank {len(shape)} vs pattern rank {len(self.left)}")
        out: dict[str, int] = {}
        for group, extent in zip(self.left, shape):
            known = [n for n in group if n in sizes]
            unknown = [n for n in group if n not in sizes]
            if len(unknown) > 1:
                raise ValueError(f"rearrange: cannot infer sizes of {unknown}")
            k = prod(sizes[n] for n in known)
            if unknown:
                if k == 0 or extent % k:
                    raise ShapeError(f"rearrange: extent {extent} not divisible by {k} for group {group}")
                out[unknown[0]] = extent // k
            elif k != extent:
                raise ShapeError(f"rearrange: group {group} has size {k} but extent is {extent}")
            for n in known:
                out[n] = sizes[n]
        return out

    def apply(self, arr: np.ndarray, sizes: dict[str, int]) -> tuple[np.ndarray, dict[str, int]]:
        ax = self.axis_sizes(arr.shape, sizes)
        lnames = [n for g in self.left for n in g]
        rnames = [n for g in self.right for n in g]
        elem = arr.reshape([ax[n] for n in lnames])
        perm = [lnames.index(n) for n in rnames]
        out = elem.transpose(perm).reshape([prod(ax[n] for n in g) for g in self.right])
        return np.ascontiguousarray(out), ax


def rearrange(x: Tensor, pattern, **sizes: int) -> Tensor:
    spec = pattern if isinstance(pattern, RearrangeSpec) else RearrangeSpec.parse(pattern)
    out, ax = spec.apply(x.data, sizes)
    inv = spec.inverse()
    return _result(out, (x,), lambda g: (inv.apply(g, ax)[0],))


# --------------------------------------------------------------------------
# normalization, convolution, softmax
# --------------------------------------------------------------------------

LN_EPS = 1e-6


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {c}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    k = _kernels.active
    y, xhat, rstd = k.layer_norm(x.data, gain.data, bias.data, eps)
    gd = gain.data
    return _result(y, (x, gain, bias), lambda g: _kernels.active.layer_norm_grad(g, xhat, rstd, gd))


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of ``x[(B,) h, w, cin]`` with ``kernel[k, k, cin, cout]``."""
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: kernel must be (k, k, cin, cout), got {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be (h, w, c) or (b, h, w, c), got {x.shape}")
    k, _, cin, cout = kernel.shape
    xd = x.data if batched else x.data[None]
    b, h, w, c = xd.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channels {c} vs kernel {kernel.shape}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {(h + 2 * pad, w + 2 * pad)}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs cout {cout}")
    kern = _kernels.active
    cols = kern.im2col(xd, k, stride, pad)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(b * ho * wo, k * k * cin)
    k2 = kernel.data.reshape(k * k * cin, cout)
    out = cols2 @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)
    if not batched:
        out = out[0]

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = (cols2.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ k2.T).reshape(b, ho, wo, k, k, cin)
        gx = _kernels.active.col2im(gcols, h, w, stride, pad)
        if not batched:
            gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, bw)


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    zd = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(zd)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(s, (z,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(z: Tensor) -> Tensor:
    zd = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zd).sum(axis=-1, keepdims=True))
    out = zd - lse
    s = np.exp(out)
    return _result(out, (z,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def add_trailing(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing axes of ``x`` (an explicit bias add)."""
    nb = b.ndim
    if nb == 0 or nb > x.ndim or x.shape[-nb:] != b.shape:
        raise ShapeError(f"add_trailing: {b.shape} is not a suffix of {x.shape}")
    lead = tuple(range(x.ndim - nb))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))
