"""Dense tensor engine with tape-based reverse-mode differentiation.

Every array in the flow model is a :class:`Tensor`. Operations that touch a
tensor with ``requires_grad`` record a :class:`Node` carrying a global
sequence number; ordering reachable nodes by that number yields the tape, and
``backward`` replays it in reverse.

Broadcasting is deliberately absent except for python scalars, per-channel
bias/affine ops and the explicit :func:`broadcast_to`.
"""
from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Node", "DimensionError", "ContractError",
    "set_profile", "get_profile", "default_dtype", "no_grad", "is_grad_enabled",
    "tensor", "zeros", "ones", "build_tape", "backward",
    "add", "sub", "mul", "neg", "scale", "add_scalar", "absolute", "sum", "mean",
    "reshape", "transpose", "getitem", "concat", "stack", "broadcast_to",
    "pad2d", "conv2d", "matmul", "avg_pool2d", "grid_sample", "bilinear_sample",
    "sigmoid", "tanh", "relu", "softmax", "softmax_lastdim", "detach",
    "normalize", "channel_affine", "unfold3x3",
]

PROFILES = {"test64": np.float64, "fast32": np.float32}


class DimensionError(ValueError):
    """Operand extents do not agree."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


_state = {
    "profile": os.environ.get("FLOW_PROFILE", "test64"),
    "grad_enabled": True,
}
if _state["profile"] not in PROFILES:
    raise ValueError(f"FLOW_PROFILE must be one of {sorted(PROFILES)}, got {_state['profile']!r}")

_seq = itertools.count()


def set_profile(name: str) -> None:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    _state["profile"] = name


def get_profile() -> str:
    return _state["profile"]


def default_dtype():
    return PROFILES[_state["profile"]]


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Node:
    """One recorded operation: its inputs and a closure mapping the output
    gradient to a tuple of input gradients (``None`` where no gradient flows)."""

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _raise_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


# --------------------------------------------------------------------------
# tape


def build_tape(loss: Tensor) -> list[Node]:
    """Nodes reachable from ``loss`` in execution order."""
    seen: dict[int, Node] = {}
    stack = [loss.node] if loss.node is not None else []
    while stack:
        node = stack.pop()
        if node.seq in seen:
            continue
        seen[node.seq] = node
        for t in node.inputs:
            if t.node is not None and t.node.seq not in seen:
                stack.append(t.node)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {loss.node.seq: np.ones_like(loss.data)}
    for node in reversed(tape):
        g_out = grads.pop(node.seq, None)
        if g_out is None:
            continue
        g_in = node.backward_fn(g_out)
        for t, g in zip(node.inputs, g_in):
            if g is None or not t.requires_grad:
                continue
            if t.node is not None:
                k = t.node.seq
                grads[k] = grads[k] + g if k in grads else g
            else:
                g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
                t.grad = g.copy() if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# elementwise and structural ops


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, "add_scalar", (a,), lambda g: (g,))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {old} -> {shape}: {exc}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only, so the backward scatter has no repeats."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (slice, int, np.integer)) or it is Ellipsis or it is None):
            raise TypeError("only basic slicing is supported")
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _result(a.data[idx], "getitem", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors,
                   lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    nd = tensors[0].ndim + 1
    ax = axis % nd
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the backward sums over the broadcast axes."""
    shape = tuple(shape)
    src = a.shape
    if len(src) != len(shape) or any(s != 1 and s != t for s, t in zip(src, shape)):
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {shape} (ranks must match)")
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    return _result(np.broadcast_to(a.data, shape), "broadcast_to", (a,),
                   lambda g: (g.sum(axis=axes, keepdims=True),))


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def pad2d(a: Tensor, padding, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``(ph, pw)``; ``mode`` is ``zero`` or ``edge``."""
    ph, pw = _pair(padding)
    if ph == 0 and pw == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(ph, ph), (pw, pw)]
    H, W = a.shape[-2:]
    if mode == "zero":
        out = np.pad(a.data, widths)

        def bw(g):
            return (g[..., ph:ph + H, pw:pw + W],)
    elif mode == "edge":
        out = np.pad(a.data, widths, mode="edge")

        def bw(g):
            g = g.copy()
            g[..., ph, :] += g[..., :ph, :].sum(axis=-2)
            g[..., ph + H - 1, :] += g[..., ph + H:, :].sum(axis=-2)
            g[..., :, pw] += g[..., :, :pw].sum(axis=-1)
            g[..., :, pw + W - 1] += g[..., :, pw + W:].sum(axis=-1)
            return (g[..., ph:ph + H, pw:pw + W],)
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _result(out, "pad2d", (a,), bw)


# --------------------------------------------------------------------------
# linear kernels


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``kernel[O,C,kh,kw]`` (zero padding)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise DimensionError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({O},)")
    ph, pw = _pair(padding)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo].transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = kernel.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, "conv2d", inputs, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[M,K] x [K,N]``, or batched ``[B,M,K] x [B,K,N]``."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul expects two 2-d or two 3-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
                np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None)

    return _result(ad @ bd, "matmul", (a, b), bw)


def avg_pool2d(a: Tensor, kernel: int) -> Tensor:
    """Non-overlapping mean pooling over the last two axes (stride == kernel)."""
    k = int(kernel)
    H, W = a.shape[-2:]
    if H % k or W % k:
        raise DimensionError(f"avg_pool2d: extents {H}x{W} not divisible by kernel {k}")
    if k == 1:
        return a
    lead = a.shape[:-2]
    out = a.data.reshape(lead + (H // k, k, W // k, k)).mean(axis=(-3, -1))
    inv = 1.0 / (k * k)

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) * inv,)

    return _result(out, "avg_pool2d", (a,), bw)


def grid_sample(field: Tensor, points: Tensor) -> Tensor:
    """Bilinearly sample ``field[M,C,H,W]`` at ``points[M,P,2]`` given as (x, y)
    pixel coordinates; returns ``[M,P,C]``. Neighbours outside the field
    contribute zero."""
    if field.ndim != 4 or points.ndim != 3 or points.shape[-1] != 2 or points.shape[0] != field.shape[0]:
        raise DimensionError(f"grid_sample: field {field.shape} and points {points.shape} disagree")
    M, C, H, W = field.shape
    P = points.shape[1]
    px, py = points.data[..., 0], points.data[..., 1]
    x0, y0 = np.floor(px), np.floor(py)
    fx, fy = px - x0, py - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    m_off = (np.arange(M) * (H * W))[:, None]

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            ax = fx if dx else 1.0 - fx
            ay = fy if dy else 1.0 - fy
            flat = m_off + np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
            corners.append((dx, dy, valid, ax, ay, flat))

    rows = np.tile(np.arange(M * P), 4)
    cols = np.concatenate([c[5].ravel() for c in corners])
    vals = np.concatenate([(c[2] * c[3] * c[4]).ravel() for c in corners]).astype(field.data.dtype)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(M * P, M * H * W))
    fT = field.data.transpose(0, 2, 3, 1).reshape(M * H * W, C)
    out = np.asarray(S @ fT).reshape(M, P, C)

    def bw(g):
        g2 = g.reshape(M * P, C)
        gf = None
        if field.requires_grad:
            gf = np.asarray(S.T @ g2).reshape(M, H, W, C).transpose(0, 3, 1, 2)
        gp = None
        if points.requires_grad:
            gx = np.zeros((M, P), dtype=g.dtype)
            gy = np.zeros((M, P), dtype=g.dtype)
            for dx, dy, valid, ax, ay, flat in corners:
                v = (fT[flat.ravel()].reshape(M, P, C) * g).sum(-1) * valid
                gx += v * (1.0 if dx else -1.0) * ay
                gy += v * ax * (1.0 if dy else -1.0)
            gp = np.stack([gx, gy], axis=-1)
        return gf, gp

    return _result(out, "grid_sample", (field, points), bw)


def bilinear_sample(field: Tensor, points: Tensor) -> Tensor:
    """Sample ``field[C,H,W]`` at ``points[N,2]`` ((x, y) order); returns ``[N,C]``."""
    if field.ndim != 3 or points.ndim != 2:
        raise DimensionError(f"bilinear_sample: field {field.shape}, points {points.shape}")
    out = grid_sample(reshape(field, (1,) + field.shape), reshape(points, (1,) + points.shape))
    return reshape(out, out.shape[1:])


# --------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, "softmax", (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def softmax_lastdim(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


def detach(a: Tensor) -> Tensor:
    """Same values, no gradient path back to ``a``."""
    return Tensor(a.data, requires_grad=False)


# --------------------------------------------------------------------------
# normalisation helpers


def normalize(a: Tensor, axes: Iterable[int], eps: float = 1e-5) -> Tensor:
    """``(a - mean) / sqrt(var + eps)`` with statistics taken over ``axes``."""
    axes = tuple(axes)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xh).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xh * gxm),)

    return _result(xh, "normalize", (a,), bw)


def channel_affine(x: Tensor, weight: Tensor | None, bias: Tensor | None) -> Tensor:
    """Per-channel ``x * weight + bias`` for ``x[B,C,...]``."""
    C = x.shape[1]
    shp = (1, C) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    wd = weight.data.reshape(shp) if weight is not None else None
    out = x.data * wd if wd is not None else x.data
    if bias is not None:
        out = out + bias.data.reshape(shp)
    xd = x.data

    def bw(g):
        gx = g * wd if wd is not None else g
        gw = (g * xd).sum(axis=red) if weight is not None and weight.requires_grad else None
        gb = g.sum(axis=red) if bias is not None and bias.requires_grad else None
        res = [gx]
        if weight is not None:
            res.append(gw)
        if bias is not None:
            res.append(gb)
        return tuple(res)

    inputs = [x] + [t for t in (weight, bias) if t is not None]
    return _result(out, "channel_affine", inputs, bw)


def unfold3x3(x: Tensor, mode: str = "zero") -> Tensor:
    """``[B,C,H,W] -> [B,C,9,H,W]`` of 3x3 neighbourhoods, row-major offsets."""
    H, W = x.shape[-2:]
    xp = pad2d(x, 1, mode=mode)
    views = [xp[:, :, i:i + H, j:j + W] for i in range(3) for j in range(3)]
    return stack(views, axis=2)
