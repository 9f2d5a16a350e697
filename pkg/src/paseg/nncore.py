"""A small reverse-mode autodiff engine on numpy arrays.

Only the operations the two segmentation networks need are provided. Arrays
are NCHW. Every op returns a new :class:`Tensor` carrying a closure that
pushes the output gradient back to its inputs; :meth:`Tensor.backward` runs
those closures in reverse topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import PasegError, decode_tensor, encode_tensor


class ShapeError(PasegError, ValueError):
    pass


_checked = False


def set_checked(enabled: bool) -> None:
    """In checked mode every op verifies that its output is finite."""
    global _checked
    _checked = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None

    # elementwise arithmetic: same-shape tensors or python scalars only
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def op_result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op's output; ``backward(g)`` must accumulate into the parents."""
    if _checked and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in checked mode")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --- generic elementwise and reductions -------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

        def backward(g):
            a._accumulate(g)
            b._accumulate(g)

        return op_result(a.data + b.data, (a, b), backward)
    return op_result(a.data + b, (a,), lambda g: a._accumulate(g))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

        def backward(g):
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)

        return op_result(a.data * b.data, (a, b), backward)
    return op_result(a.data * b, (a,), lambda g: a._accumulate(g * b))


def neg(a: Tensor) -> Tensor:
    return op_result(-a.data, (a,), lambda g: a._accumulate(-g))


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return op_result(a.data ** exponent, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return op_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return op_result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


# --- network ops --------------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects x (B,C,H,W) and w (K,C,3,3), got {x.shape}, {w.shape}")
    bsz, c, h, wd = x.shape
    k = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {w.shape[1]}")
    if b.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({k},)")
    wmat = w.data.reshape(k, c * 9)
    out = _im2col3(x.data) @ wmat.T
    out += b.data
    out = out.reshape(bsz, h, wd, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        if w.requires_grad:
            # recomputed rather than kept: the column buffer is 9x the input
            w._accumulate((g2.T @ _im2col3(x.data)).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(bsz, h, wd, c, 3, 3)
            dxp = np.zeros((bsz, c, h + 2, wd + 2), dtype=x.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, 1:-1, 1:-1])

    return op_result(np.ascontiguousarray(out), (x, w, b), backward)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling; the gradient goes to the first maximum in row-major window order."""
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(bsz, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=x.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gx.reshape(bsz, c, h, w))

    return op_result(out, (x,), backward)


def _conv_s2_data(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    # y (B, K, 2H, 2W), w (C, K, 2, 2) -> (B, C, H, W)
    bsz, k, h2, w2 = y.shape
    blocks = y.reshape(bsz, k, h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 4, 1, 3, 5)
    out = blocks.reshape(-1, k * 4) @ w.reshape(w.shape[0], k * 4).T
    return out.reshape(bsz, h2 // 2, w2 // 2, w.shape[0]).transpose(0, 3, 1, 2)


def conv_s2(y, w) -> np.ndarray:
    """Stride-2 2x2 convolution without bias (the linear adjoint of :func:`conv_transpose2`).

    ``w`` uses the transpose-convolution layout (C_in, K_out, 2, 2); the
    result has C_in channels.
    """
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    if y.shape[2] % 2 or y.shape[3] % 2:
        raise ShapeError("conv_s2 needs even spatial dims")
    return _conv_s2_data(y, w)


def conv_transpose2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2x2 transpose convolution with stride 2: (B, C, H, W) -> (B, K, 2H, 2W).

    ``w`` is laid out (C, K, 2, 2).
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2 expects w (C,K,2,2), got {w.shape}")
    bsz, c, h, wd = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"conv_transpose2: input has {c} channels, kernel expects {w.shape[0]}")
    k = w.shape[1]
    if b.shape != (k,):
        raise ShapeError(f"conv_transpose2: bias shape {b.shape}, expected ({k},)")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = w.data.reshape(c, k * 4)
    out = (xm @ wmat).reshape(bsz, h, wd, k, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(bsz, k, 2 * h, 2 * wd) + b.data[None, :, None, None]

    def backward(g):
        gb = g.reshape(bsz, k, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, k * 4)
        if w.requires_grad:
            w._accumulate((xm.T @ gb).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate((gb @ wmat.T).reshape(bsz, h, wd, c).transpose(0, 3, 1, 2))

    return op_result(out, (x, w, b), backward)


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    neg_mask = x.data < 0
    out = x.data.copy()
    out[neg_mask] *= alpha

    def backward(g):
        gx = g.copy()
        gx[neg_mask] *= alpha
        x._accumulate(gx)

    return op_result(out, (x,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) during training, identity otherwise."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return op_result(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: incompatible shapes x{x.shape}, w{w.shape}, b{b.shape}")
    out = x.data @ w.data.T + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return op_result(out, (x, w, b), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if (a.shape[0],) + a.shape[2:] != (b.shape[0],) + b.shape[2:]:
        raise ShapeError(f"concat_channels: cannot join {a.shape} and {b.shape}")
    ca = a.shape[1]

    def backward(g):
        a._accumulate(g[:, :ca])
        b._accumulate(g[:, ca:])

    return op_result(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def _softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 (classes) for every batch element and pixel."""
    s = _softmax(x.data, axis=1)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return op_result(s, (x,), backward)


# --- parameters, initialisation, optimiser -----------------------------------

def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Adam:
    """Adam with bias correction. State is keyed by parameter name."""

    def __init__(self, params: Sequence[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        adam_step(self.params, [p.grad for p in self.params], self, self.lr,
                  self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state: Adam, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One Adam update using ``state.m``, ``state.v`` and the already-incremented ``state.t``."""
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if g is None:
            continue
        m, v = state.m[p.name], state.v[p.name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# --- finite-difference checking ----------------------------------------------

def numerical_gradient(f: Callable[[], float], x: np.ndarray, index, step: float = 1e-5) -> float:
    """Central difference of scalar ``f`` with respect to ``x[index]`` (``x`` modified in place)."""
    old = x[index]
    x[index] = old + step
    fp = f()
    x[index] = old - step
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * step)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor_ratio: float = 1e-4,
) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` rebuilds the scalar loss from the current values of ``tensors``
    (float64 recommended). With ``max_entries`` only that many randomly chosen
    entries per tensor are perturbed. Denominators are floored at
    ``floor_ratio`` times the largest analytic gradient, which keeps
    difference-quotient round-off on near-zero entries from dominating.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    scale = max(float(np.abs(g).max()) for g in analytic)
    floor = max(floor_ratio * scale, 1e-12)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = np.arange(t.data.size)
        if max_entries is not None and t.data.size > max_entries:
            flat = rng.choice(t.data.size, size=max_entries, replace=False)
        for fi in flat:
            idx = np.unravel_index(fi, t.shape)
            gn = numerical_gradient(lambda: float(fn().data), t.data, idx, step)
            worst = max(worst, float(relative_error(ga[idx], gn, floor)))
    return worst


# --- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = "PACKPT 1"


def save_checkpoint(path, params: Sequence[Parameter], header: dict) -> None:
    """Text header of ``key=value`` lines, a blank line, then ``name nbytes`` + PATC blob per parameter."""
    lines = [CKPT_MAGIC] + [f"{k}={header[k]}" for k in sorted(header)]
    lines.append(f"params={len(params)}")
    chunks = ["\n".join(lines).encode("utf-8") + b"\n\n"]
    for p in params:
        blob = encode_tensor(p.data)
        chunks.append(f"{p.name} {len(blob)}\n".encode("utf-8"))
        chunks.append(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = open(path, "rb").read()
    head, sep, rest = buf.partition(b"\n\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint header")
    lines = head.decode("utf-8").split("\n")
    if lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header = dict(line.split("=", 1) for line in lines[1:])
    n = int(header.pop("params"))
    arrays, pos = {}, 0
    for _ in range(n):
        nl = rest.index(b"\n", pos)
        name, size = rest[pos:nl].decode("utf-8").rsplit(" ", 1)
        start = nl + 1
        arrays[name] = decode_tensor(rest[start:start + int(size)])
        pos = start + int(size)
    return header, arrays
