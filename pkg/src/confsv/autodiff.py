"""Dense float64 tensors with reverse-mode differentiation.

The computation graph doubles as the tape: every op records its parents and a
closure that maps the output gradient to parent gradients.  `backward` walks
the graph once in reverse topological order, so each node contributes exactly
one gradient pass regardless of fan-out.

Everything runs in float64.  The op set is exactly what the Conformer stack
and its losses need: matmul, 1-D/2-D convolution (grouped/depthwise), softmax,
layer norm, Swish/ReLU/GLU, dropout, reductions, and the indexing ops used by
relative-position attention and CTC.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, float, int, Sequence]


def _as_f64(data: ArrayLike) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A node in the computation graph.

    `data` is a float64 ndarray.  Leaves created with `requires_grad=True`
    accumulate into `grad` during `backward`; interior nodes are transient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _grad_fn: Optional[Callable[[np.ndarray], tuple]] = None,
    ):
        self.data = _as_f64(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fn = _grad_fn

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction -------------------------------------------------

    def _needs_graph(self) -> bool:
        return self.requires_grad or self._grad_fn is not None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    if any(p._needs_graph() for p in parents):
        return Tensor(data, _parents=parents, _grad_fn=grad_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(out, (a,), grad_fn)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), grad_fn)


def power(a: Tensor, p: float) -> Tensor:
    out = np.power(a.data, p)

    def grad_fn(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _make(out, (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), grad_fn)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def grad_fn(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(out, (a,), grad_fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    out = np.clip(a.data, lo, hi)

    def grad_fn(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * inside,)

    return _make(out, (a,), grad_fn)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    out = np.logaddexp(a.data, b.data)

    def grad_fn(g):
        # exp(x - out) is the softmax weight of each operand; safely 0 when
        # x is the -inf-like sentinel.
        ga = _unbroadcast(g * np.exp(a.data - out), a.shape)
        gb = _unbroadcast(g * np.exp(b.data - out), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


# -- reductions ----------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _wrap(1.0 / count))


# -- shape ops -----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), grad_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = a.data.transpose(axes)

    def grad_fn(g):
        if axes is None:
            return (g.transpose(),)
        inv = np.argsort(axes)
        return (g.transpose(inv),)

    return _make(out, (a,), grad_fn)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)

    def grad_fn(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), grad_fn)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(np.array(out, copy=True), (a,), grad_fn)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Index-select along one axis; duplicate indices accumulate on backward."""
    indices = np.asarray(indices)
    out = np.take(a.data, indices, axis=axis)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = indices
        np.add.at(ga, tuple(sl), g)
        return (ga,)

    return _make(out, (a,), grad_fn)


def pad_last(a: Tensor, before: int, after: int, value: float = 0.0) -> Tensor:
    """Constant-pad the final axis."""
    width = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    out = np.pad(a.data, width, constant_values=value)

    def grad_fn(g):
        sl = [slice(None)] * (a.ndim - 1) + [slice(before, before + a.shape[-1])]
        return (g[tuple(sl)],)

    return _make(out, (a,), grad_fn)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather over the last two axes: out[..., i, j] = a[..., rows[i,j], cols[i,j]].

    Used by relative-position attention to fold the (T, 2T-1) score matrix into
    (T, T).  The (rows, cols) pairs must be distinct, which lets the backward
    pass scatter with plain fancy indexing.
    """
    out = a.data[..., rows, cols]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[..., rows, cols] = g
        return (ga,)

    return _make(out, (a,), grad_fn)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rows land on the simplex."""
    if a.ndim == 0 or a.shape[axis % a.ndim] == 0:
        raise DimensionError("softmax: empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis % a.ndim] == 0:
        raise DimensionError("log_softmax: empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), grad_fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1] if a.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: empty feature axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        gxhat = g * gamma.data
        gvar = (gxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        gmu = -(gxhat.sum(axis=-1, keepdims=True)) * inv + gvar * (-2.0 / d) * xc.sum(
            axis=-1, keepdims=True
        )
        ga = gxhat * inv + gvar * (2.0 / d) * xc + gmu / d
        reduce_axes = tuple(range(a.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        gbeta = g.sum(axis=reduce_axes) if reduce_axes else g
        return ga, np.asarray(ggamma), np.asarray(gbeta)

    return _make(out, (a, gamma, beta), grad_fn)


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split `axis` in half, gate the first half with the second."""
    n = a.shape[axis]
    if n % 2 != 0:
        raise DimensionError(f"glu: axis length {n} is odd")
    sl_a = [slice(None)] * a.ndim
    sl_b = [slice(None)] * a.ndim
    sl_a[axis] = slice(0, n // 2)
    sl_b[axis] = slice(n // 2, n)
    half = getitem(a, tuple(sl_a))
    gate = getitem(a, tuple(sl_b))
    return mul(half, sigmoid(gate))


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rng is None (inference) or p == 0."""
    if rng is None or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)

    def grad_fn(g):
        return (g * keep,)

    return _make(a.data * keep, (a,), grad_fn)


# -- convolutions --------------------------------------------------------------


def conv_out_len(n: int, kernel: int, stride: int, padding: int) -> int:
    """Length convention used everywhere: floor((n + 2p - k) / s) + 1."""
    return (n + 2 * padding - kernel) // stride + 1


def _windows_1d(xp: np.ndarray, winlen: int, n_out: int, stride: int) -> np.ndarray:
    """Read-only strided view (..., n_out, winlen) over the last axis."""
    sB = xp.strides
    shape = xp.shape[:-1] + (n_out, winlen)
    strides = sB[:-1] + (sB[-1] * stride, sB[-1])
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """1-D convolution over (B, C, T) with grouped channels.

    weight: (C_out, C_in // groups, K).  Depthwise = groups == C_in.
    Dense (groups = 1) convolutions run as one im2col matmul; depthwise runs
    as a broadcast multiply-sum over the kernel axis.
    """
    B, C, T = x.shape
    Cout, Cg, K = weight.shape
    if C % groups or Cout % groups or Cg != C // groups:
        raise DimensionError("conv1d: channel/group mismatch")
    Tout = conv_out_len(T, K, stride, padding)
    if Tout < 1:
        raise DimensionError(f"conv1d: kernel {K} too long for T={T}, padding={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    win = _windows_1d(xp, K, Tout, stride)  # (B, C, Tout, K)

    depthwise = groups == C and Cg == 1
    if depthwise:
        w = weight.data.reshape(C, K) if Cout == C else None
        if w is None:
            raise DimensionError("depthwise conv1d requires C_out == C_in")
        out = (win * w[None, :, None, :]).sum(axis=-1)
    elif groups == 1:
        cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Tout, C * K)
        wmat = weight.data.reshape(Cout, C * K).T
        out = (cols @ wmat).reshape(B, Tout, Cout).transpose(0, 2, 1)
    else:
        out = np.zeros((B, Cout, Tout))
        og = Cout // groups
        for gi in range(groups):
            wg = weight.data[gi * og : (gi + 1) * og].reshape(og, Cg * K)
            seg = win[:, gi * Cg : (gi + 1) * Cg]
            cols = np.ascontiguousarray(seg.transpose(0, 2, 1, 3)).reshape(B * Tout, Cg * K)
            out[:, gi * og : (gi + 1) * og] = (
                (cols @ wg.T).reshape(B, Tout, og).transpose(0, 2, 1)
            )
    if bias is not None:
        out = out + bias.data[None, :, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _scatter_1d(gwin: np.ndarray) -> np.ndarray:
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, :, k : k + stride * Tout : stride] += gwin[:, :, :, k]
        return gxp[:, :, padding : padding + T]

    def grad_fn(g):
        if depthwise:
            w = weight.data.reshape(C, K)
            gw = (win * g[:, :, :, None]).sum(axis=(0, 2)).reshape(Cout, Cg, K)
            gwin = g[:, :, :, None] * w[None, :, None, :]
        elif groups == 1:
            cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Tout, C * K)
            g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * Tout, Cout)
            gw = (g2.T @ cols).reshape(Cout, Cg, K)
            gwin = (g2 @ weight.data.reshape(Cout, C * K)).reshape(B, Tout, C, K)
            gwin = gwin.transpose(0, 2, 1, 3)
        else:
            og = Cout // groups
            gw = np.zeros_like(weight.data)
            gwin = np.zeros(win.shape)
            for gi in range(groups):
                seg = win[:, gi * Cg : (gi + 1) * Cg]
                cols = np.ascontiguousarray(seg.transpose(0, 2, 1, 3)).reshape(B * Tout, Cg * K)
                g2 = np.ascontiguousarray(
                    g[:, gi * og : (gi + 1) * og].transpose(0, 2, 1)
                ).reshape(B * Tout, og)
                gw[gi * og : (gi + 1) * og] = (g2.T @ cols).reshape(og, Cg, K)
                part = (g2 @ weight.data[gi * og : (gi + 1) * og].reshape(og, Cg * K))
                gwin[:, gi * Cg : (gi + 1) * Cg] = part.reshape(B, Tout, Cg, K).transpose(
                    0, 2, 1, 3
                )
        grads = [_scatter_1d(gwin), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, parents, grad_fn)


def depthwise_conv1d(x: Tensor, kernel: Tensor, padding: int) -> Tensor:
    """Per-channel sliding dot product over (C, T) or (B, C, T)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    C = x.shape[1]
    w = reshape(kernel, (C, 1, kernel.shape[-1]))
    out = conv1d(x, w, None, stride=1, padding=padding, groups=C)
    return reshape(out, out.shape[1:]) if squeeze else out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution over (B, C, H, W); weight (C_out, C_in, KH, KW)."""
    B, C, H, W = x.shape
    Cout, Cin, KH, KW = weight.shape
    if Cin != C:
        raise DimensionError("conv2d: channel mismatch")
    Hout = conv_out_len(H, KH, stride, padding)
    Wout = conv_out_len(W, KW, stride, padding)
    if Hout < 1 or Wout < 1:
        raise DimensionError("conv2d: input too small for kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sB, sC, sH, sW = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, Hout, Wout, KH, KW),
        strides=(sB, sC, sH * stride, sW * stride, sH, sW),
        writeable=False,
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Hout * Wout, C * KH * KW
    )
    wmat = weight.data.reshape(Cout, C * KH * KW)
    out = (cols @ wmat.T).reshape(B, Hout, Wout, Cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Hout * Wout, Cout)
        gw = (g2.T @ cols).reshape(Cout, C, KH, KW)
        gcols = (g2 @ wmat).reshape(B, Hout, Wout, C, KH, KW).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(KH):
            for j in range(KW):
                gxp[:, :, i : i + stride * Hout : stride, j : j + stride * Wout : stride] += (
                    gcols[:, :, :, :, i, j]
                )
        gx = gxp[:, :, padding : padding + H, padding : padding + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, grad_fn)


# -- backward ------------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the graph reachable from `root`."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad leaf reachable from `loss`.

    The loss must be scalar.  Interior nodes hold transient gradients during
    the sweep; leaf data is never touched.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p._needs_graph():
                continue
            pg = np.asarray(pg)
            if pg.shape != p.data.shape:
                pg = pg.reshape(p.data.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
