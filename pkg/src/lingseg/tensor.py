"""Dense tensor core with reverse-mode automatic differentiation.

Values are numpy arrays (float32 or float64). Gradients are recorded on an
explicit :class:`Tape`: while a tape is active, every primitive whose output
requires a gradient appends a node holding its parents and a backward
closure. Execution order is topological by construction, so ``backward``
is a single reverse sweep. Without an active tape the primitives run plain
numpy and nothing is recorded, which is the inference path.

One tape per forward pass; tapes must not be shared across concurrent
passes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, ParameterError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-rank real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    # make `ndarray <op> Tensor` defer to our reflected operators
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; the module-level functions do the real work
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class BatchNormState:
    """Running per-channel statistics for batch normalization."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float64):
        if not 0.0 < momentum < 1.0:
            raise ParameterError(f"batchnorm momentum must be in (0,1), got {momentum}")
        if eps <= 0.0:
            raise ParameterError(f"batchnorm eps must be positive, got {eps}")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = float(momentum)
        self.eps = float(eps)


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], bwd):
        self.out = out
        self.parents = parents
        self.bwd = bwd


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed primitives for one forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; use one tape per forward pass")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._nodes.append(_Node(out, parents, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep: populate ``grad`` of every reachable requires_grad leaf.

    Gradients accumulate into existing ``grad`` buffers, so a leaf used in
    several places (or several backward calls) sums contributions.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    out_index = {id(n.out): i for i, n in enumerate(tape._nodes)}
    if id(loss) not in out_index:
        raise ContractError("loss is not an output recorded on this tape")

    needed: set[int] = set()
    stack = [out_index[id(loss)]]
    while stack:
        i = stack.pop()
        if i in needed:
            continue
        needed.add(i)
        for p in tape._nodes[i].parents:
            j = out_index.get(id(p))
            if j is not None and p.requires_grad:
                stack.append(j)

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for i in sorted(needed, reverse=True):
        node = tape._nodes[i]
        g = flows.pop(id(node.out), None)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.bwd(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in out_index:
                acc = flows.get(id(p))
                flows[id(p)] = pg if acc is None else acc + pg
            else:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += pg


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _from_op(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _from_op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _from_op(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return _from_op(a.data / b.data, (a, b), bwd)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    def bwd(g):
        return (g / x.data,)
    return _from_op(np.log(x.data), (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.sqrt(x.data)
    def bwd(g):
        return (g * (0.5 / out_data),)
    return _from_op(out_data, (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where x was inside."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    def bwd(g):
        return (g * inside,)
    return _from_op(np.clip(x.data, lo, hi), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    def bwd(g):
        return (g.reshape(x.shape),)
    return _from_op(x.data.reshape(shape), (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)
    return _from_op(np.ascontiguousarray(x.data[idx]), (x,), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)
    return _from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of an empty list")
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def bwd(g):
        outs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * p.ndim
            idx[axis] = slice(lo, hi)
            outs.append(g[tuple(idx)])
        return tuple(outs)
    return _from_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate NCHW feature maps along the channel axis, in argument order."""
    if not parts:
        raise DimensionError("concat_channels needs at least one tensor")
    parts = [_as_tensor(p) for p in parts]
    first = parts[0]
    for p in parts:
        if p.ndim != 4:
            raise DimensionError(f"concat_channels expects rank-4 tensors, got {p.shape}")
        if p.shape[0] != first.shape[0] or p.shape[2:] != first.shape[2:]:
            raise DimensionError(
                f"concat_channels mismatch: {p.shape} vs {first.shape} on N/H/W")
    if len(parts) == 1:
        return parts[0]
    return concat(parts, axis=1)


def take_rows(m: Tensor, ids) -> Tensor:
    """Gather rows ``m[ids]``; gradient scatter-adds back (repeats accumulate)."""
    m = _as_tensor(m)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= m.shape[0]):
        raise ContractError(
            f"row index out of range [0, {m.shape[0]}): {ids.min()}..{ids.max()}")
    def bwd(g):
        full = np.zeros_like(m.data)
        np.add.at(full, ids, g)
        return (full,)
    return _from_op(m.data[ids], (m,), bwd)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu / sigmoid / tanh. relu'(0) is taken as 0."""
    x = _as_tensor(x)
    if kind == "relu":
        def bwd(g):
            return (g * (x.data > 0),)
        return _from_op(np.maximum(x.data, 0.0), (x,), bwd)
    if kind == "sigmoid":
        out_data = _sigmoid(x.data)
        def bwd(g):
            return (g * out_data * (1.0 - out_data),)
        return _from_op(out_data, (x,), bwd)
    if kind == "tanh":
        out_data = np.tanh(x.data)
        def bwd(g):
            return (g * (1.0 - out_data * out_data),)
        return _from_op(out_data, (x,), bwd)
    raise ParameterError(f"unknown activation kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


# ---------------------------------------------------------------------------
# affine


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b over the last axis: (..., Din) x (Dout, Din) -> (..., Dout)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[-1]:
        raise DimensionError(
            f"affine input dim {x.shape[-1]} does not match weight dim {w.shape[-1]}")
    data = x.data @ w.data.T
    if b is None:
        def bwd(g):
            gx = g @ w.data
            gw = np.tensordot(g.reshape(-1, g.shape[-1]),
                              x.data.reshape(-1, x.shape[-1]), axes=(0, 0))
            return gx, gw
        return _from_op(data, (x, w), bwd)
    b = _as_tensor(b)
    if b.shape != (w.shape[0],):
        raise DimensionError(f"affine bias shape {b.shape} does not match ({w.shape[0]},)")
    def bwd(g):
        gx = g @ w.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = np.tensordot(g2, x.data.reshape(-1, x.shape[-1]), axes=(0, 0))
        return gx, gw, g2.sum(axis=0)
    return _from_op(data + b.data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# convolution primitives (im2col / col2im based)


def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold NCHW into (N, C*kh*kw, OH*OW) patches."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, hp, wp = x.shape
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into NCHW."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        he = i + stride * (oh - 1) + 1
        for j in range(kw):
            we = j + stride * (ow - 1) + 1
            dxp[:, :, i:he:stride, j:we:stride] += d6[:, :, i, j]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride: int, pad: int):
    cout = k.shape[0]
    cols, oh, ow = _im2col(x, k.shape[2], k.shape[3], stride, pad)
    out = np.matmul(k.reshape(cout, -1), cols)
    return out.reshape(x.shape[0], cout, oh, ow), cols, oh, ow


def _conv_bwd_x(dy: np.ndarray, k: np.ndarray, stride: int, pad: int, x_shape):
    n, cout = dy.shape[0], dy.shape[1]
    oh, ow = dy.shape[2], dy.shape[3]
    k2 = k.reshape(cout, -1)
    dcols = np.matmul(k2.T, dy.reshape(n, cout, oh * ow))
    return _col2im(dcols, x_shape, k.shape[2], k.shape[3], stride, pad, oh, ow)


def _conv_bwd_k(dy: np.ndarray, cols: np.ndarray, k_shape) -> np.ndarray:
    n, cout = dy.shape[0], dy.shape[1]
    dk = np.tensordot(dy.reshape(n, cout, -1), cols, axes=([0, 2], [0, 2]))
    return dk.reshape(k_shape)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with a shared (Cout,Cin,kh,kw) kernel."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 tensors, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}")
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"conv2d pad must be >= 0, got {pad}")
    data, cols, oh, ow = _conv_fwd(x.data, k.data, stride, pad)
    def bwd(g):
        n, cout = g.shape[0], g.shape[1]
        dx = _conv_bwd_x(g, k.data, stride, pad, x.shape)
        dk = _conv_bwd_k(g, cols, k.shape)
        return dx, dk
    return _from_op(data, (x, k), bwd)


def conv_transpose2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0,
                     out_pad: int = 0) -> Tensor:
    """Transposed convolution: the adjoint (gradient-of-conv2d) map.

    ``k`` has shape (Cin, Cout, kh, kw); the output extent is
    (H-1)*stride - 2*pad + kh + out_pad.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(
            f"conv_transpose2d expects rank-4 tensors, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[0]:
        raise DimensionError(
            f"conv_transpose2d channel mismatch: input has {x.shape[1]}, "
            f"kernel expects {k.shape[0]}")
    if stride < 1:
        raise ParameterError(f"conv_transpose2d stride must be >= 1, got {stride}")
    if not 0 <= out_pad < stride:
        raise ParameterError(
            f"conv_transpose2d needs 0 <= out_pad < stride, got out_pad={out_pad} "
            f"stride={stride}")
    n, cin, h, w = x.shape
    cout, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    oh = (h - 1) * stride - 2 * pad + kh + out_pad
    ow = (w - 1) * stride - 2 * pad + kw + out_pad
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv_transpose2d output extent ({oh}x{ow}) is empty")
    data = _conv_bwd_x(x.data, k.data, stride, pad, (n, cout, oh, ow))
    def bwd(g):
        # adjoint of the adjoint is the forward conv; kernel grad swaps roles
        dx, cols, _, _ = _conv_fwd(g, k.data, stride, pad)
        dk = _conv_bwd_k(x.data, cols, k.shape)
        return dx, dk
    return _from_op(data, (x, k), bwd)


def conv2d_per_sample(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolve each sample with its own kernel.

    ``k`` is (N,Cout,Cin,kh,kw) for full kernels or (N,C,kh,kw) for depthwise
    ones; equivalent to conv2d sample by sample, evaluated as one batched
    matmul over im2col patches.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4:
        raise DimensionError(f"conv2d_per_sample expects rank-4 input, got {x.shape}")
    if k.ndim == 4:
        return _depthwise_per_sample(x, k, stride, pad)
    if k.ndim != 5:
        raise DimensionError(f"per-sample kernel must be rank 4 or 5, got {k.shape}")
    if k.shape[0] != x.shape[0] or k.shape[2] != x.shape[1]:
        raise DimensionError(
            f"per-sample kernel {k.shape} incompatible with input {x.shape}")
    n, cout = k.shape[0], k.shape[1]
    kh, kw = k.shape[3], k.shape[4]
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    k2 = k.data.reshape(n, cout, -1)
    data = np.matmul(k2, cols).reshape(n, cout, oh, ow)
    def bwd(g):
        gf = g.reshape(n, cout, -1)
        dk = np.matmul(gf, cols.transpose(0, 2, 1)).reshape(k.shape)
        dcols = np.matmul(k2.transpose(0, 2, 1), gf)
        dx = _col2im(dcols, x.shape, kh, kw, stride, pad, oh, ow)
        return dx, dk
    return _from_op(data, (x, k), bwd)


def _depthwise_per_sample(x: Tensor, k: Tensor, stride: int, pad: int) -> Tensor:
    if k.shape[0] != x.shape[0] or k.shape[1] != x.shape[1]:
        raise DimensionError(
            f"depthwise kernel {k.shape} incompatible with input {x.shape}")
    n, c = x.shape[0], x.shape[1]
    kh, kw = k.shape[2], k.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, kh * kw, -1)
    k2 = k.data.reshape(n, c, 1, kh * kw)
    data = np.matmul(k2, cols).reshape(n, c, oh, ow)
    def bwd(g):
        gf = g.reshape(n, c, 1, -1)
        dk = np.matmul(gf, cols.transpose(0, 1, 3, 2)).reshape(k.shape)
        dcols = np.matmul(k2.transpose(0, 1, 3, 2), gf).reshape(n, c * kh * kw, -1)
        dx = _col2im(dcols, x.shape, kh, kw, stride, pad, oh, ow)
        return dx, dk
    return _from_op(data, (x, k), bwd)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    Training mode normalizes with (biased) batch statistics and updates the
    running stats in ``state``; inference mode uses the running stats.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    g4 = gamma.data[None, :, None, None]

    if training:
        if m < 2:
            raise ContractError(
                "batchnorm2d training requires more than one element per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu[None, :, None, None]) * invstd[None, :, None, None]
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mu
        state.running_var = (1.0 - mom) * state.running_var + mom * var
        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * g4
            t1 = dxhat.sum(axis=axes, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (invstd[None, :, None, None] / m) * (m * dxhat - t1 - xhat * t2)
            return dx, dgamma, dbeta
        return _from_op(xhat * g4 + beta.data[None, :, None, None], (x, gamma, beta), bwd)

    invstd = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean[None, :, None, None]) * invstd[None, :, None, None]
    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = g * g4 * invstd[None, :, None, None]
        return dx, dgamma, dbeta
    return _from_op(xhat * g4 + beta.data[None, :, None, None], (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# dropout


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity at inference. The mask is drawn from ``rng``, so the zero
    pattern is reproducible from the seed.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0,1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    def bwd(g):
        return (g * keep * scale,)
    return _from_op(x.data * keep * scale, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def _named_tensors(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "named_tensors"):
        return [(n, t) for n, t in params.named_tensors() if t.requires_grad]
    if isinstance(params, dict):
        return [(n, t) for n, t in params.items() if t.requires_grad]
    return [(n, t) for n, t in params if t.requires_grad]


def analytic_gradients(f, params) -> dict[str, np.ndarray]:
    """Run f once under a tape and return a copy of every parameter gradient."""
    named = _named_tensors(params)
    for _, t in named:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    grads = {}
    for name, t in named:
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.zero_grad()
    return grads


def fd_compare(f, params, grads: dict[str, np.ndarray], eps: float = 1e-3,
               samples_per_tensor: int = 4, rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``grads`` and central finite differences.

    Samples up to ``samples_per_tensor`` coordinates per tensor. The relative
    error at a coordinate is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name, t in _named_tensors(params):
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= samples_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_tensor, replace=False)
        gflat = grads[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = f().item()
            flat[c] = orig - eps
            f_minus = f().item()
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = gflat[c]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check(f, params, eps: float = 1e-3, samples_per_tensor: int = 4,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of the scalar function ``f`` against
    central finite differences; returns the max relative error over the
    sampled coordinates. ``f`` must be deterministic across calls."""
    grads = analytic_gradients(f, params)
    return fd_compare(f, params, grads, eps=eps,
                      samples_per_tensor=samples_per_tensor, rng=rng)
