"""Dense tensor engine with reverse-mode automatic differentiation.

Storage is row-major numpy, float32 for training/inference and float64
for tight gradient checking.  Every op builds a tape entry when (and
only when) some input requires gradients and gradients are globally
enabled; ``backward`` walks the tape once.  Broadcasting is restricted
to scalar-with-tensor, plus a handful of explicit shape ops (``expand``,
``concat``, ``narrow``), so each gradient path stays auditable.

Subgradient conventions: ``absolute`` uses 0 at the origin and ``clamp``
uses 0 at both endpoints; finite-difference tests must avoid those kink
points.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import special

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional real array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
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
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """Detached dtype cast; intended for constants entering a graph."""
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars stay python floats (constants, no tape entry)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub_from_scalar(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor with a hierarchical name and Adam moment buffers."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = None
        self.v = None
        self.step = 0


def _make(data: np.ndarray, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # out-of-place accumulation: closures may hand back shared arrays
    t.grad = g if t.grad is None else t.grad + g


def _coerce_pair(a, b):
    """Validate a binary op's operands: same-shape tensors or tensor+scalar."""
    if not isinstance(a, Tensor):
        raise TypeError("left operand must be a Tensor")
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return b, True
    return float(b), False


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b, is_t = _coerce_pair(a, b)
    if is_t:
        data = a.data + b.data

        def grad_fn(g):
            _accum(a, g)
            _accum(b, g)

        return _make(data, (a, b), grad_fn)
    data = a.data + a.data.dtype.type(b)

    def grad_fn(g):
        _accum(a, g)

    return _make(data, (a,), grad_fn)


def sub(a: Tensor, b) -> Tensor:
    b, is_t = _coerce_pair(a, b)
    if is_t:
        data = a.data - b.data

        def grad_fn(g):
            _accum(a, g)
            _accum(b, -g)

        return _make(data, (a, b), grad_fn)
    data = a.data - a.data.dtype.type(b)

    def grad_fn(g):
        _accum(a, g)

    return _make(data, (a,), grad_fn)


def sub_from_scalar(c, a: Tensor) -> Tensor:
    c = float(c)
    data = a.data.dtype.type(c) - a.data

    def grad_fn(g):
        _accum(a, -g)

    return _make(data, (a,), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    b, is_t = _coerce_pair(a, b)
    if is_t:
        data = a.data * b.data

        def grad_fn(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _make(data, (a, b), grad_fn)
    c = a.data.dtype.type(b)
    data = a.data * c

    def grad_fn(g):
        _accum(a, g * c)

    return _make(data, (a,), grad_fn)


def div(a: Tensor, b) -> Tensor:
    """Elementwise division; raises if the quotient is non-finite."""
    b, is_t = _coerce_pair(a, b)
    if is_t:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
        if not np.isfinite(data).all():
            raise FloatingPointError("division produced non-finite values")

        def grad_fn(g):
            _accum(a, g / b.data)
            _accum(b, -g * data / b.data)

        return _make(data, (a, b), grad_fn)
    c = a.data.dtype.type(b)
    data = a.data / c
    if not np.isfinite(data).all():
        raise FloatingPointError("division produced non-finite values")

    def grad_fn(g):
        _accum(a, g / c)

    return _make(data, (a,), grad_fn)


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        _accum(a, -g)

    return _make(-a.data, (a,), grad_fn)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def grad_fn(g):
        _accum(a, g * sign)

    return _make(np.abs(a.data), (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def grad_fn(g):
        _accum(a, g * data)

    return _make(data, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    data = np.log(a.data)

    def grad_fn(g):
        _accum(a, g / a.data)

    return _make(data, (a,), grad_fn)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def grad_fn(g):
        _accum(a, g * 0.5 / data)

    return _make(data, (a,), grad_fn)


def power(a: Tensor, exponent: float) -> Tensor:
    """a ** exponent for a scalar exponent; caller keeps a > 0 for fractional powers."""
    e = float(exponent)
    data = a.data**e

    def grad_fn(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return _make(data, (a,), grad_fn)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    s = a.data.dtype.type(slope)
    mask = a.data > 0
    data = np.where(mask, a.data, a.data * s)

    def grad_fn(g):
        _accum(a, np.where(mask, g, g * s))

    return _make(data, (a,), grad_fn)


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 strictly inside, 0 at and beyond the bounds."""
    lo_v = -np.inf if lo is None else float(lo)
    hi_v = np.inf if hi is None else float(hi)
    data = np.clip(a.data, lo_v, hi_v)
    mask = (a.data > lo_v) & (a.data < hi_v)

    def grad_fn(g):
        _accum(a, np.where(mask, g, 0.0))

    return _make(data, (a,), grad_fn)


def erf(a: Tensor) -> Tensor:
    data = special.erf(a.data)
    coeff = a.data.dtype.type(2.0 / math.sqrt(math.pi))

    def grad_fn(g):
        _accum(a, g * coeff * np.exp(-a.data * a.data))

    return _make(data, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    data = special.expit(a.data)

    def grad_fn(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), grad_fn)


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(a.data.dtype.type(0), a.data)

    def grad_fn(g):
        _accum(a, g * special.expit(a.data))

    return _make(data, (a,), grad_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    phi = 0.5 * (1.0 + special.erf(x / np.sqrt(x.dtype.type(2))))
    data = x * phi
    pdf_c = x.dtype.type(1.0 / math.sqrt(2.0 * math.pi))

    def grad_fn(g):
        _accum(a, g * (phi + x * pdf_c * np.exp(-0.5 * x * x)))

    return _make(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _sum_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _sum_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape) if a.ndim else g
        _accum(a, np.broadcast_to(gg, a.shape).copy() if a.ndim else gg)

    return _make(data, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _sum_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values (scalar)."""
    sign = np.sign(a.data)
    data = np.abs(a.data).sum()

    def grad_fn(g):
        _accum(a, g * sign)

    return _make(np.asarray(data, dtype=a.dtype), (a,), grad_fn)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm (scalar); subgradient 0 at the origin."""
    data = np.sqrt((a.data * a.data).sum())

    def grad_fn(g):
        if data > 0:
            _accum(a, g * a.data / data)
        else:
            _accum(a, np.zeros_like(a.data))

    return _make(np.asarray(data, dtype=a.dtype), (a,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def grad_fn(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), grad_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(a.data, axes))

    def grad_fn(g):
        _accum(a, np.ascontiguousarray(np.transpose(g, inv)))

    return _make(data, (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accum(t, g[tuple(idx)])

    return _make(data, tuple(tensors), grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(data, (a,), grad_fn)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast to ``shape``; gradient sums over the expanded axes."""
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()
    lead = len(shape) - a.ndim
    expanded = list(range(lead)) + [
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    ]

    def grad_fn(g):
        gg = g.sum(axis=tuple(expanded), keepdims=False) if expanded else g
        _accum(a, gg.reshape(a.shape))

    return _make(data, (a,), grad_fn)


def pad2d(a: Tensor, pads, mode: str = "zero") -> Tensor:
    """Pad the last two axes by (top, bottom, left, right); modes zero|reflect|replicate."""
    pt, pb, pl, pr = pads
    if min(pads) < 0:
        raise ValueError("negative padding")
    H, W = a.shape[-2], a.shape[-1]
    if mode == "zero":
        widths = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
        data = np.pad(a.data, widths)

        def grad_fn(g):
            idx = (Ellipsis, slice(pt, pt + H), slice(pl, pl + W))
            _accum(a, g[idx])

        return _make(data, (a,), grad_fn)
    np_mode = {"reflect": "reflect", "replicate": "edge"}.get(mode)
    if np_mode is None:
        raise ValueError(f"unknown pad mode {mode!r}")
    hmap = np.pad(np.arange(H), (pt, pb), mode=np_mode)
    wmap = np.pad(np.arange(W), (pl, pr), mode=np_mode)
    data = np.ascontiguousarray(a.data[..., hmap[:, None], wmap[None, :]])

    def grad_fn(g):
        lead = a.shape[:-2]
        g2 = g.reshape((-1,) + g.shape[-2:])
        rows = np.zeros((g2.shape[0], H, g.shape[-1]), dtype=g.dtype)
        for i, src in enumerate(hmap):
            rows[:, src, :] += g2[:, i, :]
        out = np.zeros((g2.shape[0], H, W), dtype=g.dtype)
        for j, src in enumerate(wmap):
            out[:, :, src] += rows[:, :, j]
        _accum(a, out.reshape(lead + (H, W)))

    return _make(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise TypeError("matmul requires two tensors")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have >= 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dims disagree: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batch dims disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def grad_fn(g):
        _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.ndim == 2 and a.ndim > 2:
            k = a.shape[-1]
            n = g.shape[-1]
            _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
        else:
            db = np.matmul(a.data.swapaxes(-1, -2), g)
            _accum(b, db)

    return _make(data, (a, b), grad_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(a, dx)

    return _make(data, (a, gain, bias), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution kernels (shared by forward and adjoint ops)


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + H, padding : padding + W] = x
    return xp


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Unfold padded NCHW input into a (C*kh*kw, N*Ho*Wo) matrix."""
    N, C = xp.shape[0], xp.shape[1]
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    return np.ascontiguousarray(v.transpose(1, 4, 5, 0, 2, 3)).reshape(
        C * kh * kw, N * Ho * Wo
    )


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = _conv_out_size(H, kh, stride, padding)
    Wo = _conv_out_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"non-positive conv output size for input {x.shape}")
    cols = _im2col(_pad_nchw(x, padding), kh, kw, stride, Ho, Wo)
    out = w.reshape(O, -1) @ cols
    return np.ascontiguousarray(out.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3))


def _conv_input_grad(
    g: np.ndarray, w: np.ndarray, stride: int, padding: int, in_hw
) -> np.ndarray:
    """Adjoint of _conv_forward w.r.t. its input; also the transposed-conv forward."""
    N, O, Ho, Wo = g.shape
    _, C, kh, kw = w.shape
    H, W = in_hw
    g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
    dcols = (w.reshape(O, -1).T @ g_mat).reshape(C, kh, kw, N, Ho, Wo)
    # scatter-add columns back; channel-major scratch keeps the per-tap adds strided
    xp = np.zeros((C, N, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                :, i, j
            ]
    xp = xp[:, :, padding : padding + H, padding : padding + W]
    return np.ascontiguousarray(xp.transpose(1, 0, 2, 3))


def _conv_weight_grad(
    x: np.ndarray, g: np.ndarray, stride: int, padding: int, w_shape
) -> np.ndarray:
    N, C, H, W = x.shape
    O, Ho, Wo = g.shape[1], g.shape[2], g.shape[3]
    _, _, kh, kw = w_shape
    cols = _im2col(_pad_nchw(x, padding), kh, kw, stride, Ho, Wo)
    g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
    return (g_mat @ cols.T).reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with OCkk weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OCkk weight")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs weight {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError("bias must be (out_channels,)")
    data = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        data = data + b.data[None, :, None, None]
    in_hw = (x.shape[2], x.shape[3])
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        _accum(x, _conv_input_grad(g, w.data, stride, padding, in_hw))
        _accum(w, _conv_weight_grad(x.data, g, stride, padding, w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(data, parents, grad_fn)


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution; adjoint of conv2d with the same (A,B,kh,kw) weight.

    Input carries A channels, output B channels; the output spatial size is
    (H-1)*stride - 2*padding + k.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv_transpose2d expects NCHW input and 4-d weight")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs weight {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError("bias must be (out_channels,)")
    kh, kw = w.shape[2], w.shape[3]
    Ho = (x.shape[2] - 1) * stride - 2 * padding + kh
    Wo = (x.shape[3] - 1) * stride - 2 * padding + kw
    if Ho <= 0 or Wo <= 0:
        raise ValueError("non-positive transposed-conv output size")
    data = _conv_input_grad(x.data, w.data, stride, padding, (Ho, Wo))
    if b is not None:
        data = data + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        _accum(x, _conv_forward(g, w.data, stride, padding))
        _accum(w, _conv_weight_grad(g, x.data, stride, padding, w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(data, parents, grad_fn)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """k x k mean pooling with stride k; trailing rows/cols that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ValueError("avg_pool2d expects NCHW")
    N, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho < 1 or Wo < 1:
        raise ValueError("input smaller than pooling window")
    cropped = x.data[:, :, : Ho * k, : Wo * k]
    data = cropped.reshape(N, C, Ho, k, Wo, k).mean(axis=(3, 5))

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        dx[:, :, : Ho * k, : Wo * k] = spread
        _accum(x, dx)

    return _make(data, (x,), grad_fn)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (align-corners-false).

    Gradient-free by design: only applied to non-learned inputs, so the
    result is always detached.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    H, W = x.shape[-2], x.shape[-1]
    data = _bilinear(x.data, H, W, out_h, out_w)
    return Tensor(data)


def _bilinear(arr: np.ndarray, H: int, W: int, out_h: int, out_w: int) -> np.ndarray:
    sy = np.clip((np.arange(out_h) + 0.5) * (H / out_h) - 0.5, 0, H - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (W / out_w) - 0.5, 0, W - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (sy - y0).astype(arr.dtype)
    fx = (sx - x0).astype(arr.dtype)
    top = arr[..., y0[:, None], x0[None, :]] * (1 - fx)[None, :] + arr[
        ..., y0[:, None], x1[None, :]
    ] * fx[None, :]
    bot = arr[..., y1[:, None], x0[None, :]] * (1 - fx)[None, :] + arr[
        ..., y1[:, None], x1[None, :]
    ] * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# ---------------------------------------------------------------------------
# autodiff driver and optimizer


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into .grad along the tape."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


def adam_step(
    params,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update over ``params``; gradients are cleared afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise RuntimeError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.grad
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.grad = None


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
