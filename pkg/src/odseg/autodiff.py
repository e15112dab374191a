"""Dense array math with taped reverse-mode differentiation.

Tensors wrap float32 numpy arrays (float64 is accepted so the gradient
verification suite can run at higher precision). Operations executed inside a
``with Tape():`` block are recorded; ``tape.grad(loss, inputs)`` replays the
record backward and returns one gradient per requested input.

Everything is deterministic given the inputs and an explicit rng; a tape must
not be shared across concurrent writers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

# sigmoid outputs are clamped into the open interval (0, 1) so that
# downstream logs stay finite even for extreme logits
_SIGMOID_EPS = 1e-7


class Tensor:
    """N-dimensional real array, optionally participating in differentiation."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
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
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    """Wrap operands; bare numbers adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


class Tape:
    """Ordered record of executed primitives, replayable backward.

    Execution order is a topological order of the data-flow graph, so a single
    reverse sweep with per-tensor accumulators yields exact reverse-mode
    gradients.
    """

    _active = None

    def __init__(self):
        self._ops = []  # (output, parent tensors, backward fn)
        self._watched = set()  # ids of tensors that appeared on the tape

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("tapes cannot be nested")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    def watches(self, tensor):
        return id(tensor) in self._watched

    def grad(self, output, inputs):
        """Gradients of a scalar output w.r.t. each input, as Tensors."""
        if output.size != 1:
            raise ValueError(
                f"grad requires a scalar output, got shape {output.shape}"
            )
        if not self.watches(output):
            raise ValueError("output was not produced on this tape")
        for t in inputs:
            if not self.watches(t):
                raise ValueError(
                    f"input of shape {t.shape} is not on the tape"
                )
        accum = {id(output): np.ones_like(output.data)}
        for out, parents, backward in reversed(self._ops):
            g = accum.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None:
                    continue
                acc = accum.get(id(parent))
                # out-of-place accumulation: backward fns may return views
                # of upstream gradients, which must never be mutated
                accum[id(parent)] = pg if acc is None else acc + pg
        return [
            Tensor(np.array(accum[id(t)]))
            if id(t) in accum
            else Tensor(np.zeros_like(t.data))
            for t in inputs
        ]


def _record(out, parents, backward):
    tape = Tape._active
    if tape is not None and any(
        p.requires_grad or id(p) in tape._watched for p in parents
    ):
        out.requires_grad = True
        tape._ops.append((out, parents, backward))
        tape._watched.update(id(p) for p in parents)
        tape._watched.add(id(out))
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record(out, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def log(a):
    a = as_tensor(a)
    if a.data.size and a.data.min() <= 0.0:
        raise ValueError("log requires strictly positive inputs")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def backward(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), backward)


def sigmoid(a):
    """Numerically stable logistic, clamped into the open interval (0, 1)."""
    a = as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    np.clip(s, _SIGMOID_EPS, 1.0 - _SIGMOID_EPS, out=s)
    out = Tensor(s)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), backward)


def softplus(a):
    """log(1 + exp(x)), stable for large |x|; gradient is the logistic."""
    a = as_tensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape / reduction primitives


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)

    def backward(g):
        if axis is None:
            gb = np.broadcast_to(g, a.shape)
        else:
            if not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, ax)
            gb = np.broadcast_to(g, a.shape)
        return (gb.astype(a.dtype) / count,)

    return _record(out, (a,), backward)


def tmax(a, axis, keepdims=False):
    """Max along one axis; ties route the gradient to the lowest index."""
    a = as_tensor(a)
    out = Tensor(a.data.max(axis=axis, keepdims=keepdims))
    idx = np.argmax(a.data, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gi = np.zeros_like(a.data)
        np.put_along_axis(gi, np.expand_dims(idx, axis), g, axis=axis)
        return (gi,)

    return _record(out, (a,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def softmax(a, axis=-1):
    """Stable softmax: rows sum to 1, computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    sm = np.exp(out.data)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward)


def linear(x, weight, bias=None):
    """x[N,K] @ weight[K,M] (+ bias[M])."""
    x, weight = as_tensor(x), as_tensor(weight)
    y = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
    out = Tensor(y)

    if bias is None:

        def backward(g):
            return g @ weight.data.T, x.data.T @ g

        return _record(out, (x, weight), backward)

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# dense-prediction primitives


def _conv_out_size(size, k, stride, padding, label):
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d: {label}={size} with kernel {k}, stride {stride}, "
            f"padding {padding} does not yield an integral output size"
        )
    return span // stride + 1


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(
            x, ((0, 0), (0, 0), (padding, padding), (padding, padding))
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # N,C,Ho,Wo,kh,kw -> (N*Ho*Wo, C*kh*kw)
    ho, wo = win.shape[2], win.shape[3]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return col.reshape(n * ho * wo, c * kh * kw), ho, wo


def _conv2d_raw(x, w, stride, padding):
    n = x.shape[0]
    cout, cin, kh, kw = w.shape
    col, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = col @ w.reshape(cout, -1).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2), col


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of NCHW input with (Cout,Cin,kh,kw) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and "
            f"{kernel.shape}"
        )
    cout, cin, kh, kw = kernel.shape
    if x.shape[1] != cin:
        raise ValueError(
            f"conv2d: input channels {x.shape[1]} do not match kernel "
            f"channels {cin} (input {x.shape}, kernel {kernel.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    _conv_out_size(x.shape[2], kh, stride, padding, "H")
    _conv_out_size(x.shape[3], kw, stride, padding, "W")

    y, col = _conv2d_raw(x.data, kernel.data, stride, padding)
    out = Tensor(y)

    def backward(g):
        n, _, ho, wo = g.shape
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g_mat.T @ col).reshape(kernel.shape)
        # input gradient: dilate g by the stride, full-correlate with the
        # flipped kernel (in/out channels swapped)
        if stride > 1:
            gd = np.zeros(
                (n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                dtype=g.dtype,
            )
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        wt = np.ascontiguousarray(
            kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        )
        gx, _ = _conv2d_raw(gd, wt, 1, kh - 1 - padding)
        return gx, gw

    return _record(out, (x, kernel), backward)


def _interp_matrix(out_size, in_size, dtype):
    """Dense 1-d bilinear interpolation matrix with half-pixel centers."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def bilinear_upsample(x, factor):
    """Bilinear upsampling by an integer factor, half-pixel centers."""
    x = as_tensor(x)
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"bilinear_upsample: factor must be a positive int, got {factor}")
    factor = int(factor)
    if factor == 1:
        out = Tensor(x.data.copy())
        return _record(out, (x,), lambda g: (g,))
    n, c, h, w = x.shape
    mh = _interp_matrix(h * factor, h, x.data.dtype)
    mw = _interp_matrix(w * factor, w, x.data.dtype)
    flat = x.data.reshape(n * c, h, w)
    y = (mh @ flat) @ mw.T
    out = Tensor(y.reshape(n, c, h * factor, w * factor))

    def backward(g):
        gf = g.reshape(n * c, h * factor, w * factor)
        gx = (mh.T @ gf) @ mw
        return (gx.reshape(n, c, h, w),)

    return _record(out, (x,), backward)


def _adaptive_bounds(in_size, grid):
    starts = (np.arange(grid) * in_size) // grid
    ends = -(-(np.arange(1, grid + 1) * in_size) // grid)  # ceil division
    return starts, ends


def avg_pool_grid(x, grid_h, grid_w):
    """Adaptive average pooling of NCHW input onto a grid_h x grid_w grid."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if grid_h < 1 or grid_w < 1:
        raise ValueError("avg_pool_grid: grid extents must be >= 1")
    ys, ye = _adaptive_bounds(h, grid_h)
    xs, xe = _adaptive_bounds(w, grid_w)
    y = np.empty((n, c, grid_h, grid_w), dtype=x.data.dtype)
    for i in range(grid_h):
        for j in range(grid_w):
            y[:, :, i, j] = x.data[:, :, ys[i] : ye[i], xs[j] : xe[j]].mean(
                axis=(2, 3)
            )
    out = Tensor(y)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(grid_h):
            for j in range(grid_w):
                area = (ye[i] - ys[i]) * (xe[j] - xs[j])
                gx[:, :, ys[i] : ye[i], xs[j] : xe[j]] += (
                    g[:, :, i : i + 1, j : j + 1] / area
                )
        return (gx,)

    return _record(out, (x,), backward)


def replicate_upsample(x, out_h, out_w):
    """Nearest-neighbor expansion to (out_h, out_w) via floor index mapping."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    iy = (np.arange(out_h) * h) // out_h
    ix = (np.arange(out_w) * w) // out_w
    out = Tensor(x.data[:, :, iy][:, :, :, ix])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), iy[:, None], ix[None, :]), g)
        return (gx,)

    return _record(out, (x,), backward)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    train,
    momentum=0.9,
    eps=1e-5,
    update_stats=True,
):
    """Per-channel batch normalization for NCHW input.

    In train mode the batch statistics normalize and (optionally) update the
    running buffers in place: running = momentum * running + (1-m) * batch.
    In eval mode the running buffers normalize and nothing is updated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(
        gamma.data[None, :, None, None] * xhat
        + beta.data[None, :, None, None]
    )

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        if not train:
            gx = g * (gamma.data * inv)[None, :, None, None]
            return gx, ggamma, gbeta
        m = n * h * w
        gxhat = g * gamma.data[None, :, None, None]
        gx = (
            inv[None, :, None, None]
            / m
            * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        )
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


def dropout(x, p, rng):
    """Zero elements with probability p, scale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        out = Tensor(x.data.copy())
        return _record(out, (x,), lambda g: (g,))
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    out = Tensor(x.data * keep * scale)

    def backward(g):
        return (g * keep * scale,)

    return _record(out, (x,), backward)
