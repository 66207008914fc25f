"""Minimal dense-tensor autodiff engine.

Tensors wrap numpy arrays and record, per operation, a closure that
routes the output gradient back to the inputs.  Calling ``backward`` on
a scalar loss walks the recorded graph once in reverse topological
order; gradients accumulate across all downstream uses of a node (and
across repeated backward calls until ``zero_grad``).

Training runs in float32.  The gradient-check harness builds the same
graphs in float64, which every op preserves end to end.

Only the layers the enhancement network needs are provided: conv2d
(im2col based), nearest up-sampling, relu / leaky relu / sigmoid /
softplus, channel concat/slice, global average pooling, per-channel
instance statistics, and elementwise/reduction arithmetic.
"""

import numpy as np

# floor for instance standard deviations; keeps downstream divisions finite
EPS_STAT = 1e-5


class Tensor:
    """N-d array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_pass_grad")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._pass_grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()).item() if self.data.ndim == 0
                     else self.data.item())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # call-local buffer; folded into .grad once per backward() call so
        # repeated backward calls accumulate instead of compounding
        self._pass_grad = g if self._pass_grad is None else self._pass_grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        # iterative post-order; reversed it gives topological order
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self._pass_grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node._pass_grad
            if g is None:
                continue
            node._pass_grad = None
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                node._backward(g)

    # ---- arithmetic -------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, out: -g)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        return _unary(self, lambda a: a ** e,
                      lambda g, a, out: g * e * a ** (e - 1.0))

    # ---- shape ops --------------------------------------------------

    def reshape(self, shape):
        src = self.data.shape
        return _unary(self, lambda a: a.reshape(shape),
                      lambda g, a, out: g.reshape(src))

    def sum(self, axis=None, keepdims=False):
        src = self.data.shape

        def backward(g, a, out):
            if axis is None:
                return np.broadcast_to(g.reshape((1,) * len(src)), src).copy()
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return np.broadcast_to(g, src).copy()

        return _unary(self, lambda a: a.sum(axis=axis, keepdims=keepdims), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[i] for i in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unary(x, forward, backward):
    data = forward(x.data)
    out = _make(data, (x,), None)
    if out.requires_grad:
        def run(g):
            x._accumulate(backward(g, x.data, data))
        out._backward = run
    return out


def _unbroadcast(g, shape):
    # reduce a broadcast gradient back to the original operand shape
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(x, other, forward, backward):
    y = _as_tensor(other, x.dtype)
    data = forward(x.data, y.data)
    out = _make(data, (x, y), None)
    if out.requires_grad:
        def run(g):
            gx, gy = backward(g, x.data, y.data)
            if x.requires_grad:
                x._accumulate(_unbroadcast(gx, x.data.shape))
            if y.requires_grad:
                y._accumulate(_unbroadcast(gy, y.data.shape))
        out._backward = run
    return out


# ---- activations ----------------------------------------------------

def relu(x):
    return _unary(x, lambda a: np.maximum(a, 0),
                  lambda g, a, out: g * (a > 0))


def leaky_relu(x, slope=0.2):
    # the backward keeps g's dtype: where(cond, 1.0, slope) alone would
    # materialize float64 and silently promote every downstream gradient
    return _unary(x, lambda a: np.where(a > 0, a, slope * a),
                  lambda g, a, out: np.where(a > 0, g, g * slope))


def sigmoid(x):
    def forward(a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out

    return _unary(x, forward, lambda g, a, out: g * out * (1.0 - out))


def softplus(x):
    # log(1 + e^x), stable for large |x|
    def forward(a):
        return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))

    def backward(g, a, out):
        s = np.empty_like(a)
        pos = a >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        s[~pos] = ea / (1.0 + ea)
        return g * s

    return _unary(x, forward, backward)


def exp(x):
    return _unary(x, np.exp, lambda g, a, out: g * out)


def log(x):
    return _unary(x, np.log, lambda g, a, out: g / a)


def absolute(x):
    return _unary(x, np.abs, lambda g, a, out: g * np.sign(a))


def sqrt_floored(x, floor):
    """sqrt(max(x, floor)); gradient is zero on the floored region."""
    def forward(a):
        return np.sqrt(np.maximum(a, floor))

    def backward(g, a, out):
        return g * np.where(a > floor, 0.5 / out, 0.0)

    return _unary(x, forward, backward)


# ---- structural ops -------------------------------------------------

def concat_channels(tensors):
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    sizes = [t.data.shape[1] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=1)
    out = _make(data, tuple(tensors), None)
    if out.requires_grad:
        def run(g):
            start = 0
            for t, c in zip(tensors, sizes):
                if t.requires_grad:
                    t._accumulate(g[:, start:start + c])
                start += c
        out._backward = run
    return out


def slice_channels(x, start, stop):
    c = x.data.shape[1]
    if not 0 <= start < stop <= c:
        raise ValueError("channel slice out of range")

    def backward(g, a, out):
        full = np.zeros_like(a)
        full[:, start:stop] = g
        return full

    return _unary(x, lambda a: a[:, start:stop], backward)


def pad_spatial(x, top, bottom, left, right):
    """Zero-pad the spatial dims of a (N,C,H,W) tensor.

    Lets strided convolutions halve even dimensions exactly: padding
    bottom/right by 1 makes (H+1-k) divisible by stride 2 for odd k.
    """
    if min(top, bottom, left, right) < 0:
        raise ValueError("padding must be non-negative")
    widths = ((0, 0), (0, 0), (top, bottom), (left, right))

    def backward(g, a, out):
        n, c, h, w = a.shape
        return g[:, :, top:top + h, left:left + w]

    return _unary(x, lambda a: np.pad(a, widths), backward)


def upsample_nearest(x, factor):
    if factor < 1 or int(factor) != factor:
        raise ValueError("upsample factor must be a positive integer")
    f = int(factor)
    if f == 1:
        return _unary(x, lambda a: a.copy(), lambda g, a, out: g)

    def backward(g, a, out):
        n, c, h, w = a.shape
        return g.reshape(n, c, h, f, w, f).sum(axis=(3, 5))

    return _unary(x, lambda a: a.repeat(f, axis=2).repeat(f, axis=3), backward)


def avg_pool_global(x):
    """Spatial global average: (N,C,H,W) -> (N,C,1,1)."""
    n, c, h, w = x.data.shape

    def backward(g, a, out):
        return np.broadcast_to(g / (h * w), a.shape).copy()

    return _unary(x, lambda a: a.mean(axis=(2, 3), keepdims=True), backward)


def instance_stats(x):
    """Per-sample per-channel spatial mean and std of a (N,C,H,W) tensor.

    Uses the population convention (divide by H*W).  The standard
    deviation is floored at EPS_STAT so callers can divide by it; the
    floored region contributes zero gradient.  Returns (mu, sigma),
    each shaped (N, C).
    """
    n, c, h, w = x.data.shape
    mu = x.mean(axis=(2, 3))
    centered = x - mu.reshape((n, c, 1, 1))
    var = (centered * centered).mean(axis=(2, 3))
    sigma = sqrt_floored(var, EPS_STAT * EPS_STAT)
    return mu, sigma


def _sliding_windows(padded, k, stride, out_h, out_w):
    view = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation with optional bias.

    x: (N,C,H,W), w: (C_out,C,k,k) with odd k, b: (C_out,).  Output
    spatial size (H + 2*pad - k)/stride + 1 must divide exactly.
    """
    n, c, h, width = x.data.shape
    c_out, c_in, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if c_in != c:
        raise ValueError(f"channel mismatch: input {c}, kernel expects {c_in}")
    if (h + 2 * pad - k) % stride or (width + 2 * pad - k) % stride:
        raise ValueError("output size is not integral for this stride/pad")
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _sliding_windows(padded, k, stride, out_h, out_w)  # (n,c,oh,ow,k,k)
    data = np.einsum("nchwij,ocij->nohw", cols, w.data, optimize=True)
    if b is not None:
        data = data + b.data.reshape(1, c_out, 1, 1)

    parents = (x, w) if b is None else (x, w, b)
    out = _make(data, parents, None)
    if out.requires_grad:
        def run(g):
            if w.requires_grad:
                w._accumulate(np.einsum("nohw,nchwij->ocij", g, cols,
                                        optimize=True))
            if b is not None and b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gcols = np.einsum("nohw,ocij->nchwij", g, w.data, optimize=True)
                gp = np.zeros_like(padded)
                for i in range(k):
                    for j in range(k):
                        gp[:, :, i:i + stride * out_h:stride,
                           j:j + stride * out_w:stride] += gcols[..., i, j]
                if pad:
                    gp = gp[:, :, pad:-pad, pad:-pad]
                x._accumulate(gp)
        out._backward = run
    return out
