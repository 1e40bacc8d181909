"""Dense float32 tensors with a reverse-mode tape.

Every op checks that its result is finite and records a tape node when any
input requires a gradient.  ``Tensor.backward`` walks the nodes reachable
from a scalar loss in reverse creation order, accumulates into leaf ``grad``
buffers, then releases the tape so a second call raises.
"""
import contextlib
import itertools

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .exceptions import ConfigurationError, NumericalError

DTYPE = np.float32
LOG_CLAMP = 1e-12

_node_ids = itertools.count()
_kink_log = None


@contextlib.contextmanager
def precision(dtype):
    """Temporarily compute new tensors in ``dtype`` (used by the gradient checker)."""
    global DTYPE
    saved, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = saved


@contextlib.contextmanager
def record_kinks():
    """Collect the branch masks of every piecewise-linear op evaluated inside."""
    global _kink_log
    saved, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = saved


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "index")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.index = next(_node_ids)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ConfigurationError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, arr):
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: non-finite values produced")


def _result(op, data, inputs, backward_fn):
    _check_finite(op, data)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, inputs, backward_fn)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss):
    """Populate ``grad`` on every leaf that requires it with d(loss)/d(leaf)."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ConfigurationError("backward on a tensor with no tape (detached or already consumed)")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.index in nodes:
            continue
        nodes[node.index] = t
        stack.extend(node.inputs)

    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for index in sorted(nodes, reverse=True):
        t = nodes[index]
        g = grads.pop(id(t), None)
        node = t._node
        t._node = None
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            _check_finite(f"{node.op} backward", ig)
            if inp._node is None:
                inp.grad = ig.astype(DTYPE, copy=True) if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig


# --- elementwise suite -----------------------------------------------------


def add(a, b):
    if not isinstance(b, Tensor):
        c = DTYPE(b)
        return _result("add", a.data + c, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, c):
    c = DTYPE(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def log(a):
    """Natural log with the input clamped below at 1e-12."""
    x = a.data
    clamped = np.maximum(x, DTYPE(LOG_CLAMP))
    live = x > LOG_CLAMP

    def bw(g):
        return (np.where(live, g / clamped, DTYPE(0)),)

    return _result("log", np.log(clamped), (a,), bw)


def square(a):
    x = a.data
    return _result("square", x * x, (a,), lambda g: (DTYPE(2) * g * x,))


def tsum(a):
    shape = a.shape
    return _result("sum", np.asarray(a.data.sum(dtype=DTYPE)), (a,),
                   lambda g: (np.full(shape, g, dtype=DTYPE),))


def mean(a):
    n = a.size
    shape = a.shape
    return _result("mean", np.asarray(a.data.mean(dtype=DTYPE)), (a,),
                   lambda g: (np.full(shape, g / DTYPE(n), dtype=DTYPE),))


def detach(a):
    return Tensor(a.data.copy())


def sigmoid(a):
    x = a.data.astype(np.float64)
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    s = s.astype(DTYPE)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (DTYPE(1) - s),))


def relu(a):
    x = a.data
    mask = x >= 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return _result("relu", np.where(mask, x, DTYPE(0)), (a,),
                   lambda g: (np.where(mask, g, DTYPE(0)),))


def leaky_relu(a, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    s = DTYPE(slope)
    x = a.data
    mask = x >= 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return _result("leaky_relu", np.where(mask, x, x * s), (a,),
                   lambda g: (np.where(mask, g, g * s),))


# --- structured ops -------------------------------------------------------


def softmax_channels(a):
    if a.ndim != 4 or a.shape[1] < 2:
        raise ConfigurationError(f"softmax_channels needs [N,C>=2,H,W], got {a.shape}")
    x = a.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result("softmax_channels", p, (a,), bw)


def conv_output_size(size, kernel, stride, padding, dilation):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _windows(xp, kh, kw, oh, ow, stride, dilation):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation over [N,Cin,H,W] with weight [Cout,Cin,kH,kW]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigurationError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} does not match {cout} outputs")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: bad stride={stride} padding={padding} dilation={dilation}")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ConfigurationError(
            f"conv2d: output {oh}x{ow} from input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}, dilation {dilation}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, oh, ow, stride, dilation)
    wd = weight.data
    out = np.tensordot(wd, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    want_x = x.requires_grad

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) if weight.requires_grad else None
        gx = None
        if want_x:
            gcols = np.tensordot(wd, g, axes=([0], [1]))  # c, kh, kw, n, oh, ow
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            hs = stride * (oh - 1) + 1
            ws = stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    r, s = i * dilation, j * dilation
                    gxp[:, :, r:r + hs:stride, s:s + ws:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _result("conv2d", out, inputs, bw)


def interpolation_matrix(n_in, n_out):
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m.astype(DTYPE)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(DTYPE)


def upsample_bilinear(x, out_h, out_w):
    if x.ndim != 4:
        raise ConfigurationError(f"upsample_bilinear needs [N,C,h,w], got {x.shape}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ConfigurationError(f"upsample_bilinear cannot shrink {h}x{w} to {out_h}x{out_w}")
    ah = interpolation_matrix(h, out_h)
    aw = interpolation_matrix(w, out_w)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _result("upsample_bilinear", out, (x,), bw)
