"""Dense tensors with a minimal reverse-mode gradient tape.

Implements only the operations the reference network, the attribution
methods, and the perturbation search need: conv2d, dense, relu, sigmoid,
softplus, max pooling, global average pooling, elementwise add/mul, channel
concatenation, axis reductions, index selection, and a fused
binary-cross-entropy-with-logits.

Storage defaults to float32 (float64 graphs are supported and used by the
finite-difference oracle); matrix products, convolutions, and reductions
accumulate in float64 before rounding back to the storage dtype.  There is
no broadcasting beyond bias addition.  The relu subgradient at 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands do not conform."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphFreedError(RuntimeError):
    """backward() was called twice on the same graph."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _as_storage(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense array plus an optional position on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_storage(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in output of {op!r}")


def _result(data, op, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._freed = False
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(parent, grad):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = grad.astype(parent.data.dtype, copy=True)
    else:
        parent.grad += grad.astype(parent.data.dtype, copy=False)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def backward(out: Tensor) -> None:
    """Backpropagate from a scalar output through its tape.

    Gradients accumulate by summation over fan-out and land on every
    reachable tensor with requires_grad.  The tape is consumed: a second
    call on the same output raises GraphFreedError.
    """
    if out.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.data.shape}")
    if out._freed:
        raise GraphFreedError("backward already ran on this graph")

    topo = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    out.grad = np.ones_like(out.data)
    out._freed = True
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node._backward = None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, "add", (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, "sub", (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, "mul", (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        _accum(a, g * c)

    return _result(a.data * a.data.dtype.type(c), "scale", (a,), back)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias over the last axis; the only broadcast in the engine."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias_add: bias {b.data.shape} does not match last axis of {x.data.shape}")

    def back(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0, dtype=np.float64))

    return _result(x.data + b.data, "bias_add", (x, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        _accum(x, g * mask)

    return _result(np.where(mask, x.data, x.data.dtype.type(0)), "relu", (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    pos = z >= 0
    y = np.empty_like(z)
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)

    def back(g):
        _accum(x, g * (y * (1.0 - y)))

    return _result(y, "sigmoid", (x,), back)


def softplus(x: Tensor) -> Tensor:
    z = x.data
    y = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))

    def back(g):
        pos = z >= 0
        s = np.empty_like(z)
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        _accum(x, g * s)

    return _result(y, "softplus", (x,), back)


def bce_with_logits(z: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(z) against {0,1} targets.

    Computed in the stable softplus form t*softplus(-z) + (1-t)*softplus(z);
    gradient is sigmoid(z) - t.
    """
    t = np.asarray(targets)
    if t.shape != z.data.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} vs logits {z.data.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("bce_with_logits: targets must be binary")
    t = t.astype(z.data.dtype)
    zd = z.data
    y = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))

    def back(g):
        pos = zd >= 0
        s = np.empty_like(zd)
        s[pos] = 1.0 / (1.0 + np.exp(-zd[pos]))
        ez = np.exp(zd[~pos])
        s[~pos] = ez / (1.0 + ez)
        _accum(z, g * (s - t))

    return _result(y, "bce_with_logits", (z,), back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(np.ascontiguousarray(x.data).reshape(shape), "reshape", (x,), back)


def concat_channels(parts) -> Tensor:
    parts = list(parts)
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise ShapeError("concat_channels: leading dims differ")
    sizes = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[..., lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=-1), "concat", tuple(parts), back)


def take(x: Tensor, indices, axis: int = -1) -> Tensor:
    """Select a fixed index subset along one axis (e.g. a class subset)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take: indices must be 1-D")

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        _accum(x, gx)

    return _result(np.take(x.data, idx, axis=axis), "take", (x,), back)


def select_index(x: Tensor, indices) -> Tensor:
    """Per-row column pick: x (N, C), indices (N,) -> (N,)."""
    if x.data.ndim != 2:
        raise ShapeError("select_index: expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (x.data.shape[0],):
        raise ShapeError("select_index: one index per row required")
    rows = np.arange(x.data.shape[0])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        _accum(x, gx)

    return _result(x.data[rows, idx], "select_index", (x,), back)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    y = x.data.sum(axis=axis, dtype=np.float64).astype(x.data.dtype)

    def back(g):
        if axis is None:
            _accum(x, np.full_like(x.data, 1) * g)
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _result(np.asarray(y), "reduce_sum", (x,), back)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / n)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; ties propagate the gradient to the first maximum."""
    y = x.data.max(axis=axis)
    idx = x.data.argmax(axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accum(x, gx)

    return _result(y, "reduce_max", (x,), back)


# ---------------------------------------------------------------------------
# dense / conv / pooling


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out_dtype = np.result_type(a.data.dtype, b.data.dtype)
    y = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(out_dtype)

    def back(g):
        g64 = g.astype(np.float64)
        _accum(a, g64 @ b.data.astype(np.float64).T)
        _accum(b, a.data.astype(np.float64).T @ g64)

    return _result(y, "matmul", (a, b), back)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = bias_add(y, b)
    return y


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution with an (kh, kw, Cin, Cout) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d: x must be NHWC and w (kh, kw, Cin, Cout)")
    n, h, wd, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = _pad_hw(x.data, p)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]  # (N,Ho,Wo,C,kh,kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin).astype(np.float64)
    wmat = w.data.reshape(kh * kw * cin, cout).astype(np.float64)
    y = (cols @ wmat).reshape(n, ho, wo, cout).astype(x.data.dtype)

    def back(g):
        gflat = g.reshape(n * ho * wo, cout).astype(np.float64)
        _accum(w, (cols.T @ gflat).reshape(kh, kw, cin, cout))
        gcols = (gflat @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, :, i, j, :]
        if p:
            gxp = gxp[:, p:-p, p:-p, :]
        _accum(x, gxp)

    out = _result(y, "conv2d", (x, w), back)
    if b is not None:
        out = bias_add(out, b)
    return out


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """NHWC max pooling; ties route the gradient to the first window slot."""
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d: x must be NHWC")
    k = int(kernel)
    s = k if stride is None else int(stride)
    n, h, wd, c = x.data.shape
    ho = (h - k) // s + 1
    wo = (wd - k) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("max_pool2d: window larger than input")

    win = sliding_window_view(x.data, (k, k), axis=(1, 2))[:, ::s, ::s]  # (N,Ho,Wo,C,k,k)
    flat = win.reshape(n, ho, wo, c, k * k)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                sel = idx == (i * k + j)
                gx[:, i : i + s * ho : s, j : j + s * wo : s, :] += np.where(sel, g, 0)
        _accum(x, gx)

    return _result(y, "max_pool2d", (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C) spatial mean with float64 accumulation."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool: x must be NHWC")
    n, h, wd, c = x.data.shape
    y = x.data.mean(axis=(1, 2), dtype=np.float64).astype(x.data.dtype)

    def back(g):
        _accum(x, np.broadcast_to(g[:, None, None, :], x.data.shape) / (h * wd))

    return _result(y, "global_avg_pool", (x,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FiniteDiffReport:
    """Per-coordinate comparison of autodiff against central differences."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    unreliable: np.ndarray  # coordinates sitting on a kink; excluded from the verdict
    max_rel_err: float
    passed: bool


def finite_diff_check(f, x, h: float = 1e-3, tol: float = 1e-4) -> FiniteDiffReport:
    """Check the gradient of a scalar graph builder f at point x.

    f takes a Tensor and returns a scalar Tensor.  The analytic gradient is
    taken at x's own dtype; the central differences are probed on a float64
    copy so the oracle's noise floor stays far below tol.  A coordinate
    whose one-sided differences disagree (a kink under the probe) is flagged
    unreliable and left out of the pass/fail verdict.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    x = np.asarray(x)

    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError("finite_diff_check: f must be scalar-valued")
    backward(out)
    analytic = np.zeros_like(x, dtype=np.float64) if xt.grad is None else xt.grad.astype(np.float64)

    def eval64(pt):
        return f(Tensor(pt, dtype=np.float64)).item()

    x64 = x.astype(np.float64)
    flat = x64.reshape(-1)
    numeric = np.zeros(flat.shape, dtype=np.float64)
    fwd = np.zeros_like(numeric)
    bwd = np.zeros_like(numeric)
    f0 = eval64(x64)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        fp = eval64((flat + step).reshape(x.shape))
        fm = eval64((flat - step).reshape(x.shape))
        numeric[i] = (fp - fm) / (2 * h)
        fwd[i] = (fp - f0) / h
        bwd[i] = (f0 - fm) / h
    numeric = numeric.reshape(x.shape)
    fwd = fwd.reshape(x.shape)
    bwd = bwd.reshape(x.shape)

    scl = np.maximum(np.abs(fwd), np.abs(bwd)) + 1.0
    unreliable = np.abs(fwd - bwd) > 0.1 * scl

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    reliable = rel[~unreliable]
    max_rel = float(reliable.max()) if reliable.size else 0.0
    return FiniteDiffReport(
        analytic=analytic,
        numeric=numeric,
        rel_err=rel,
        unreliable=unreliable,
        max_rel_err=max_rel,
        passed=max_rel < tol,
    )
