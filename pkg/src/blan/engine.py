"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and optionally records the primitive operation
that produced it. Calling ``backward()`` on a scalar root walks the
recorded graph in reverse topological order and accumulates gradients
into every reachable tensor that has ``requires_grad`` set.

Training runs in float32; gradient checks run the same code in float64
(every op inherits the dtype of its inputs).
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives incompatible array shapes."""


class NumericalError(ArithmeticError):
    """Raised when a non-finite value is encountered where one must not be."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / detached math)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array with optional gradient tracking.

    data          -- numpy array (float32 at training precision, float64 for checks)
    requires_grad -- participate in backward passes
    grad          -- same-shape gradient buffer, populated by backward()
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{tag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        """A view of the same data outside the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph mechanics ----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar root, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; use explicit ops")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)) and dtype is None:
        # python scalars must not upcast float32 tensors to float64
        return Tensor(np.float32(x))
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    """Wrap an op result, recording the graph edge when tracking is on."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def tabs(a):
    """Elementwise absolute value; the subgradient at 0 is defined as 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * sign)

    return _make(np.abs(a.data), (a,), backward, "abs")


def tlog(a):
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def texp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


# -- activations --------------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * factor)

    return _make(a.data * factor, (a,), backward, "leaky_relu")


def sigmoid(a):
    a = as_tensor(a)
    # stable for both tails
    out_data = np.where(
        a.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(a.data))),
        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
    ).astype(a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh")


# -- reductions and reshaping --------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), backward, "sum")


def scale(a, s):
    """Multiply by a scalar constant matched to the tensor's dtype."""
    a = as_tensor(a)
    return mul(a, Tensor(np.asarray(s, dtype=a.data.dtype)))


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def flip(a, axis):
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.flip(g, axis=axis))

    return _make(np.ascontiguousarray(np.flip(a.data, axis=axis)), (a,), backward, "flip")


def getitem(a, key):
    a = as_tensor(a)
    fancy = isinstance(key, tuple) and any(
        isinstance(k, (np.ndarray, list)) for k in key
    ) or isinstance(key, (np.ndarray, list))

    def backward(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        if fancy:
            np.add.at(buf, key, g)
        else:
            buf[key] += g
        a._accumulate(buf)

    return _make(np.ascontiguousarray(a.data[key]), (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def matmul(a, b):
    """2-D matrix product for linear layers: (n, d) @ (d, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- spatial ops ----------------------------------------------------------------


def _conv_out_size(n, k, stride, pad):
    span = n + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv geometry: size {n}, kernel {k}, stride {stride}, pad {pad} "
            "does not yield an integer output size"
        )
    return span // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> (N, C*kh*kw, OH*OW) patch matrix."""
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of _im2col: scatter-add patch columns back into an image."""
    n, c, h, w = x_shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        buf = buf[:, :, pad : pad + h, pad : pad + w]
    return buf


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of (N,C,H,W) with (F,C,kh,kw) filters."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    f, c, kh, kw = weight.data.shape
    if x.data.shape[1] != c:
        raise ShapeError(
            f"conv2d: input has {x.data.shape[1]} channels, weight expects {c} "
            f"(input {x.data.shape}, weight {weight.data.shape})"
        )
    n = x.data.shape[0]
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    w2 = weight.data.reshape(f, c * kh * kw)
    out = np.matmul(w2, cols)  # (N, F, OH*OW) via broadcasting
    out = out.reshape(n, f, oh, ow)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(n, f, oh * ow)
        if weight.requires_grad:
            dw = np.einsum("nfl,nkl->fk", g2, cols, optimize=True)
            weight._accumulate(dw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x._accumulate(_col2im(dcols, x.data.shape, kh, kw, stride, pad))

    return _make(out, parents, backward, "conv2d")


def conv_transpose2d(y, weight, bias=None, stride=1, pad=0):
    """Adjoint of conv2d with the same (F,C,kh,kw) weight.

    Maps (N,F,H,W) back to (N,C,(H-1)*stride-2*pad+kh, ...): exactly the
    gradient-with-respect-to-input of the matching conv2d, so
    <conv2d(x,w), y> == <x, conv_transpose2d(y,w)> holds by construction.
    """
    y, weight = as_tensor(y), as_tensor(weight)
    if y.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d expects 4-d input and weight, got {y.data.shape} and {weight.data.shape}"
        )
    f, c, kh, kw = weight.data.shape
    if y.data.shape[1] != f:
        raise ShapeError(
            f"conv_transpose2d: input has {y.data.shape[1]} channels, weight expects {f} "
            f"(input {y.data.shape}, weight {weight.data.shape})"
        )
    n, _, h, w = y.data.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (w - 1) * stride - 2 * pad + kw
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv_transpose2d geometry: input {y.data.shape} with kernel {kh}, "
            f"stride {stride}, pad {pad} gives non-positive output {oh}x{ow}"
        )
    w2 = weight.data.reshape(f, c * kh * kw)
    y2 = y.data.reshape(n, f, h * w)
    cols = np.matmul(w2.T, y2)
    out = _col2im(cols, (n, c, oh, ow), kh, kw, stride, pad)
    parents = [y, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gcols, goh, gow = _im2col(g, kh, kw, stride, pad)
        # goh == h, gow == w by the geometry above
        if y.requires_grad:
            dy = np.matmul(w2, gcols)
            y._accumulate(dy.reshape(y.data.shape))
        if weight.requires_grad:
            dw = np.einsum("nfl,nkl->fk", y2, gcols, optimize=True)
            weight._accumulate(dw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward, "conv_transpose2d")


def avg_pool2x2(x):
    """Stride-2 spatial downsampling by 2x2 mean."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial size, got {h}x{w}")
    v = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = v.mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            gg = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            x._accumulate(gg)

    return _make(out, (x,), backward, "avg_pool2x2")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Channelwise batch normalization on (N,C,H,W).

    Training mode normalizes with per-batch statistics and updates the
    running buffers in place (exponential average); inference mode uses the
    running buffers. Gradients flow to x, gamma and beta in both modes.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (N,C,H,W), got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: affine shape {gamma.data.shape}/{beta.data.shape} does not match {c} channels"
        )
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = gxhat.sum(axis=axes)
                s2 = (gxhat * xhat).sum(axis=axes)
                dx = (
                    gxhat
                    - (s1 / m)[None, :, None, None]
                    - xhat * (s2 / m)[None, :, None, None]
                ) * invstd[None, :, None, None]
            else:
                dx = gxhat * invstd[None, :, None, None]
            x._accumulate(dx)

    return _make(out, (x, gamma, beta), backward, "batchnorm2d")


# -- verification harness --------------------------------------------------------


def grad_check(f, params, eps=1e-5, max_coords=64, seed=0):
    """Compare analytic gradients of a scalar function against central differences.

    f takes the parameter list and returns a scalar Tensor; evaluation must be
    deterministic. Returns the max over sampled coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|). Run with float64
    parameters for meaningful tolerances.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for p in params:
        p.zero_grad()
    out = f(params)
    if not np.isfinite(out.data).all():
        raise NumericalError("grad_check: function value is non-finite")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pi, p in enumerate(params):
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(analytic).all():
            raise NumericalError(f"grad_check: non-finite analytic gradient in parameter {pi}")
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        aflat = analytic.reshape(-1)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + eps
            with no_grad():
                hi = float(f(params).data)
            flat[ci] = orig - eps
            with no_grad():
                lo = float(f(params).data)
            flat[ci] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericalError(
                    f"grad_check: non-finite perturbed value in parameter {pi}"
                )
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[ci] - numeric) / max(1.0, abs(aflat[ci]), abs(numeric))
            worst = max(worst, err)
    return worst
