"""Minimal reverse-mode autodiff on numpy arrays.

Covers exactly the operations the frame encoder and the losses need:
elementwise arithmetic with limited broadcasting, matmul, 2D convolution,
ReLU, batch normalization, reductions, row-wise softmax cross-entropy and
the dustbin augmentation of a score matrix. Gradients are accumulated on a
dynamic tape; ``Tensor.backward()`` walks it in reverse topological order.

float64 is used by the gradient-check tests; float32 is the training
default.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class GradientError(RuntimeError):
    """Raised when backward() is misused or gradients are non-finite."""


def _as_array(data, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype)
    if not np.issubdtype(a.dtype, np.floating):
        return a.astype(np.float32)
    return a


class Tensor:
    """An n-d array plus the tape bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- tape ------------------------------------------------------------

    def _needs_tape(self):
        return self.requires_grad or self._parents

    def backward(self):
        """Populate .grad on every requires_grad tensor reachable from self.

        The loss must be scalar; its own gradient is seeded with 1.
        """
        if self.data.size != 1:
            raise GradientError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p._needs_tape() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b, like=a)

    def backward(g):
        if a._needs_tape():
            a._accumulate(_unbroadcast(g, a.shape))
        if b._needs_tape():
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b, like=a if isinstance(a, Tensor) else None)

    def backward(g):
        if a._needs_tape():
            a._accumulate(_unbroadcast(g, a.shape))
        if b._needs_tape():
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b, like=a if isinstance(a, Tensor) else None)

    def backward(g):
        if a._needs_tape():
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b._needs_tape():
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def relu(x):
    x = _wrap(x)
    mask = x.data > 0

    def backward(g):
        if x._needs_tape():
            x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0), (x,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a._needs_tape():
            a._accumulate(g @ b.data.T)
        if b._needs_tape():
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(x):
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")

    def backward(g):
        if x._needs_tape():
            x._accumulate(g.T)

    return _make(x.data.T.copy(), (x,), backward)


def reshape(x, shape):
    x = _wrap(x)

    def backward(g):
        if x._needs_tape():
            x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def slice_(x, key):
    x = _wrap(x)

    def backward(g):
        if x._needs_tape():
            full = np.zeros_like(x.data)
            full[key] = g
            x._accumulate(full)

    return _make(x.data[key].copy(), (x,), backward)


# -- reductions --------------------------------------------------------------


def sum_(x, axis=None):
    x = _wrap(x)

    def backward(g):
        if x._needs_tape():
            if axis is None:
                x._accumulate(np.broadcast_to(g, x.shape).copy())
            else:
                x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(x.data.sum(axis=axis), (x,), backward)


def mean(x, axis=None):
    x = _wrap(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


# -- convolution ---------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(dcols, x_shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += d[
                :, :, i, j
            ]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x, w, b, stride=1, pad=1):
    """2D convolution (cross-correlation), NCHW layout, zero padding."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weights")
    oc, ic, kh, kw = w.shape
    if x.shape[1] != ic:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(oc, ic * kh * kw)
    out = cols @ wmat.T + b.data
    n = x.shape[0]
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
        if w._needs_tape():
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if b._needs_tape():
            b._accumulate(gmat.sum(axis=0))
        if x._needs_tape():
            dcols = gmat @ wmat
            x._accumulate(_col2im(dcols, x.shape, kh, kw, stride, pad, oh, ow))

    return _make(out, (x, w, b), backward)


# -- batch normalization ---------------------------------------------------------


def batch_norm(x, gamma, beta, eps=1e-5):
    """Batch normalization over all axes but the channel axis (axis 1).

    Uses batch statistics with biased variance. Returns (y, mean, var) so
    the caller can maintain running averages for inference; mean/var are
    plain arrays of shape (C,).
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.data.ndim not in (2, 4):
        raise ShapeError("batch_norm expects (N,F) or (N,C,H,W)")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    m = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    shape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        if gamma._needs_tape():
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta._needs_tape():
            beta._accumulate(g.sum(axis=axes))
        if x._needs_tape():
            dxhat = g * gamma.data.reshape(shape)
            s1 = dxhat.sum(axis=axes).reshape(shape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
            dx = (inv_std.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
            x._accumulate(dx)

    return _make(out, (x, gamma, beta), backward), mu, var


def batch_norm_infer(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Affine normalization with frozen (running) statistics."""
    x = _wrap(x)
    shape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    scale = gamma.data / np.sqrt(running_var + eps)
    shift = beta.data - running_mean * scale
    return add(mul(x, scale.reshape(shape)), shift.reshape(shape))


# -- losses ------------------------------------------------------------------


def cross_entropy_rows(logits, labels):
    """Per-row softmax cross-entropy: returns a length-R tensor.

    labels[r] must be an integer class index in [0, C).
    """
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    r, c = logits.shape
    if labels.shape != (r,):
        raise ShapeError(f"labels shape {labels.shape} != ({r},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(denom)
    rows = np.arange(r)
    out = -log_probs[rows, labels]

    def backward(g):
        if logits._needs_tape():
            d = ez / denom
            d[rows, labels] -= 1.0
            logits._accumulate(d * g[:, None])

    return _make(out, (logits,), backward)


def dustbin_augment(scores, alpha):
    """Append the learnable dustbin row and column to a score matrix.

    scores is (b1, b2); the result is (b1+1, b2+1) with the last row and
    last column (including the corner) set to the scalar alpha.
    """
    scores, alpha = _wrap(scores), _wrap(alpha)
    if scores.data.ndim != 2:
        raise ShapeError("dustbin_augment expects a 2-d score matrix")
    if alpha.data.size != 1:
        raise ShapeError("alpha must be a scalar")
    b1, b2 = scores.shape
    out = np.empty((b1 + 1, b2 + 1), dtype=scores.dtype)
    out[:b1, :b2] = scores.data
    out[b1, :] = alpha.data
    out[:b1, b2] = alpha.data

    def backward(g):
        if scores._needs_tape():
            scores._accumulate(g[:b1, :b2])
        if alpha._needs_tape():
            da = g[b1, :].sum() + g[:b1, b2].sum()
            alpha._accumulate(np.asarray(da, dtype=alpha.dtype).reshape(alpha.shape))

    return _make(out, (scores, alpha), backward)
