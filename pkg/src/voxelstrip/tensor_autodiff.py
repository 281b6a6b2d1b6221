"""A small dense tensor type with reverse-mode differentiation.

Only the operators the segmentation network needs are provided. Arrays keep
their dtype: float32 for training/inference, float64 for gradient checks.
Spatial tensors use the NCDHW layout.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import NonScalarLoss, ShapeMismatch


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; every operator returns a new Tensor that
    remembers its parents and how to push gradients back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _topo_order(root):
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


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf that requires it."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# --------------------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    s = x.dtype.type(slope)
    y = np.where(pos, x.data, x.data * s)
    return _result(y, (x,), lambda g: (np.where(pos, g, g * s),), "leaky_relu")


# --------------------------------------------------------------------------- channel ops

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"concat: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]), "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)
    return _result(x.data[:, start:stop].copy(), (x,), bw, "slice")


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 with max subtraction."""
    if x.data.ndim < 2 or x.shape[1] < 1:
        raise ShapeMismatch(f"softmax needs a channel axis, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    return _result(s, (x,), bw, "softmax")


# --------------------------------------------------------------------------- convolution

def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """3D cross-correlation. ``x`` is NCDHW, ``w`` is (O, C, k, k, k)."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5D input and kernel, got {x.shape}, {w.shape}")
    N, C, D, H, W = x.shape
    O, Ci, k, k2, k3 = w.shape
    if Ci != C:
        raise ShapeMismatch(f"conv3d: input has {C} channels, kernel expects {Ci}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ShapeMismatch(f"conv3d: kernel must be cubic and odd, got {w.shape[2:]}")
    if bias is not None and bias.shape != (O,):
        raise ShapeMismatch(f"conv3d: bias shape {bias.shape} != ({O},)")
    if stride not in (1, 2) or padding < 0:
        raise ShapeMismatch(f"conv3d: unsupported stride={stride} padding={padding}")
    p = padding
    out_sp = tuple((n + 2 * p - k) // stride + 1 for n in (D, H, W))
    if min(out_sp) < 1:
        raise ShapeMismatch(f"conv3d: input {x.shape[2:]} too small for kernel {k}")
    P = out_sp[0] * out_sp[1] * out_sp[2]
    pointwise = k == 1 and stride == 1 and p == 0
    if pointwise:
        cols = x.data.reshape(N, C, P)
        out = np.matmul(w.data.reshape(O, C), cols)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
        out, cols = kernels.conv3d_forward(xp, w.data, stride, out_sp)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape((N, O) + out_sp)

    def bw(g):
        gx = gw = None
        if pointwise:
            gm = g.reshape(N, O, P)
            if w.requires_grad:
                gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if x.requires_grad:
                gx = np.matmul(w.data.reshape(O, C).T, gm).reshape(x.shape)
        else:
            gxp, gw = kernels.conv3d_backward(g, xp, w.data, stride, cols,
                                              x.requires_grad, w.requires_grad)
            if gxp is not None:
                gx = gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, bw, "conv3d")


# --------------------------------------------------------------------------- normalization

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over spatial voxels, then affine."""
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"instance_norm: affine params must have shape ({C},)")
    axes = tuple(range(2, x.data.ndim))
    bshape = (1, C) + (1,) * len(axes)
    mean = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    g_ = gamma.data.reshape(bshape)
    y = xhat * g_ + beta.data.reshape(bshape)
    M = int(np.prod(x.shape[2:]))

    def bw(g):
        gxhat = g * g_
        s1 = gxhat.sum(axis=axes, keepdims=True)
        s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
        gx = (gxhat - s1 / M - xhat * (s2 / M)) * inv_std
        ggamma = (g * xhat).sum(axis=(0,) + axes)
        gbeta = g.sum(axis=(0,) + axes)
        return gx, ggamma, gbeta
    return _result(y, (x, gamma, beta), bw, "instance_norm")


# --------------------------------------------------------------------------- upsampling

def _up1d(a, axis):
    n = a.shape[axis]
    prev = np.take(a, np.maximum(np.arange(n) - 1, 0), axis=axis)
    nxt = np.take(a, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
    q = a.dtype.type(0.25)
    t = a.dtype.type(0.75)
    even = t * a + q * prev
    odd = t * a + q * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up1d_adjoint(g, axis):
    shape = list(g.shape)
    n = shape[axis] // 2
    split = shape[:axis] + [n, 2] + shape[axis + 1:]
    g2 = g.reshape(split)
    ge = np.take(g2, 0, axis=axis + 1)
    go = np.take(g2, 1, axis=axis + 1)
    q = g.dtype.type(0.25)
    t = g.dtype.type(0.75)
    ga = t * ge + t * go
    ga = np.moveaxis(ga, axis, 0)
    ge = np.moveaxis(ge, axis, 0)
    go = np.moveaxis(go, axis, 0)
    ga[:-1] += q * ge[1:]
    ga[0] += q * ge[0]
    ga[1:] += q * go[:-1]
    ga[-1] += q * go[-1]
    return np.moveaxis(ga, 0, axis)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Double every spatial axis with trilinear weights (half-pixel centres, edge clamped)."""
    if factor != 2:
        raise ShapeMismatch("only factor 2 upsampling is supported")
    y = x.data
    for ax in (2, 3, 4):
        y = _up1d(y, ax)

    def bw(g):
        for ax in (4, 3, 2):
            g = _up1d_adjoint(g, ax)
        return (np.ascontiguousarray(g),)
    return _result(y, (x,), bw, "upsample")
