"""Backend selection for the hot kernels.

The compiled Cython extension is used when it was built; otherwise the numpy
fallback is used. Set ``VOXELSTRIP_BACKEND=python`` to force the fallback.
"""
import logging
import os

import numpy as np

from . import _fallback

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("VOXELSTRIP_BACKEND", "").lower() not in ("python", "numpy", "fallback"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def available_backends():
    return ["cython", "python"] if _compiled is not None else ["python"]


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    name = name or BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    if name == "python":
        return _fallback
    raise ValueError(f"unknown backend {name!r}")


_impl = get_backend()


def im2col3d(xp, k, stride, out_shape):
    """Gather ``k``-cubed patches of padded input ``xp`` (N, C, D, H, W) into
    columns of shape (N, C*k**3, Do*Ho*Wo)."""
    return _impl.im2col3d(np.ascontiguousarray(xp), int(k), int(stride), tuple(out_shape))


def col2im3d(cols, xp_shape, k, stride, out_shape):
    """Adjoint of :func:`im2col3d`: scatter-add columns back onto the padded grid."""
    return _impl.col2im3d(np.ascontiguousarray(cols), tuple(xp_shape), int(k), int(stride),
                          tuple(out_shape))


# stride-1 planes at least this large (Ho * Wp) use the direct compiled kernels;
# smaller or strided convolutions go through im2col + BLAS, which wins there.
DIRECT_MIN_PLANE = 512


def _direct(stride, out_shape, xp_shape):
    return (_impl is _compiled and stride == 1
            and out_shape[1] * xp_shape[4] >= DIRECT_MIN_PLANE)


def conv3d_forward(xp, w, stride, out_shape):
    """Cross-correlate padded input ``xp`` (N, C, Dp, Hp, Wp) with ``w`` (O, C, k, k, k).

    Returns ``(out, cols)`` with ``out`` shaped (N, O, Do*Ho*Wo); ``cols`` is
    the im2col matrix when that path was taken (reused by the backward pass)
    and ``None`` otherwise.
    """
    N, O, k = xp.shape[0], w.shape[0], w.shape[2]
    P = out_shape[0] * out_shape[1] * out_shape[2]
    xp = np.ascontiguousarray(xp)
    if _direct(stride, out_shape, xp.shape):
        out = _compiled.conv3d_forward(xp, np.ascontiguousarray(w), int(stride), tuple(out_shape))
        return out.reshape(N, O, P), None
    cols = im2col3d(xp, k, stride, out_shape)
    return np.matmul(w.reshape(O, -1), cols), cols


def conv3d_backward(g, xp, w, stride, cols=None, need_input=True, need_weight=True):
    """Gradients of :func:`conv3d_forward` w.r.t. the padded input and the kernel.

    ``g`` has shape (N, O, Do, Ho, Wo). Returns ``(gxp, gw)``; entries not
    requested are ``None``.
    """
    N, O = g.shape[:2]
    k = w.shape[2]
    out_shape = g.shape[2:]
    g = np.ascontiguousarray(g)
    gxp = gw = None
    if _direct(stride, out_shape, xp.shape):
        if need_input:
            gxp = _compiled.conv3d_grad_input(g, np.ascontiguousarray(w), tuple(xp.shape),
                                              int(stride))
        if need_weight:
            gw = _compiled.conv3d_grad_weight(g, np.ascontiguousarray(xp), int(k), int(stride))
        return gxp, gw
    gm = g.reshape(N, O, -1)
    if need_weight:
        if cols is None:
            cols = im2col3d(xp, k, stride, out_shape)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    if need_input:
        gcols = np.matmul(w.reshape(O, -1).T, gm)
        gxp = col2im3d(gcols, xp.shape, k, stride, out_shape)
    return gxp, gw


def trilinear_affine(src, M, out_shape):
    """Trilinear sampling of ``src`` at index coordinates ``M @ [i, j, k, 1]``.

    ``M`` is 3x4. Coordinates are clamped to the valid index range (edge replicate).
    """
    M = np.ascontiguousarray(np.asarray(M, dtype=np.float64)[:3])
    return _impl.trilinear_affine(np.ascontiguousarray(src), M, tuple(int(d) for d in out_shape))


def nearest_affine(src, M, out_shape):
    """Nearest-neighbour sampling, rounding half away from zero."""
    M = np.ascontiguousarray(np.asarray(M, dtype=np.float64)[:3])
    return _impl.nearest_affine(np.ascontiguousarray(src), M, tuple(int(d) for d in out_shape))


def label26(mask):
    """Label 26-connected foreground components. Returns ``(labels, n)``."""
    return _impl.label26(np.ascontiguousarray(mask, dtype=np.uint8))
