"""Numpy implementations of the compiled kernels in ``_kernels.pyx``.

Semantics and per-element accumulation order match the compiled versions, so
both backends give bit-identical results for im2col/col2im and labeling.
"""
import numpy as np
from scipy import ndimage


def im2col3d(xp, k, stride, out_shape):
    N, C = xp.shape[:2]
    Do, Ho, Wo = out_shape
    cols = np.empty((N, C, k, k, k, Do, Ho, Wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                cols[:, :, a, b, e] = xp[:, :,
                                         a:a + stride * Do:stride,
                                         b:b + stride * Ho:stride,
                                         e:e + stride * Wo:stride]
    return cols.reshape(N, C * k ** 3, Do * Ho * Wo)


def col2im3d(cols, xp_shape, k, stride, out_shape):
    N, C = xp_shape[:2]
    Do, Ho, Wo = out_shape
    cols = cols.reshape(N, C, k, k, k, Do, Ho, Wo)
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                gxp[:, :,
                    a:a + stride * Do:stride,
                    b:b + stride * Ho:stride,
                    e:e + stride * Wo:stride] += cols[:, :, a, b, e]
    return gxp


def _slab_coords(M, i, out_shape):
    _, Ho, Wo = out_shape
    j = np.arange(Ho, dtype=np.float64)[:, None]
    l = np.arange(Wo, dtype=np.float64)[None, :]
    return [M[r, 0] * i + M[r, 1] * j + M[r, 2] * l + M[r, 3] for r in range(3)]


def trilinear_affine(src, M, out_shape):
    D, H, W = src.shape
    out = np.empty(out_shape, dtype=src.dtype)
    s = src
    for i in range(out_shape[0]):
        cx, cy, cz = _slab_coords(M, i, out_shape)
        cx = np.clip(cx, 0.0, D - 1)
        cy = np.clip(cy, 0.0, H - 1)
        cz = np.clip(cz, 0.0, W - 1)
        x0 = np.floor(cx).astype(np.intp)
        y0 = np.floor(cy).astype(np.intp)
        z0 = np.floor(cz).astype(np.intp)
        fx, fy, fz = cx - x0, cy - y0, cz - z0
        x1 = np.minimum(x0 + 1, D - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        z1 = np.minimum(z0 + 1, W - 1)

        def v(x, y, z):
            return s[x, y, z].astype(np.float64)

        c00 = v(x0, y0, z0) + (v(x1, y0, z0) - v(x0, y0, z0)) * fx
        c01 = v(x0, y0, z1) + (v(x1, y0, z1) - v(x0, y0, z1)) * fx
        c10 = v(x0, y1, z0) + (v(x1, y1, z0) - v(x0, y1, z0)) * fx
        c11 = v(x0, y1, z1) + (v(x1, y1, z1) - v(x0, y1, z1)) * fx
        c0 = c00 + (c10 - c00) * fy
        c1 = c01 + (c11 - c01) * fy
        out[i] = c0 + (c1 - c0) * fz
    return out


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def nearest_affine(src, M, out_shape):
    D, H, W = src.shape
    out = np.empty(out_shape, dtype=src.dtype)
    for i in range(out_shape[0]):
        cx, cy, cz = _slab_coords(M, i, out_shape)
        x = np.clip(_round_half_away(cx), 0, D - 1).astype(np.intp)
        y = np.clip(_round_half_away(cy), 0, H - 1).astype(np.intp)
        z = np.clip(_round_half_away(cz), 0, W - 1).astype(np.intp)
        out[i] = src[x, y, z]
    return out


def label26(mask):
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    return labels.astype(np.int32), int(n)
