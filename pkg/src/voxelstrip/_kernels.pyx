# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Every function here has a numpy twin in ``_fallback``
with identical semantics and identical per-element accumulation order."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


def im2col3d(floating[:, :, :, :, ::1] xp, int k, int stride, tuple out_shape):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    cdef Py_ssize_t K3 = k * k * k, P = Do * Ho * Wo
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((N, C * K3, P), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, a, b, e, od, oh, ow, row
    cdef floating* dst
    cdef floating* srow
    with nogil:
        for n in range(N):
            for c in range(C):
                for a in range(k):
                    for b in range(k):
                        for e in range(k):
                            row = c * K3 + (a * k + b) * k + e
                            dst = &cols[n, row, 0]
                            for od in range(Do):
                                for oh in range(Ho):
                                    srow = &xp[n, c, a + stride * od, b + stride * oh, e]
                                    if stride == 1:
                                        for ow in range(Wo):
                                            dst[ow] = srow[ow]
                                    else:
                                        for ow in range(Wo):
                                            dst[ow] = srow[stride * ow]
                                    dst += Wo
    return cols_arr


def col2im3d(floating[:, :, ::1] cols, tuple xp_shape, int k, int stride, tuple out_shape):
    cdef Py_ssize_t N = xp_shape[0], C = xp_shape[1]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    cdef Py_ssize_t K3 = k * k * k
    dtype = np.float32 if floating is float else np.float64
    gxp_arr = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t n, c, a, b, e, od, oh, ow, row
    cdef floating* src
    cdef floating* drow
    # tap-major loop: each input element accumulates its taps in increasing tap order
    with nogil:
        for n in range(N):
            for c in range(C):
                for a in range(k):
                    for b in range(k):
                        for e in range(k):
                            row = c * K3 + (a * k + b) * k + e
                            src = &cols[n, row, 0]
                            for od in range(Do):
                                for oh in range(Ho):
                                    drow = &gxp[n, c, a + stride * od, b + stride * oh, e]
                                    if stride == 1:
                                        for ow in range(Wo):
                                            drow[ow] += src[ow]
                                    else:
                                        for ow in range(Wo):
                                            drow[stride * ow] += src[ow]
                                    src += Wo
    return gxp_arr


# Direct convolution. Stride-1 kernels treat each (H, W) plane of the padded
# input as a flat run of Ho*Wp values: output (oh, ow) lives at oh*Wp + ow and
# the tap (b, e) is the offset b*Wp + e, so the innermost loop is one long
# contiguous axpy/dot. Columns ow >= Wo are computed and discarded.

def conv3d_forward(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] w,
                   int stride, tuple out_shape):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], Hp = xp.shape[3], Wp = xp.shape[4]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((N, O, Do, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t L = (Ho - 1) * Wp + Wo
    tmp_arr = np.zeros(Ho * Wp, dtype=dtype)
    cdef floating[::1] tmp = tmp_arr
    cdef Py_ssize_t n, o, c, a, b, e, od, oh, ow, q
    cdef floating wv
    cdef floating* t
    cdef floating* src
    cdef floating* orow
    with nogil:
        for n in range(N):
            for o in range(O):
                for od in range(Do):
                    if stride == 1:
                        t = &tmp[0]
                        for q in range(L):
                            t[q] = 0
                        for c in range(C):
                            for a in range(k):
                                for b in range(k):
                                    for e in range(k):
                                        wv = w[o, c, a, b, e]
                                        src = &xp[n, c, od + a, b, e]
                                        for q in range(L):
                                            t[q] += wv * src[q]
                        for oh in range(Ho):
                            for ow in range(Wo):
                                out[n, o, od, oh, ow] = t[oh * Wp + ow]
                    else:
                        for oh in range(Ho):
                            orow = &out[n, o, od, oh, 0]
                            for c in range(C):
                                for a in range(k):
                                    for b in range(k):
                                        for e in range(k):
                                            wv = w[o, c, a, b, e]
                                            src = &xp[n, c, stride * od + a, stride * oh + b, e]
                                            for ow in range(Wo):
                                                orow[ow] += wv * src[stride * ow]
    return out_arr


def conv3d_grad_input(floating[:, :, :, :, ::1] g, floating[:, :, :, :, ::1] w,
                      tuple xp_shape, int stride):
    """Adjoint of :func:`conv3d_forward` with respect to the padded input."""
    cdef Py_ssize_t N = g.shape[0], O = g.shape[1], Do = g.shape[2], Ho = g.shape[3], Wo = g.shape[4]
    cdef Py_ssize_t C = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t Wp = xp_shape[4]
    dtype = np.float32 if floating is float else np.float64
    gxp_arr = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t L = (Ho - 1) * Wp + Wo
    # output gradient re-laid on the padded width, zeros in the unused columns
    gext_arr = np.zeros((O, Do, Ho * Wp), dtype=dtype)
    cdef floating[:, :, ::1] gext = gext_arr
    cdef Py_ssize_t n, o, c, a, b, e, od, oh, ow, q
    cdef floating wv, gv
    cdef floating* dst
    cdef floating* gsrc
    cdef floating* grow
    with nogil:
        for n in range(N):
            if stride == 1:
                for o in range(O):
                    for od in range(Do):
                        for oh in range(Ho):
                            for ow in range(Wo):
                                gext[o, od, oh * Wp + ow] = g[n, o, od, oh, ow]
                for c in range(C):
                    for od in range(Do):
                        for a in range(k):
                            for o in range(O):
                                gsrc = &gext[o, od, 0]
                                for b in range(k):
                                    for e in range(k):
                                        wv = w[o, c, a, b, e]
                                        dst = &gxp[n, c, od + a, b, e]
                                        for q in range(L):
                                            dst[q] += wv * gsrc[q]
            else:
                for c in range(C):
                    for od in range(Do):
                        for oh in range(Ho):
                            for o in range(O):
                                grow = &g[n, o, od, oh, 0]
                                for a in range(k):
                                    for b in range(k):
                                        for e in range(k):
                                            wv = w[o, c, a, b, e]
                                            dst = &gxp[n, c, stride * od + a, stride * oh + b, e]
                                            for ow in range(Wo):
                                                dst[stride * ow] += wv * grow[ow]
    return gxp_arr


def conv3d_grad_weight(floating[:, :, :, :, ::1] g, floating[:, :, :, :, ::1] xp,
                       int k, int stride):
    """Kernel gradient.

    Products are accumulated elementwise into a plane-sized buffer over
    (n, od), which vectorizes, and the buffer is reduced once per tap.
    """
    cdef Py_ssize_t N = g.shape[0], O = g.shape[1], Do = g.shape[2], Ho = g.shape[3], Wo = g.shape[4]
    cdef Py_ssize_t C = xp.shape[1], Wp = xp.shape[4]
    dtype = np.float32 if floating is float else np.float64
    gw_arr = np.zeros((O, C, k, k, k), dtype=dtype)
    cdef floating[:, :, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t L = (Ho - 1) * Wp + Wo if stride == 1 else Ho * Wo
    gext_arr = np.zeros((N, O, Do, Ho * Wp), dtype=dtype)
    cdef floating[:, :, :, ::1] gext = gext_arr
    buf_arr = np.zeros(L, dtype=dtype)
    cdef floating[::1] buf = buf_arr
    cdef double total
    cdef Py_ssize_t n, o, c, a, b, e, od, oh, ow, q
    cdef floating* gs
    cdef floating* xs
    cdef floating* bp
    with nogil:
        if stride == 1:
            for n in range(N):
                for o in range(O):
                    for od in range(Do):
                        for oh in range(Ho):
                            for ow in range(Wo):
                                gext[n, o, od, oh * Wp + ow] = g[n, o, od, oh, ow]
        bp = &buf[0]
        for o in range(O):
            for c in range(C):
                for a in range(k):
                    for b in range(k):
                        for e in range(k):
                            for q in range(L):
                                bp[q] = 0
                            for n in range(N):
                                for od in range(Do):
                                    if stride == 1:
                                        gs = &gext[n, o, od, 0]
                                        xs = &xp[n, c, od + a, b, e]
                                        for q in range(L):
                                            bp[q] += gs[q] * xs[q]
                                    else:
                                        for oh in range(Ho):
                                            gs = &g[n, o, od, oh, 0]
                                            xs = &xp[n, c, stride * od + a, stride * oh + b, e]
                                            for ow in range(Wo):
                                                bp[oh * Wo + ow] += gs[ow] * xs[stride * ow]
                            total = 0.0
                            for q in range(L):
                                total += bp[q]
                            gw[o, c, a, b, e] = <floating>total
    return gw_arr


cdef inline double _clamp(double v, double hi) noexcept nogil:
    if v < 0.0:
        return 0.0
    if v > hi:
        return hi
    return v


def trilinear_affine(floating[:, :, ::1] src, double[:, ::1] M, tuple out_shape):
    """Sample ``src`` at ``M @ [i, j, k, 1]`` for every output index, clamping to the edge."""
    cdef Py_ssize_t D = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((Do, Ho, Wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, l, x0, y0, z0, x1, y1, z1
    cdef double cx, cy, cz, fx, fy, fz, c00, c01, c10, c11, c0, c1
    with nogil:
        for i in range(Do):
            for j in range(Ho):
                for l in range(Wo):
                    cx = _clamp(M[0, 0] * i + M[0, 1] * j + M[0, 2] * l + M[0, 3], D - 1)
                    cy = _clamp(M[1, 0] * i + M[1, 1] * j + M[1, 2] * l + M[1, 3], H - 1)
                    cz = _clamp(M[2, 0] * i + M[2, 1] * j + M[2, 2] * l + M[2, 3], W - 1)
                    x0 = <Py_ssize_t>floor(cx)
                    y0 = <Py_ssize_t>floor(cy)
                    z0 = <Py_ssize_t>floor(cz)
                    fx = cx - x0
                    fy = cy - y0
                    fz = cz - z0
                    x1 = x0 + 1 if x0 + 1 < D else D - 1
                    y1 = y0 + 1 if y0 + 1 < H else H - 1
                    z1 = z0 + 1 if z0 + 1 < W else W - 1
                    c00 = src[x0, y0, z0] + (<double>src[x1, y0, z0] - src[x0, y0, z0]) * fx
                    c01 = src[x0, y0, z1] + (<double>src[x1, y0, z1] - src[x0, y0, z1]) * fx
                    c10 = src[x0, y1, z0] + (<double>src[x1, y1, z0] - src[x0, y1, z0]) * fx
                    c11 = src[x0, y1, z1] + (<double>src[x1, y1, z1] - src[x0, y1, z1]) * fx
                    c0 = c00 + (c10 - c00) * fy
                    c1 = c01 + (c11 - c01) * fy
                    out[i, j, l] = <floating>(c0 + (c1 - c0) * fz)
    return out_arr


cdef inline Py_ssize_t _round_clamp(double v, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t r
    if v >= 0.0:
        r = <Py_ssize_t>floor(v + 0.5)
    else:
        r = -<Py_ssize_t>floor(-v + 0.5)
    if r < 0:
        return 0
    if r > n - 1:
        return n - 1
    return r


def nearest_affine(floating[:, :, ::1] src, double[:, ::1] M, tuple out_shape):
    cdef Py_ssize_t D = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((Do, Ho, Wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, l
    with nogil:
        for i in range(Do):
            for j in range(Ho):
                for l in range(Wo):
                    out[i, j, l] = src[
                        _round_clamp(M[0, 0] * i + M[0, 1] * j + M[0, 2] * l + M[0, 3], D),
                        _round_clamp(M[1, 0] * i + M[1, 1] * j + M[1, 2] * l + M[1, 3], H),
                        _round_clamp(M[2, 0] * i + M[2, 1] * j + M[2, 2] * l + M[2, 3], W)]
    return out_arr


cdef inline cnp.int32_t _find(cnp.int32_t[::1] parent, cnp.int32_t x) noexcept nogil:
    cdef cnp.int32_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


def label26(cnp.uint8_t[:, :, ::1] mask):
    """Two-pass union-find labeling with 26-connectivity.

    Labels are 1..n, numbered by first appearance in C-order scan (same as
    ``scipy.ndimage.label``); background is 0.
    """
    cdef Py_ssize_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2]
    labels_arr = np.zeros((D, H, W), dtype=np.int32)
    cdef cnp.int32_t[:, :, ::1] lab = labels_arr
    parent_arr = np.zeros(D * H * W // 2 + 2, dtype=np.int32)
    cdef cnp.int32_t[::1] parent = parent_arr
    cdef cnp.int32_t nxt = 1, cur, other, ra, rb
    cdef Py_ssize_t i, j, l, di, dj, dl, ni, nj, nl
    with nogil:
        for i in range(D):
            for j in range(H):
                for l in range(W):
                    if mask[i, j, l] == 0:
                        continue
                    cur = 0
                    # previously visited neighbours: the 13 with smaller C-order index
                    for di in range(-1, 1):
                        for dj in range(-1, 2):
                            for dl in range(-1, 2):
                                if di == 0 and (dj > 0 or (dj == 0 and dl >= 0)):
                                    continue
                                ni = i + di
                                nj = j + dj
                                nl = l + dl
                                if ni < 0 or nj < 0 or nl < 0 or nj >= H or nl >= W:
                                    continue
                                other = lab[ni, nj, nl]
                                if other == 0:
                                    continue
                                if cur == 0:
                                    cur = _find(parent, other)
                                else:
                                    ra = _find(parent, cur)
                                    rb = _find(parent, other)
                                    if ra != rb:
                                        if ra < rb:
                                            parent[rb] = ra
                                        else:
                                            parent[ra] = rb
                                        cur = ra if ra < rb else rb
                    if cur == 0:
                        if nxt >= parent.shape[0]:
                            with gil:
                                parent_arr = np.concatenate(
                                    [parent_arr, np.zeros(parent_arr.shape[0], dtype=np.int32)])
                                parent = parent_arr
                        parent[nxt] = nxt
                        cur = nxt
                        nxt += 1
                    lab[i, j, l] = cur
    # resolve roots, then renumber by first appearance
    remap_arr = np.zeros(nxt, dtype=np.int32)
    cdef cnp.int32_t[::1] remap = remap_arr
    cdef cnp.int32_t count = 0, r
    with nogil:
        for i in range(D):
            for j in range(H):
                for l in range(W):
                    cur = lab[i, j, l]
                    if cur == 0:
                        continue
                    r = _find(parent, cur)
                    if remap[r] == 0:
                        count += 1
                        remap[r] = count
                    lab[i, j, l] = remap[r]
    return labels_arr, int(count)
