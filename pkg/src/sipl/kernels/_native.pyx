# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for 3D convolution and trilinear resampling.

Same API and layout conventions as ``sipl.kernels.reference``. Loops are
ordered tap-major with precomputed valid output ranges, so the innermost
channel loops run branch-free over contiguous memory.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline long _lo(long kk, long pad, long stride) noexcept:
    # smallest xo with xo*stride + kk - pad >= 0
    cdef long v = pad - kk
    if v <= 0:
        return 0
    return (v + stride - 1) // stride


cdef inline long _hi(long kk, long pad, long stride, long n_in, long n_out) noexcept:
    # one past the largest xo with xo*stride + kk - pad <= n_in - 1
    cdef long v = (n_in - 1 - kk + pad) // stride + 1
    if v > n_out:
        return n_out
    if v < 0:
        return 0
    return v


def conv3d_forward(object x_obj, object w_obj, object b_obj, int stride, int pad):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_obj)
    cdef double[:, :, :, :, ::1] w = np.ascontiguousarray(w_obj)
    cdef double[::1] b = np.ascontiguousarray(b_obj)
    cdef long H = x.shape[0], W = x.shape[1], Z = x.shape[2], ci = x.shape[3]
    cdef long k = w.shape[0], co = w.shape[4]
    cdef long ho = (H + 2 * pad - k) // stride + 1
    cdef long wo = (W + 2 * pad - k) // stride + 1
    cdef long zo = (Z + 2 * pad - k) // stride + 1
    out_arr = np.empty((ho, wo, zo, co))
    out_arr[...] = np.asarray(b_obj)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long kx, ky, kz, xo, yo, zz, xi, yi, zi, c_in, c_out
    cdef long x0, x1, y0, y1, z0, z1
    cdef double v
    for kx in range(k):
        x0 = _lo(kx, pad, stride); x1 = _hi(kx, pad, stride, H, ho)
        for ky in range(k):
            y0 = _lo(ky, pad, stride); y1 = _hi(ky, pad, stride, W, wo)
            for kz in range(k):
                z0 = _lo(kz, pad, stride); z1 = _hi(kz, pad, stride, Z, zo)
                for xo in range(x0, x1):
                    xi = xo * stride + kx - pad
                    for yo in range(y0, y1):
                        yi = yo * stride + ky - pad
                        for zz in range(z0, z1):
                            zi = zz * stride + kz - pad
                            for c_in in range(ci):
                                v = x[xi, yi, zi, c_in]
                                for c_out in range(co):
                                    out[xo, yo, zz, c_out] += v * w[kx, ky, kz, c_in, c_out]
    return out_arr


def conv3d_backward_input(object g_obj, object w_obj, int stride, int pad, tuple in_shape):
    cdef double[:, :, :, ::1] g = np.ascontiguousarray(g_obj)
    # transpose to (k, k, k, co, ci) so the innermost write loop is contiguous
    cdef double[:, :, :, :, ::1] wt = np.ascontiguousarray(np.transpose(w_obj, (0, 1, 2, 4, 3)))
    cdef long H = in_shape[0], W = in_shape[1], Z = in_shape[2], ci = in_shape[3]
    cdef long k = wt.shape[0], co = wt.shape[3]
    cdef long ho = g.shape[0], wo = g.shape[1], zo = g.shape[2]
    gx_arr = np.zeros((H, W, Z, ci))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef long kx, ky, kz, xo, yo, zz, xi, yi, zi, c_in, c_out
    cdef long x0, x1, y0, y1, z0, z1
    cdef double gv
    for kx in range(k):
        x0 = _lo(kx, pad, stride); x1 = _hi(kx, pad, stride, H, ho)
        for ky in range(k):
            y0 = _lo(ky, pad, stride); y1 = _hi(ky, pad, stride, W, wo)
            for kz in range(k):
                z0 = _lo(kz, pad, stride); z1 = _hi(kz, pad, stride, Z, zo)
                for xo in range(x0, x1):
                    xi = xo * stride + kx - pad
                    for yo in range(y0, y1):
                        yi = yo * stride + ky - pad
                        for zz in range(z0, z1):
                            zi = zz * stride + kz - pad
                            for c_out in range(co):
                                gv = g[xo, yo, zz, c_out]
                                for c_in in range(ci):
                                    gx[xi, yi, zi, c_in] += gv * wt[kx, ky, kz, c_out, c_in]
    return gx_arr


def conv3d_backward_weight(object x_obj, object g_obj, int stride, int pad, int k):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_obj)
    cdef double[:, :, :, ::1] g = np.ascontiguousarray(g_obj)
    cdef long H = x.shape[0], W = x.shape[1], Z = x.shape[2], ci = x.shape[3]
    cdef long co = g.shape[3]
    cdef long ho = g.shape[0], wo = g.shape[1], zo = g.shape[2]
    gw_arr = np.zeros((k, k, k, ci, co))
    gb_arr = np.zeros(co)
    cdef double[:, :, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef long kx, ky, kz, xo, yo, zz, xi, yi, zi, c_in, c_out
    cdef long x0, x1, y0, y1, z0, z1
    cdef double v
    for xo in range(ho):
        for yo in range(wo):
            for zz in range(zo):
                for c_out in range(co):
                    gb[c_out] += g[xo, yo, zz, c_out]
    for kx in range(k):
        x0 = _lo(kx, pad, stride); x1 = _hi(kx, pad, stride, H, ho)
        for ky in range(k):
            y0 = _lo(ky, pad, stride); y1 = _hi(ky, pad, stride, W, wo)
            for kz in range(k):
                z0 = _lo(kz, pad, stride); z1 = _hi(kz, pad, stride, Z, zo)
                for xo in range(x0, x1):
                    xi = xo * stride + kx - pad
                    for yo in range(y0, y1):
                        yi = yo * stride + ky - pad
                        for zz in range(z0, z1):
                            zi = zz * stride + kz - pad
                            for c_in in range(ci):
                                v = x[xi, yi, zi, c_in]
                                for c_out in range(co):
                                    gw[kx, ky, kz, c_in, c_out] += v * g[xo, yo, zz, c_out]
    return gw_arr, gb_arr


cdef void _axis_coords(long n_in, long n_out, long[::1] i0, long[::1] i1, double[::1] frac) noexcept:
    cdef long i
    cdef double pos, scale
    if n_out == 1:
        pos = (n_in - 1) / 2.0
        i0[0] = <long> pos
        i1[0] = i0[0] + 1 if i0[0] + 1 < n_in else n_in - 1
        frac[0] = pos - i0[0]
        return
    scale = 0.0 if n_in == 1 else (n_in - 1.0) / (n_out - 1.0)
    for i in range(n_out):
        pos = i * scale
        i0[i] = <long> pos
        if i0[i] > n_in - 1:
            i0[i] = n_in - 1
        i1[i] = i0[i] + 1 if i0[i] + 1 < n_in else n_in - 1
        frac[i] = pos - i0[i]


def trilinear_forward(object x_obj, tuple out_hwz):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_obj)
    cdef long hi = x.shape[0], wi = x.shape[1], zi = x.shape[2], c = x.shape[3]
    cdef long ho = out_hwz[0], wo = out_hwz[1], zo = out_hwz[2]
    cdef long[::1] ix0 = np.empty(ho, dtype=np.int64), ix1 = np.empty(ho, dtype=np.int64)
    cdef long[::1] iy0 = np.empty(wo, dtype=np.int64), iy1 = np.empty(wo, dtype=np.int64)
    cdef long[::1] iz0 = np.empty(zo, dtype=np.int64), iz1 = np.empty(zo, dtype=np.int64)
    cdef double[::1] fx = np.empty(ho), fy = np.empty(wo), fz = np.empty(zo)
    _axis_coords(hi, ho, ix0, ix1, fx)
    _axis_coords(wi, wo, iy0, iy1, fy)
    _axis_coords(zi, zo, iz0, iz1, fz)
    out_arr = np.empty((ho, wo, zo, c))
    cdef double[:, :, :, ::1] out = out_arr
    cdef long i, j, m, ch
    cdef long x0, x1, y0, y1, z0, z1
    cdef double ax, ay, az, w000, w001, w010, w011, w100, w101, w110, w111
    for i in range(ho):
        x0 = ix0[i]; x1 = ix1[i]; ax = fx[i]
        for j in range(wo):
            y0 = iy0[j]; y1 = iy1[j]; ay = fy[j]
            for m in range(zo):
                z0 = iz0[m]; z1 = iz1[m]; az = fz[m]
                w000 = (1 - ax) * (1 - ay) * (1 - az)
                w001 = (1 - ax) * (1 - ay) * az
                w010 = (1 - ax) * ay * (1 - az)
                w011 = (1 - ax) * ay * az
                w100 = ax * (1 - ay) * (1 - az)
                w101 = ax * (1 - ay) * az
                w110 = ax * ay * (1 - az)
                w111 = ax * ay * az
                for ch in range(c):
                    out[i, j, m, ch] = (
                        w000 * x[x0, y0, z0, ch] + w001 * x[x0, y0, z1, ch]
                        + w010 * x[x0, y1, z0, ch] + w011 * x[x0, y1, z1, ch]
                        + w100 * x[x1, y0, z0, ch] + w101 * x[x1, y0, z1, ch]
                        + w110 * x[x1, y1, z0, ch] + w111 * x[x1, y1, z1, ch]
                    )
    return out_arr


def trilinear_backward(object g_obj, tuple in_hwz):
    cdef double[:, :, :, ::1] g = np.ascontiguousarray(g_obj)
    cdef long ho = g.shape[0], wo = g.shape[1], zo = g.shape[2], c = g.shape[3]
    cdef long hi = in_hwz[0], wi = in_hwz[1], zi = in_hwz[2]
    cdef long[::1] ix0 = np.empty(ho, dtype=np.int64), ix1 = np.empty(ho, dtype=np.int64)
    cdef long[::1] iy0 = np.empty(wo, dtype=np.int64), iy1 = np.empty(wo, dtype=np.int64)
    cdef long[::1] iz0 = np.empty(zo, dtype=np.int64), iz1 = np.empty(zo, dtype=np.int64)
    cdef double[::1] fx = np.empty(ho), fy = np.empty(wo), fz = np.empty(zo)
    _axis_coords(hi, ho, ix0, ix1, fx)
    _axis_coords(wi, wo, iy0, iy1, fy)
    _axis_coords(zi, zo, iz0, iz1, fz)
    gx_arr = np.zeros((hi, wi, zi, c))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef long i, j, m, ch
    cdef long x0, x1, y0, y1, z0, z1
    cdef double ax, ay, az, gv
    for i in range(ho):
        x0 = ix0[i]; x1 = ix1[i]; ax = fx[i]
        for j in range(wo):
            y0 = iy0[j]; y1 = iy1[j]; ay = fy[j]
            for m in range(zo):
                z0 = iz0[m]; z1 = iz1[m]; az = fz[m]
                for ch in range(c):
                    gv = g[i, j, m, ch]
                    gx[x0, y0, z0, ch] += gv * (1 - ax) * (1 - ay) * (1 - az)
                    gx[x0, y0, z1, ch] += gv * (1 - ax) * (1 - ay) * az
                    gx[x0, y1, z0, ch] += gv * (1 - ax) * ay * (1 - az)
                    gx[x0, y1, z1, ch] += gv * (1 - ax) * ay * az
                    gx[x1, y0, z0, ch] += gv * ax * (1 - ay) * (1 - az)
                    gx[x1, y0, z1, ch] += gv * ax * (1 - ay) * az
                    gx[x1, y1, z0, ch] += gv * ax * ay * (1 - az)
                    gx[x1, y1, z1, ch] += gv * ax * ay * az
    return gx_arr
