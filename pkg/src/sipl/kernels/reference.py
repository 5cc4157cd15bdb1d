"""Numpy fallback kernels for 3D convolution and trilinear resampling.

The compiled module ``sipl.kernels._native`` mirrors this API function for
function; either one can serve as the active backend (see ``__init__``).

Layout conventions: volumes are channels-last ``(H, W, Z, C)`` float64 arrays,
convolution weights are ``(k, k, k, C_in, C_out)``, and all padding is
symmetric zero padding.
"""

import numpy as np


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d_forward(x, w, b, stride, pad):
    H, W, Z, ci = x.shape
    k = w.shape[0]
    co = w.shape[4]
    ho, wo, zo = (_out_extent(n, k, stride, pad) for n in (H, W, Z))
    xp = np.pad(x, ((pad, pad), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((ho, wo, zo, co))
    out[...] = b
    flat = out.reshape(-1, co)
    # One small GEMM per kernel tap avoids materializing a full im2col buffer.
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                xs = xp[
                    kx : kx + (ho - 1) * stride + 1 : stride,
                    ky : ky + (wo - 1) * stride + 1 : stride,
                    kz : kz + (zo - 1) * stride + 1 : stride,
                ]
                flat += xs.reshape(-1, ci) @ w[kx, ky, kz]
    return out


def conv3d_backward_input(g, w, stride, pad, in_shape):
    H, W, Z, ci = in_shape
    k = w.shape[0]
    co = w.shape[4]
    ho, wo, zo = g.shape[:3]
    gflat = g.reshape(-1, co)
    gxp = np.zeros((H + 2 * pad, W + 2 * pad, Z + 2 * pad, ci))
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                gxp[
                    kx : kx + (ho - 1) * stride + 1 : stride,
                    ky : ky + (wo - 1) * stride + 1 : stride,
                    kz : kz + (zo - 1) * stride + 1 : stride,
                ] += (gflat @ w[kx, ky, kz].T).reshape(ho, wo, zo, ci)
    return gxp[pad : pad + H, pad : pad + W, pad : pad + Z]


def conv3d_backward_weight(x, g, stride, pad, k):
    ci = x.shape[3]
    co = g.shape[3]
    ho, wo, zo = g.shape[:3]
    xp = np.pad(x, ((pad, pad), (pad, pad), (pad, pad), (0, 0)))
    gflat = g.reshape(-1, co)
    gw = np.empty((k, k, k, ci, co))
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                xs = xp[
                    kx : kx + (ho - 1) * stride + 1 : stride,
                    ky : ky + (wo - 1) * stride + 1 : stride,
                    kz : kz + (zo - 1) * stride + 1 : stride,
                ]
                gw[kx, ky, kz] = xs.reshape(-1, ci).T @ gflat
    gb = gflat.sum(axis=0)
    return gw, gb


def _axis_coords(n_in: int, n_out: int):
    """Corner-aligned source coordinates for one axis.

    A single output sample has no corners to align, so it reads the source
    midpoint.
    """
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    elif n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.floor(pos).astype(np.int64)
    np.clip(i0, 0, n_in - 1, out=i0)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def trilinear_forward(x, out_hwz):
    ho, wo, zo = out_hwz
    c = x.shape[3]
    ix0, ix1, fx = _axis_coords(x.shape[0], ho)
    iy0, iy1, fy = _axis_coords(x.shape[1], wo)
    iz0, iz1, fz = _axis_coords(x.shape[2], zo)
    out = np.zeros((ho, wo, zo, c))
    for ax, wx in ((ix0, 1.0 - fx), (ix1, fx)):
        for ay, wy in ((iy0, 1.0 - fy), (iy1, fy)):
            for az, wz in ((iz0, 1.0 - fz), (iz1, fz)):
                wgt = wx[:, None, None, None] * wy[None, :, None, None] * wz[None, None, :, None]
                out += x[np.ix_(ax, ay, az)] * wgt
    return out


def trilinear_backward(g, in_hwz):
    hi, wi, zi = in_hwz
    c = g.shape[3]
    ix0, ix1, fx = _axis_coords(hi, g.shape[0])
    iy0, iy1, fy = _axis_coords(wi, g.shape[1])
    iz0, iz1, fz = _axis_coords(zi, g.shape[2])
    gx = np.zeros((hi, wi, zi, c))
    for ax, wx in ((ix0, 1.0 - fx), (ix1, fx)):
        for ay, wy in ((iy0, 1.0 - fy), (iy1, fy)):
            for az, wz in ((iz0, 1.0 - fz), (iz1, fz)):
                wgt = wx[:, None, None, None] * wy[None, :, None, None] * wz[None, None, :, None]
                np.add.at(gx, np.ix_(ax, ay, az), g * wgt)
    return gx
