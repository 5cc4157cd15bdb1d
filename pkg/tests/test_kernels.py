"""Kernel backends: loop oracles for convolution, parity between implementations."""

import numpy as np
import pytest

from sipl.kernels import reference

try:
    from sipl.kernels import _native
except ImportError:
    _native = None

needs_native = pytest.mark.skipif(_native is None, reason="compiled kernels not built")


def conv3d_loop_oracle(x, w, b, stride, pad):
    H, W, Z, ci = x.shape
    k = w.shape[0]
    co = w.shape[4]
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    zo = (Z + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, zo, co))
    for xo in range(ho):
        for yo in range(wo):
            for zz in range(zo):
                for c_out in range(co):
                    acc = b[c_out]
                    for kx in range(k):
                        for ky in range(k):
                            for kz in range(k):
                                xi, yi, zi = xo * stride + kx - pad, yo * stride + ky - pad, zz * stride + kz - pad
                                if 0 <= xi < H and 0 <= yi < W and 0 <= zi < Z:
                                    for c_in in range(ci):
                                        acc += x[xi, yi, zi, c_in] * w[kx, ky, kz, c_in, c_out]
                    out[xo, yo, zz, c_out] = acc
    return out


@pytest.mark.parametrize("stride,shape", [(1, (4, 5, 3)), (2, (6, 4, 4)), (2, (5, 5, 5))])
def test_conv_forward_matches_loop_oracle(stride, shape):
    rng = np.random.default_rng(hash((stride, shape)) % 2**32)
    x = rng.normal(size=shape + (3,))
    w = rng.normal(size=(3, 3, 3, 3, 2))
    b = rng.normal(size=2)
    want = conv3d_loop_oracle(x, w, b, stride, 1)
    assert np.abs(reference.conv3d_forward(x, w, b, stride, 1) - want).max() < 1e-10


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_matches_transpose_identity(stride):
    # <conv(x), g> must equal <x, conv_backward_input(g)> and likewise for weights
    rng = np.random.default_rng(41 + stride)
    x = rng.normal(size=(6, 5, 4, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    b = np.zeros(3)
    y = reference.conv3d_forward(x, w, b, stride, 1)
    g = rng.normal(size=y.shape)
    gx = reference.conv3d_backward_input(g, w, stride, 1, x.shape)
    assert abs((y * g).sum() - (x * gx).sum()) < 1e-8
    gw, gb = reference.conv3d_backward_weight(x, g, stride, 1, 3)
    assert abs((y * g).sum() - (w * gw).sum()) < 1e-8
    assert np.allclose(gb, g.sum(axis=(0, 1, 2)), atol=1e-12)


@needs_native
@pytest.mark.parametrize("seed", range(6))
def test_native_matches_reference(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(3, 9, size=3))
    ci, co = rng.integers(1, 5, size=2)
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=shape + (ci,))
    w = rng.normal(size=(3, 3, 3, ci, co))
    b = rng.normal(size=co)
    yr = reference.conv3d_forward(x, w, b, stride, 1)
    yn = _native.conv3d_forward(x, w, b, stride, 1)
    assert np.abs(yr - yn).max() < 1e-12
    g = np.ascontiguousarray(rng.normal(size=yr.shape))
    assert np.abs(
        reference.conv3d_backward_input(g, w, stride, 1, x.shape)
        - _native.conv3d_backward_input(g, w, stride, 1, tuple(x.shape))
    ).max() < 1e-12
    gwr, gbr = reference.conv3d_backward_weight(x, g, stride, 1, 3)
    gwn, gbn = _native.conv3d_backward_weight(x, g, stride, 1, 3)
    assert np.abs(gwr - gwn).max() < 1e-12
    assert np.abs(gbr - gbn).max() < 1e-12

    out_shape = tuple(rng.integers(1, 10, size=3))
    tr = reference.trilinear_forward(x, out_shape)
    tn = _native.trilinear_forward(x, out_shape)
    assert np.abs(tr - tn).max() < 1e-12
    gt = np.ascontiguousarray(rng.normal(size=tr.shape))
    assert np.abs(
        reference.trilinear_backward(gt, shape) - _native.trilinear_backward(gt, tuple(shape))
    ).max() < 1e-12


def test_backend_env_var_selects_reference():
    import subprocess
    import sys

    out = subprocess.run(
        [sys.executable, "-c", "import sipl; print(sipl.backend_name())"],
        env={"PATH": "/usr/bin:/bin", "SIPL_KERNELS": "reference"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "reference"


def test_trilinear_downsample_to_single_cell_reads_midpoint():
    x = np.zeros((4, 4, 4, 1))
    x[1:3, 1:3, 1:3, 0] = 1.0  # center block
    out = reference.trilinear_forward(x, (1, 1, 1))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 1.0  # midpoint (1.5,1.5,1.5) interpolates inside the block


def test_trilinear_adjoint_identity():
    rng = np.random.default_rng(77)
    x = rng.normal(size=(3, 4, 5, 2))
    y = reference.trilinear_forward(x, (6, 2, 7))
    g = rng.normal(size=y.shape)
    gx = reference.trilinear_backward(g, (3, 4, 5))
    assert abs((y * g).sum() - (x * gx).sum()) < 1e-10
