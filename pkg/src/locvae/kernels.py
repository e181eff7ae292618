"""Raw-array 3D convolution kernels.

All arrays are float64 and 5-D: ``(N, C, D, H, W)`` for activations,
``(C_out, C_in, k, k, k)`` for kernels.  The forward pass and the input
gradient exist twice: a numba loop nest and a numpy shift-and-accumulate
version.  Both add the taps of an output voxel in the same (channel, kd, kh,
kw) order as a naive loop, so they agree bit-for-bit with each other and with
such a loop.  The weight gradient is a reduction over batch and space and
goes through BLAS (``tensordot``) on either backend.

``LOCVAE_DISABLE_NUMBA=1`` selects the numpy versions.
"""
from __future__ import annotations

import numpy as np

from ._jit import NUMBA_AVAILABLE, USE_NUMBA, njit


def output_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def transposed_extent(size: int, k: int, stride: int, padding: int) -> int:
    out = (size - 1) * stride - 2 * padding + k
    if out < 1:
        raise ValueError(f"transposed extent for input {size} is not positive")
    return out


# ---------------------------------------------------------------------------
# numba loop nests


@njit
def _conv_forward_nb(x, w, out, stride, pad):
    N, Ci, D, H, W = x.shape
    Co, _, kd, kh, kw = w.shape
    Do, Ho, Wo = out.shape[2], out.shape[3], out.shape[4]
    for n in range(N):
        for co in range(Co):
            for ci in range(Ci):
                for a in range(kd):
                    for b in range(kh):
                        for c in range(kw):
                            wv = w[co, ci, a, b, c]
                            for od in range(Do):
                                id_ = od * stride + a - pad
                                if id_ < 0 or id_ >= D:
                                    continue
                                for oh in range(Ho):
                                    ih = oh * stride + b - pad
                                    if ih < 0 or ih >= H:
                                        continue
                                    for ow in range(Wo):
                                        iw = ow * stride + c - pad
                                        if iw < 0 or iw >= W:
                                            continue
                                        out[n, co, od, oh, ow] += wv * x[n, ci, id_, ih, iw]


@njit
def _conv_input_grad_nb(gy, w, gx, stride, pad):
    N, Co, Do, Ho, Wo = gy.shape
    _, Ci, kd, kh, kw = w.shape
    D, H, W = gx.shape[2], gx.shape[3], gx.shape[4]
    for n in range(N):
        for ci in range(Ci):
            for co in range(Co):
                for a in range(kd):
                    for b in range(kh):
                        for c in range(kw):
                            wv = w[co, ci, a, b, c]
                            for od in range(Do):
                                id_ = od * stride + a - pad
                                if id_ < 0 or id_ >= D:
                                    continue
                                for oh in range(Ho):
                                    ih = oh * stride + b - pad
                                    if ih < 0 or ih >= H:
                                        continue
                                    for ow in range(Wo):
                                        iw = ow * stride + c - pad
                                        if iw < 0 or iw >= W:
                                            continue
                                        gx[n, ci, id_, ih, iw] += wv * gy[n, co, od, oh, ow]


# ---------------------------------------------------------------------------
# numpy shift-and-accumulate


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _window(arr, a, b, c, stride, out_spatial):
    Do, Ho, Wo = out_spatial
    return arr[
        :,
        :,
        a : a + stride * (Do - 1) + 1 : stride,
        b : b + stride * (Ho - 1) + 1 : stride,
        c : c + stride * (Wo - 1) + 1 : stride,
    ]


def _conv_forward_np(x, w, out, stride, pad):
    xp = _pad(x, pad)
    Ci = x.shape[1]
    _, _, kd, kh, kw = w.shape
    spatial = out.shape[2:]
    for ci in range(Ci):
        xc = xp[:, ci : ci + 1]
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    xs = _window(xc, a, b, c, stride, spatial)
                    out += w[:, ci, a, b, c].reshape(1, -1, 1, 1, 1) * xs


def _conv_input_grad_np(gy, w, gx, stride, pad):
    N, Ci, D, H, W = gx.shape
    gxp = np.zeros((N, Ci, D + 2 * pad, H + 2 * pad, W + 2 * pad))
    Co = gy.shape[1]
    _, _, kd, kh, kw = w.shape
    spatial = gy.shape[2:]
    for co in range(Co):
        g = gy[:, co : co + 1]
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    _window(gxp, a, b, c, stride, spatial)[...] += w[co, :, a, b, c].reshape(1, -1, 1, 1, 1) * g
    gx += gxp[:, :, pad : pad + D, pad : pad + H, pad : pad + W]


def _conv_weight_grad_np(x, gy, gw, stride, pad):
    xp = _pad(x, pad)
    kd, kh, kw = gw.shape[2:]
    spatial = gy.shape[2:]
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                xs = _window(xp, a, b, c, stride, spatial)
                gw[:, :, a, b, c] = np.tensordot(gy, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


# ---------------------------------------------------------------------------
# dispatch

BACKENDS = {
    "numba": (_conv_forward_nb, _conv_input_grad_nb),
    "numpy": (_conv_forward_np, _conv_input_grad_np),
}
_fwd, _igrad = BACKENDS["numba" if USE_NUMBA else "numpy"]
ACTIVE_BACKEND = "numba" if USE_NUMBA else "numpy"


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation of ``x`` with ``w`` (no bias)."""
    k = w.shape[2:]
    out_spatial = tuple(output_extent(s, kk, stride, pad) for s, kk in zip(x.shape[2:], k))
    out = np.zeros((x.shape[0], w.shape[0]) + out_spatial)
    _fwd(np.ascontiguousarray(x), np.ascontiguousarray(w), out, stride, pad)
    return out


def conv_input_grad(gy, w, stride, pad, in_spatial) -> np.ndarray:
    """Adjoint of ``conv_forward`` in its input; also the transposed convolution."""
    gx = np.zeros((gy.shape[0], w.shape[1]) + tuple(in_spatial))
    _igrad(np.ascontiguousarray(gy), np.ascontiguousarray(w), gx, stride, pad)
    return gx


def conv_weight_grad(x, gy, stride, pad, k) -> np.ndarray:
    gw = np.zeros((gy.shape[1], x.shape[1]) + tuple(k))
    _conv_weight_grad_np(x, gy, gw, stride, pad)
    return gw


def avg_pool(x: np.ndarray, window: int) -> np.ndarray:
    N, C, D, H, W = x.shape
    if D % window or H % window or W % window:
        raise ValueError(f"spatial extent {(D, H, W)} not divisible by pooling window {window}")
    r = x.reshape(N, C, D // window, window, H // window, window, W // window, window)
    return r.mean(axis=(3, 5, 7))


def avg_pool_grad(g: np.ndarray, window: int) -> np.ndarray:
    return upsample(g, window) / window**3


def upsample(x: np.ndarray, factor: int) -> np.ndarray:
    return x.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)


def upsample_grad(g: np.ndarray, factor: int) -> np.ndarray:
    N, C, D, H, W = g.shape
    r = g.reshape(N, C, D // factor, factor, H // factor, factor, W // factor, factor)
    return r.sum(axis=(3, 5, 7))
