"""Raw numpy convolution kernels (no tape).

The fast path gathers kernel-sized windows with ``sliding_window_view`` and
contracts them against the weight in one ``tensordot``. Scatter-back
(``col2im``) loops over the kh*kw kernel offsets only, which keeps it
vectorised over batch, channel and space. ``conv2d_direct`` is the slow
reference used by the tests.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """View of shape (n, c, ho, wo, kh, kw); no copy."""
    xp = _pad(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`windows`: scatter-add (n, c, ho, wo, kh, kw) into (n, c, h, w)."""
    n, c, ho, wo, kh, kw = cols.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    if pad:
        out = out[:, :, pad:hp - pad, pad:wp - pad]
    return np.ascontiguousarray(out)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = windows(x, kh, kw, stride, pad)
    out = np.tensordot(win, w, axes=((1, 4, 5), (1, 2, 3)))  # n, ho, wo, oc
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, pad: int) -> np.ndarray:
    """Vector-Jacobian product of conv2d w.r.t. its input."""
    cols = np.tensordot(g, w, axes=((1,), (0,)))  # n, ho, wo, ic, kh, kw
    return col2im(cols.transpose(0, 3, 1, 2, 4, 5), in_hw[0], in_hw[1], stride, pad)


def conv2d_grad_weight(g: np.ndarray, x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    win = windows(x, kh, kw, stride, pad)
    ho, wo = g.shape[2:]
    win = win[:, :, :ho, :wo]
    return np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))  # oc, ic, kh, kw


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int) -> np.ndarray:
    """Plain nested-loop convolution; reference only."""
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    xp = _pad(x, pad)
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(wd, kw, stride, pad)
    out = np.zeros((n, oc, ho, wo), dtype=np.float64)
    for bi in range(n):
        for o in range(oc):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[bi, o, i, j] = np.sum(patch * w[o])
            if b is not None:
                out[bi, o] += b[o]
    return out.astype(x.dtype)
