"""Differentiable ops needed by the supervise, transfer and discriminator nets."""
from __future__ import annotations

import numpy as np

from . import conv as K
from .tensor import Tensor, make_result

BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


def _check_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    _check_4d(x, "conv2d input")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ic}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}")
    ho, wo = K.conv_out_size(h, kh, stride, pad), K.conv_out_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: zero-size output {ho}x{wo}")
    out = K.conv2d_forward(x.data, weight.data, stride, pad)
    if bias is not None:
        out += bias.data.reshape(1, oc, 1, 1)

    def backward(g):
        gx = K.conv2d_grad_input(g, weight.data, (h, w), stride, pad) if x.requires_grad else None
        gw = K.conv2d_grad_weight(g, x.data, kh, kw, stride, pad) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (in_channels, out_channels, kh, kw).

    The forward pass is exactly the input-gradient of :func:`conv2d` with the
    same geometry.
    """
    _check_4d(x, "conv_transpose2d input")
    n, c, h, w = x.shape
    ic, oc, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but weight expects {ic}")
    ho, wo = K.deconv_out_size(h, kh, stride, pad), K.deconv_out_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: negative or zero output size {ho}x{wo}")
    out = K.conv2d_grad_input(x.data, weight.data, (ho, wo), stride, pad)
    if bias is not None:
        out += bias.data.reshape(1, oc, 1, 1)

    def backward(g):
        gx = K.conv2d_forward(g, weight.data, stride, pad) if x.requires_grad else None
        # conv2d weight-gradient with the roles of g and x swapped gives (ic, oc, kh, kw)
        gw = K.conv2d_grad_weight(x.data, g, kh, kw, stride, pad) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result("conv_transpose2d", out, inputs, backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode ``running_mean``/``running_var`` are updated in place
    (exponential moving average, unbiased variance).
    """
    _check_4d(x, "batchnorm2d input")
    n, c, h, w = x.shape
    m = n * h * w
    shape = (1, c, 1, 1)
    g4 = gamma.data.reshape(shape)
    if training:
        if m < 2:
            raise ShapeError("batchnorm2d: train mode needs n*h*w >= 2 per channel (variance is degenerate)")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * (m / (m - 1))).astype(running_var.dtype)
    else:
        inv_std = 1.0 / np.sqrt(running_var.astype(x.dtype) + eps)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
    inv_std = inv_std.astype(x.dtype)
    xhat = xhat.astype(x.dtype)
    out = xhat * g4 + beta.data.reshape(shape)

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * g4
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std.reshape(shape) / m * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return make_result("batchnorm2d", out, (x, gamma, beta), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(pos, g, g * x.dtype.type(slope)),)

    return make_result("leaky_relu", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)

    def backward(g):
        return (np.where(pos, g, 0).astype(g.dtype),)

    return make_result("relu", out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1 - out * out),)

    return make_result("tanh", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return make_result("sigmoid", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat input a")
    _check_4d(b, "concat input b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_result("concat_channels", out, (a, b), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result("slice_channels", out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return make_result("add", a.data + b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)

    def backward(g):
        return (g * c,)

    return make_result("scale", x.data * c, (x,), backward)


def add_scalars(*terms: Tensor) -> Tensor:
    """Sum of several scalar tensors."""
    out = terms[0].data.copy()
    for t in terms[1:]:
        out = out + t.data

    def backward(g):
        return tuple(g for _ in terms)

    return make_result("add_scalars", out, terms, backward)


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) with ``w`` constant; handy for gradient checks."""
    w = np.broadcast_to(np.asarray(w, dtype=x.dtype), x.shape)
    out = np.asarray(np.sum(x.data * w), dtype=x.dtype)

    def backward(g):
        return (g * w,)

    return make_result("weighted_sum", out, (x,), backward)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; no gradient reaches ``target``."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def backward(g):
        return (np.sign(diff).astype(pred.dtype) * (g / n),)

    return make_result("l1_loss", out, (pred,), backward)


def bce_loss(prob: Tensor, label) -> Tensor:
    """Mean binary cross-entropy of per-sample probabilities against 0/1 labels.

    Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP]; clamped entries
    pass no gradient.
    """
    p = prob.data
    lab = np.asarray(label, dtype=np.float64)
    lab = lab.reshape(p.shape) if lab.size == p.size else np.broadcast_to(lab, p.shape)
    p64 = p.astype(np.float64)
    pc = np.clip(p64, BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.size
    out = np.asarray(-np.mean(lab * np.log(pc) + (1 - lab) * np.log1p(-pc)), dtype=prob.dtype)
    inside = (p64 >= BCE_CLAMP) & (p64 <= 1 - BCE_CLAMP)

    def backward(g):
        dp = (-lab / pc + (1 - lab) / (1 - pc)) / n * inside
        return ((dp * g).astype(prob.dtype),)

    return make_result("bce_loss", out, (prob,), backward)
