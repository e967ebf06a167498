"""Differentiable compute core on float64 numpy arrays.

Layout is (sample, channel, row, column) throughout. Every op has an explicit
backward; there is no autodiff graph.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import Rng

BCE_EPS = 1e-7


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_rank(name: str, x: np.ndarray, rank: int):
    if x.ndim != rank:
        raise ValueError(f"{name} must have rank {rank}, got shape {x.shape}")


def _check_stride(stride: int):
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _conv_shapes(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int):
    _check_rank("input", x, 4)
    _check_rank("kernel", kernel, 4)
    _check_stride(stride)
    if pad < 0:
        raise ValueError(f"zero_pad must be non-negative, got {pad}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"channel mismatch: input has {c} channels, kernel expects {kc}")
    if kh > h + 2 * pad:
        raise ValueError(f"kernel height {kh} exceeds padded input height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise ValueError(f"kernel width {kw} exceeds padded input width {w + 2 * pad}")
    return n, c, h, w, f, kh, kw


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, kernel, bias=None, stride: int = 1, zero_pad: int = 0) -> np.ndarray:
    """Cross-correlation of x[N,C,H,W] with kernel[F,C,kh,kw]."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    n, c, h, w, f, kh, kw = _conv_shapes(x, kernel, stride, zero_pad)
    ho = conv_output_size(h, kh, stride, zero_pad)
    wo = conv_output_size(w, kw, stride, zero_pad)
    cols = _im2col(_pad(x, zero_pad), kh, kw, stride)
    out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ValueError(f"bias must have shape ({f},), got {bias.shape}")
        out += bias[None, :, None, None]
    return out


def _im2col(xp, kh, kw, stride):
    """View [N,C,Ho,Wo,kh,kw] of the padded input; no copy."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_input_grad(grad_out, kernel, in_hw, stride, pad):
    n, f, ho, wo = grad_out.shape
    _, c, kh, kw = kernel.shape
    h, w = in_hw
    cols = np.tensordot(grad_out, kernel, axes=([1], [0]))  # [N,Ho,Wo,C,kh,kw]
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    if pad:
        return gxp[:, :, pad:pad + h, pad:pad + w]
    return gxp


def _conv_kernel_grad(x, grad_out, kh, kw, stride, pad):
    ho, wo = grad_out.shape[2:]
    cols = _im2col(_pad(x, pad), kh, kw, stride)[:, :, :ho, :wo]
    return np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_backward(grad_out, x, kernel, stride: int = 1, zero_pad: int = 0):
    """Returns (grad_input, grad_kernel, grad_bias) for conv2d."""
    grad_out = as_tensor(grad_out)
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    n, c, h, w, f, kh, kw = _conv_shapes(x, kernel, stride, zero_pad)
    expected = (n, f, conv_output_size(h, kh, stride, zero_pad), conv_output_size(w, kw, stride, zero_pad))
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv2d output shape {expected}")
    gx = _conv_input_grad(grad_out, kernel, (h, w), stride, zero_pad)
    gk = _conv_kernel_grad(x, grad_out, kh, kw, stride, zero_pad)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gk, gb


def _deconv_shapes(x, kernel, stride, pad):
    _check_rank("input", x, 4)
    _check_rank("kernel", kernel, 4)
    _check_stride(stride)
    if pad < 0:
        raise ValueError(f"zero_pad must be non-negative, got {pad}")
    n, c, h, w = x.shape
    kc, f, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"channel mismatch: input has {c} channels, kernel expects {kc}")
    ho = deconv_output_size(h, kh, stride, pad)
    wo = deconv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"padding {pad} too large for kernel {kh}x{kw}: output would be {ho}x{wo}")
    return n, c, h, w, f, kh, kw, ho, wo


def deconv2d(x, kernel, bias=None, stride: int = 1, zero_pad: int = 0) -> np.ndarray:
    """Transposed convolution; kernel is [C_in, C_out, kh, kw].

    This is exactly the adjoint of ``conv2d`` with the same kernel, stride and
    padding, so ``<conv2d(a, k), b> == <a, deconv2d(b, k)>``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    n, c, h, w, f, kh, kw, ho, wo = _deconv_shapes(x, kernel, stride, zero_pad)
    out = _conv_input_grad(x, kernel, (ho, wo), stride, zero_pad)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ValueError(f"bias must have shape ({f},), got {bias.shape}")
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def deconv2d_backward(grad_out, x, kernel, stride: int = 1, zero_pad: int = 0):
    """Returns (grad_input, grad_kernel, grad_bias) for deconv2d."""
    grad_out = as_tensor(grad_out)
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    n, c, h, w, f, kh, kw, ho, wo = _deconv_shapes(x, kernel, stride, zero_pad)
    if grad_out.shape != (n, f, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match deconv2d output shape {(n, f, ho, wo)}")
    # roles swap: the deconv input plays conv's grad_out, its output plays conv's input
    gx = conv2d(grad_out, kernel, None, stride, zero_pad)
    gk = _conv_kernel_grad(grad_out, x, kh, kw, stride, zero_pad)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gk, gb


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(grad_out, x) -> np.ndarray:
    return np.where(as_tensor(x) > 0, grad_out, 0.0)


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y) -> np.ndarray:
    """Backward of sigmoid given its output y."""
    y = as_tensor(y)
    return grad_out * y * (1.0 - y)


def bce_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to pred."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (p - target) / (p * (1.0 - p)) / n
    # clamp has zero derivative outside its range
    grad[(pred < BCE_EPS) | (pred > 1.0 - BCE_EPS)] = 0.0
    return float(loss), grad


def sigmoid_bce_backward(y, target) -> np.ndarray:
    """Gradient of mean BCE(sigmoid(z), target) with respect to the logits z.

    Equals chaining ``bce_loss`` and ``sigmoid_backward`` inside the clamp
    range, but stays nonzero for saturated outputs so a head pushed past the
    clamp can still recover.
    """
    y = as_tensor(y)
    target = as_tensor(target)
    if y.shape != target.shape:
        raise ValueError(f"pred shape {y.shape} != target shape {target.shape}")
    return (y - target) / y.size


def sgd_step(params, grads, lr: float, locked=None) -> np.ndarray:
    """One SGD update; entries flagged in ``locked`` are left untouched."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    params = as_tensor(params)
    grads = as_tensor(grads)
    if params.shape != grads.shape:
        raise ValueError(f"params shape {params.shape} != grads shape {grads.shape}")
    update = lr * grads
    if locked is not None:
        locked = np.asarray(locked, dtype=bool)
        if locked.shape != params.shape:
            raise ValueError(f"locked mask shape {locked.shape} != params shape {params.shape}")
        update = np.where(locked, 0.0, update)
    return params - update


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))
