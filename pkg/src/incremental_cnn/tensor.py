"""Numeric kernels for dense N×C×H×W arrays.

Tensors are plain :class:`numpy.ndarray` objects in row-major order. Every
kernel is dtype-preserving, so training runs in float32 while gradient checks
run the same code in float64. No kernel mutates its inputs.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DataError, DimensionError


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if not 1 <= x.ndim <= 4:
        raise DimensionError(f"{name} must have 1-4 dimensions, got shape {x.shape}")
    if any(d < 1 for d in x.shape):
        raise DimensionError(f"{name} has a zero-length dimension: {x.shape}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output length of a strided, zero-padded window sweep.

    Raises ConfigurationError unless the windows tile the padded input exactly.
    """
    if stride < 1 or pad < 0 or kernel < 1:
        raise ConfigurationError(f"invalid geometry: kernel={kernel} stride={stride} pad={pad}")
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"non-integer output size: (size {size} + 2*{pad} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold receptive fields per image.

    Returns ``(cols, hout, wout)`` where ``cols`` has shape
    ``(N, C*kh*kw, hout*wout)``, rows ordered (c, u, v) and columns (i, j).
    """
    n, c, h, w = x.shape
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(w, kw, stride, pad)
    win = sliding_window_view(_pad(x, pad), (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :hout, :wout]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, hout * wout)
    return cols, hout, wout


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 0, return_cols: bool = False):
    """Cross-correlation of ``x`` (N×Cin×H×W) with ``w`` (Cout×Cin×Kh×Kw) plus bias."""
    x = check_tensor(x, "input")
    w = check_tensor(w, "kernel")
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input channels {x.shape} do not match kernel {w.shape}")
    if np.shape(b) != (w.shape[0],):
        raise DimensionError(f"bias shape {np.shape(b)} does not match kernel {w.shape}")
    n = x.shape[0]
    cout, _, kh, kw = w.shape
    cols, hout, wout = im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(cout, -1), cols)
    out += np.asarray(b)[:, None]
    out = out.reshape(n, cout, hout, wout)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, w, grad_out, stride: int = 1, pad: int = 0, cols=None,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d_forward` with respect to input, kernel and bias.

    ``cols`` may carry the unfolded input cached by the forward pass. When
    ``need_input_grad`` is false the first element of the result is ``None``.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    grad_out = np.asarray(grad_out)
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"input {x.shape} does not match kernel {w.shape}")
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(wd, kw, stride, pad)
    if grad_out.shape != (n, cout, hout, wout):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != expected {(n, cout, hout, wout)}"
        )
    if cols is None:
        cols, _, _ = im2col(x, kh, kw, stride, pad)
    g = grad_out.reshape(n, cout, hout * wout)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_w, grad_b

    dcols = np.matmul(w.reshape(cout, -1).T, g).reshape(n, cin, kh, kw, hout, wout)
    gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=np.result_type(x, w, grad_out))
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + stride * hout:stride, v:v + stride * wout:stride] += dcols[:, :, u, v]
    grad_x = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def maxpool2d(x, window: int, stride: int | None = None):
    """Max pooling over square windows.

    Returns ``(y, index_map)``. ``index_map`` holds, for every output element,
    the flat ``h*W + w`` position of its maximum inside the input plane. Ties go
    to the first maximal element in row-major window order.
    """
    x = check_tensor(x, "input")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d needs a 4-d input, got {x.shape}")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ConfigurationError(f"invalid pooling geometry window={window} stride={stride}")
    n, c, h, w = x.shape
    hout = conv_output_size(h, window, stride, 0)
    wout = conv_output_size(w, window, stride, 0)
    win = sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :hout, :wout].reshape(n, c, hout, wout, -1)
    local = win.argmax(axis=-1)
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(hout)[:, None] * stride + local // window
    cols = np.arange(wout)[None, :] * stride + local % window
    return np.ascontiguousarray(y), rows * w + cols


def maxpool2d_backward(grad_out, index_map, input_shape):
    """Route each output gradient to its recorded argmax; other positions get 0."""
    grad_out = np.asarray(grad_out)
    n, c, h, w = input_shape
    if grad_out.shape != index_map.shape or grad_out.shape[:2] != (n, c):
        raise DimensionError(
            f"grad_out {grad_out.shape} inconsistent with index map {index_map.shape}"
        )
    plane = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
    flat = np.bincount((plane + index_map).ravel(), weights=grad_out.ravel(),
                       minlength=n * c * h * w)
    return flat.astype(grad_out.dtype, copy=False).reshape(n, c, h, w)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be N×C, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
