"""
Forward and backward kernels for the correspondence network, on single (C, H, W) float64 maps.

Convolutions are 3x3 with one pixel of zero padding; transposed convolutions are 4x4, stride 2,
padding 1, so they exactly double the spatial size.
"""

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


def conv_output_size(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """
    Args:
        x: (C_in, H, W) input
        w: (C_out, C_in, 3, 3) kernel
        b: (C_out,) bias
        stride: 1 or 2

    Returns:
        (C_out, H_out, W_out) output
    """
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    return np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv2d given the upstream gradient ``dout``."""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    dw = np.tensordot(dout, windows, axes=([1, 2], [1, 2]))
    db = dout.sum(axis=(1, 2))
    out_h, out_w = dout.shape[1:]
    dpadded = np.zeros_like(padded)
    for ky in range(3):
        for kx in range(3):
            contribution = np.tensordot(w[:, :, ky, kx], dout, axes=([0], [0]))
            dpadded[:, ky:ky + stride * (out_h - 1) + 1:stride, kx:kx + stride * (out_w - 1) + 1:stride] += contribution
    return dpadded[:, 1:-1, 1:-1], dw, db


def deconv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Transposed convolution, kernel 4x4, stride 2, padding 1.

    Args:
        x: (C_in, H, W) input
        w: (C_out, C_in, 4, 4) kernel
        b: (C_out,) bias

    Returns:
        (C_out, 2H, 2W) output
    """
    _, height, width = x.shape
    full = np.zeros((w.shape[0], 2 * height + 2, 2 * width + 2))
    for ky in range(4):
        for kx in range(4):
            contribution = np.tensordot(w[:, :, ky, kx], x, axes=([1], [0]))
            full[:, ky:ky + 2 * height:2, kx:kx + 2 * width:2] += contribution
    return full[:, 1:2 * height + 1, 1:2 * width + 1] + b[:, None, None]


def deconv2d_backward(dout: np.ndarray, x: np.ndarray,
                      w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of deconv2d given the upstream gradient ``dout``."""
    _, height, width = x.shape
    dfull = np.zeros((w.shape[0], 2 * height + 2, 2 * width + 2))
    dfull[:, 1:2 * height + 1, 1:2 * width + 1] = dout
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for ky in range(4):
        for kx in range(4):
            g = dfull[:, ky:ky + 2 * height:2, kx:kx + 2 * width:2]
            dx += np.tensordot(w[:, :, ky, kx], g, axes=([0], [0]))
            dw[:, :, ky, kx] = np.tensordot(g, x, axes=([1, 2], [1, 2]))
    return dx, dw, dout.sum(axis=(1, 2))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, pre: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, dout, 0.0)


def softmax2(logits: np.ndarray) -> np.ndarray:
    """Probability of class 1 under a two-class softmax over (2, H, W) logits."""
    return expit(logits[1] - logits[0])
