"""Dense layer primitives with hand-written gradients.

Sequences are 2-D numpy arrays of shape ``(l, c)``: one row per slice,
one column per channel. Every function is pure; nothing is cached
between calls.
"""

from typing import NamedTuple

import numpy as np

from .errors import EmptyVolumeError, ShapeError


class LayerGrads(NamedTuple):
    d_input: np.ndarray
    d_weight: np.ndarray
    d_bias: np.ndarray

    @property
    def d_params(self) -> np.ndarray:
        """Weight then bias gradient, flattened in parameter-layout order."""
        return np.concatenate([self.d_weight.ravel(), self.d_bias.ravel()])


def _check_seq(x, name="input"):
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (l, c), got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyVolumeError(f"{name} has zero slices")
    if x.shape[1] == 0:
        raise ShapeError(f"{name} has zero channels")


def _check_conv(x, weight, dilation):
    _check_seq(x)
    if weight.ndim != 3:
        raise ShapeError(f"kernel must be (k, cin, cout), got {weight.shape}")
    k, cin, _ = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd for same padding, got {k}")
    if cin != x.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    if int(dilation) != dilation or dilation < 1:
        raise ShapeError(f"dilation must be a positive integer, got {dilation}")


def _pad(x, pad):
    if pad == 0:
        return x
    out = np.zeros((x.shape[0] + 2 * pad, x.shape[1]), dtype=x.dtype)
    out[pad:pad + x.shape[0]] = x
    return out


def conv1d_forward(x, weight, bias, dilation=1):
    """Dilated 1-D convolution with symmetric zero padding.

    ``out[t, o] = bias[o] + sum_{j,i} weight[j, i, o] * x[t + (j - k//2)*dilation, i]``
    with out-of-range rows of ``x`` read as zero, so the output keeps length ``l``.
    """
    _check_conv(x, weight, dilation)
    k, _, cout = weight.shape
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    l = x.shape[0]
    pad = (k // 2) * dilation
    xp = _pad(x, pad)
    out = np.broadcast_to(bias, (l, cout)).astype(np.result_type(x, weight), copy=True)
    for j in range(k):
        s = j * dilation
        out += xp[s:s + l] @ weight[j]
    return out


def conv1d_backward(x, weight, dilation, d_out, need_input_grad=True):
    """Gradients of :func:`conv1d_forward` w.r.t. input, kernel and bias.

    When ``need_input_grad`` is false the returned ``d_input`` is ``None``;
    the first layer of a network never needs it.
    """
    _check_conv(x, weight, dilation)
    k, _, cout = weight.shape
    l = x.shape[0]
    if d_out.shape != (l, cout):
        raise ShapeError(f"d_out must have shape {(l, cout)}, got {d_out.shape}")
    pad = (k // 2) * dilation
    xp = _pad(x, pad)
    d_weight = np.empty_like(weight, dtype=np.result_type(x, weight, d_out))
    for j in range(k):
        s = j * dilation
        d_weight[j] = xp[s:s + l].T @ d_out
    d_bias = d_out.sum(axis=0)
    d_input = None
    if need_input_grad:
        dxp = np.zeros(xp.shape, dtype=d_weight.dtype)
        for j in range(k):
            s = j * dilation
            dxp[s:s + l] += d_out @ weight[j].T
        d_input = dxp[pad:pad + l]
    return LayerGrads(d_input, d_weight, d_bias)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, d_out):
    # gradient at exactly zero is taken as zero
    if x.shape != d_out.shape:
        raise ShapeError(f"shape mismatch: input {x.shape} vs d_out {d_out.shape}")
    return np.where(x > 0, d_out, 0)


def global_maxpool_forward(x):
    """Per-channel max over all rows.

    Returns ``(values, indices)``; ``indices[o]`` is the first row attaining
    the maximum of channel ``o``.
    """
    _check_seq(x)
    idx = np.argmax(x, axis=0)
    return x[idx, np.arange(x.shape[1])], idx


def global_maxpool_backward(indices, d_out, length):
    indices = np.asarray(indices)
    d_out = np.asarray(d_out)
    if length < 1:
        raise EmptyVolumeError("pooled sequence length must be >= 1")
    if indices.shape != d_out.shape or indices.ndim != 1:
        raise ShapeError(f"indices {indices.shape} and d_out {d_out.shape} must be equal 1-D")
    if indices.size and (indices.min() < 0 or indices.max() >= length):
        raise ShapeError(f"argmax index out of range [0, {length})")
    d_input = np.zeros((length, d_out.shape[0]), dtype=d_out.dtype)
    d_input[indices, np.arange(d_out.shape[0])] = d_out
    return d_input


def dense_forward(x, weight, bias):
    if x.ndim != 1 or weight.ndim != 2 or x.shape[0] != weight.shape[0]:
        raise ShapeError(f"cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias must have shape ({weight.shape[1]},), got {bias.shape}")
    return x @ weight + bias


def dense_backward(x, weight, d_out):
    if x.ndim != 1 or weight.shape != (x.shape[0], d_out.shape[0]):
        raise ShapeError(
            f"inconsistent shapes: input {x.shape}, weight {weight.shape}, d_out {d_out.shape}")
    return LayerGrads(weight @ d_out, np.outer(x, d_out), d_out.copy())
