"""
Neural-network operations on Tensors: convolutions, activations, losses
"""

import math
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError, UnsupportedConfigurationError
from .tensor import Tensor, add, apply_op, matmul, reshape, transpose

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ConvMode(Enum):
    DEPTHWISE = "depthwise"
    POINTWISE = "pointwise"


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[..., in] -> x @ weight.T + bias, weight stored as (out, in)"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError("linear input does not match weight", x.shape, weight.shape)
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def conv2d(x: Tensor, kernel: Tensor, mode: Union[ConvMode, str] = ConvMode.DEPTHWISE,
           padding: str = "same") -> Tensor:
    """Cross-correlation with zero padding that preserves H x W"""
    mode = ConvMode(mode)
    if padding != "same":
        raise UnsupportedConfigurationError(f"padding '{padding}' is not supported, only 'same'")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects B x C x H x W input and a rank-4 kernel", x.shape, kernel.shape)
    if mode is ConvMode.DEPTHWISE:
        return _depthwise(x, kernel)
    return _pointwise(x, kernel)


def _depthwise(x: Tensor, kernel: Tensor) -> Tensor:
    batch, channels, height, width = x.shape
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise UnsupportedConfigurationError(f"depthwise kernel must be square with odd size, got {kernel.shape}")
    if kernel.shape[:2] != (channels, 1):
        raise DimensionError("depthwise kernel must be C x 1 x k x k", x.shape, kernel.shape)
    pad = k // 2
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = kernel.data
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, kernel.dtype))
    for u in range(k):
        for v in range(k):
            out += padded[:, :, u:u + height, v:v + width] * w[None, :, 0, u, v, None, None]

    def _backward(g):
        grad_padded = np.zeros_like(padded, dtype=g.dtype)
        grad_w = np.zeros_like(w, dtype=g.dtype)
        for u in range(k):
            for v in range(k):
                window = padded[:, :, u:u + height, v:v + width]
                grad_w[:, 0, u, v] = (g * window).sum(axis=(0, 2, 3))
                grad_padded[:, :, u:u + height, v:v + width] += g * w[None, :, 0, u, v, None, None]
        return grad_padded[:, :, pad:pad + height, pad:pad + width], grad_w

    return apply_op("conv2d_depthwise", (x, kernel), out, _backward)


def _pointwise(x: Tensor, kernel: Tensor) -> Tensor:
    if kernel.shape[2:] != (1, 1) or kernel.shape[1] != x.shape[1]:
        raise DimensionError("pointwise kernel must be C_out x C x 1 x 1", x.shape, kernel.shape)
    w = kernel.data[:, :, 0, 0]
    out = np.einsum("oc,bchw->bohw", w, x.data)

    def _backward(g):
        grad_x = np.einsum("oc,bohw->bchw", w, g)
        grad_w = np.einsum("bohw,bchw->oc", g, x.data).reshape(kernel.shape)
        return grad_x, grad_w

    return apply_op("conv2d_pointwise", (x, kernel), out, _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return apply_op("relu", (x,), out, lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)"""
    cdf = ndtr(x.data).astype(x.dtype)
    out = x.data * cdf

    def _backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return apply_op("gelu", (x,), out, _backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch"""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy expects N x K logits and N labels", logits.shape, labels.shape)
    if logits.shape[0] == 0:
        raise ContractError("cross_entropy over an empty batch")
    rows = np.arange(logits.shape[0])
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    per_sample = np.log(total[:, 0]) - shifted[rows, labels]
    out = np.asarray(per_sample.mean(), dtype=logits.dtype)

    def _backward(g):
        grad = exp / total
        grad[rows, labels] -= 1.0
        return (grad * (g / logits.shape[0]),)

    return apply_op("cross_entropy", (logits,), out, _backward)


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Loss of each sample, for bookkeeping outside the tape"""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_total = np.log(np.exp(shifted).sum(axis=1))
    return log_total - shifted[np.arange(len(labels)), labels]


def channel_bias(bias: Tensor, ndim: int, axis: int) -> Tensor:
    """Reshape a length-C vector so it broadcasts along `axis` of a rank-`ndim` tensor"""
    shape = [1] * ndim
    shape[axis % ndim] = bias.shape[0]
    return reshape(bias, shape)
