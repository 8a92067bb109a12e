"""
Layer building blocks: normalizations, patch embedding and the three layer
families (Mixer, ResMLP, ConvMixer)

Token-major layers take B x T x C tensors, ConvMixer layers B x C x H x W.
Parameters are looked up through a ForwardContext under a dotted prefix,
e.g. layers.2.channel_mixing.fc1.weight.
"""

from typing import Optional, Tuple

import numpy as np

from ..core.errors import ContractError, DegenerateInputError, DimensionError
from ..core.functional import ConvMode, channel_bias, conv2d, gelu, linear, relu
from ..core.quantizers import pact
from ..core.tensor import Tensor, add, einsum, moments, repeat, reshape, sqrt, stack, transpose
from .config import ActKind, LayerSpec, ModelFamily, NormKind
from .context import ForwardContext


def affine_norm(x: Tensor, alpha: Tensor, beta: Tensor, axis: int = -1) -> Tensor:
    """Per-channel alpha * x + beta with no statistics"""
    _check_channel_vector(x, alpha, axis)
    _check_channel_vector(x, beta, axis)
    return add(x * channel_bias(alpha, x.ndim, axis), channel_bias(beta, x.ndim, axis))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize each position over its channels"""
    _check_channel_vector(x, gamma, axis)
    _check_channel_vector(x, beta, axis)
    mu, var = moments(x, axis, keepdims=True)
    normalized = (x - mu) / sqrt(var + eps)
    return add(normalized * channel_bias(gamma, x.ndim, axis), channel_bias(beta, x.ndim, axis))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, training: bool = False, momentum: float = 0.9,
               axis: int = -1) -> Tuple[Tensor, Optional[Tuple[np.ndarray, np.ndarray]]]:
    """Normalize each channel over batch and spatial positions

    Returns the output and, in training, the updated running statistics
    (m * running + (1 - m) * batch, population variance).
    """
    _check_channel_vector(x, gamma, axis)
    _check_channel_vector(x, beta, axis)
    axis = axis % x.ndim
    if training:
        if x.shape[0] < 2:
            raise DegenerateInputError(f"batch norm in training needs at least 2 samples, got {x.shape[0]}")
        reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
        mu, var = moments(x, reduce_axes, keepdims=True)
        batch_mean = mu.data.reshape(-1).astype(np.float64)
        batch_var = var.data.reshape(-1).astype(np.float64)
        updated = (
            (momentum * running_mean + (1.0 - momentum) * batch_mean).astype(running_mean.dtype),
            (momentum * running_var + (1.0 - momentum) * batch_var).astype(running_var.dtype),
        )
    else:
        shape = [1] * x.ndim
        shape[axis] = x.shape[axis]
        mu = Tensor(np.asarray(running_mean, dtype=x.dtype).reshape(shape))
        var = Tensor(np.asarray(running_var, dtype=x.dtype).reshape(shape))
        updated = None
    normalized = (x - mu) / sqrt(var + eps)
    y = add(normalized * channel_bias(gamma, x.ndim, axis), channel_bias(beta, x.ndim, axis))
    return y, updated


def _check_channel_vector(x: Tensor, vector: Tensor, axis: int):
    if vector.shape != (x.shape[axis],):
        raise ContractError(f"per-channel vector of shape {vector.shape} does not match "
                            f"{x.shape[axis]} channels of input {x.shape}")


def apply_norm(x: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec, axis: int = -1) -> Tensor:
    weight, bias = ctx.param(f"{prefix}.weight"), ctx.param(f"{prefix}.bias")
    if spec.norm is NormKind.AFFINE:
        return affine_norm(x, weight, bias, axis)
    if spec.norm is NormKind.LAYERNORM:
        return layer_norm(x, weight, bias, spec.norm_eps, axis)
    y, updated = batch_norm(
        x, weight, bias, ctx.buffer(f"{prefix}.running_mean"), ctx.buffer(f"{prefix}.running_var"),
        eps=spec.norm_eps, training=ctx.training, momentum=spec.bn_momentum, axis=axis)
    if updated is not None:
        ctx.update_buffer(f"{prefix}.running_mean", updated[0])
        ctx.update_buffer(f"{prefix}.running_var", updated[1])
    return y


def apply_activation(x: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec) -> Tensor:
    if spec.act is ActKind.GELU:
        return gelu(x)
    if spec.act is ActKind.RELU:
        return relu(x)
    return pact(x, ctx.param(f"{prefix}.alpha"))


def patch_embed(images: Tensor, weight: Tensor, bias: Tensor, patch_size: int) -> Tensor:
    """B x C_in x H x W images to B x T x C tokens, patches in row-major order"""
    if images.ndim != 4:
        raise DimensionError("patch_embed expects B x C_in x H x W images", images.shape)
    batch, in_channels, height, width = images.shape
    if height % patch_size or width % patch_size:
        raise ContractError(f"patch size {patch_size} does not divide image {height} x {width}")
    rows, cols = height // patch_size, width // patch_size
    x = reshape(images, (batch, in_channels, rows, patch_size, cols, patch_size))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (batch, rows * cols, in_channels * patch_size * patch_size))
    return linear(x, weight, bias)


def _grouped_params(ctx: ForwardContext, prefix: str, layer: str, groups: int, channels: int) -> Tuple[Tensor, Tensor]:
    """Per-group token weights expanded to one copy per channel

    Channel c uses group c // (C / G). Returns weight C x out x in and
    bias C x out.
    """
    if channels % groups:
        raise ContractError(f"groups {groups} do not divide channels {channels}")
    per_group = channels // groups
    weights = stack([ctx.weight(f"{prefix}.{g}.{layer}.weight") for g in range(groups)], axis=0)
    biases = stack([ctx.param(f"{prefix}.{g}.{layer}.bias") for g in range(groups)], axis=0)
    return repeat(weights, per_group, axis=0), repeat(biases, per_group, axis=0)


def _grouped_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """B x C x in -> B x C x out with a separate matrix per channel"""
    return add(einsum('bci,coi->bco', x, weight), bias)


def multi_token_mixing(x: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec) -> Tensor:
    """Token-mixing MLP with G weight pairs shared inside each channel group

    x is the normalized B x T x C input; returns B x T x C (no residual).
    """
    channels = x.shape[2]
    xt = transpose(x, (0, 2, 1))
    w1, b1 = _grouped_params(ctx, prefix, 'fc1', spec.groups, channels)
    w2, b2 = _grouped_params(ctx, prefix, 'fc2', spec.groups, channels)
    h = _grouped_linear(xt, w1, b1)
    h = apply_activation(h, ctx, f"{prefix}.act", spec)
    h = ctx.activation(f"{prefix}.act", h)
    return transpose(_grouped_linear(h, w2, b2), (0, 2, 1))


def channel_mixing(x: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec) -> Tensor:
    h = linear(x, ctx.weight(f"{prefix}.fc1.weight"), ctx.param(f"{prefix}.fc1.bias"))
    h = apply_activation(h, ctx, f"{prefix}.act", spec)
    h = ctx.activation(f"{prefix}.act", h)
    return linear(h, ctx.weight(f"{prefix}.fc2.weight"), ctx.param(f"{prefix}.fc2.bias"))


def _check_tokens(x: Tensor, spec: LayerSpec):
    if x.ndim != 3 or x.shape[1:] != (spec.tokens, spec.channels):
        raise DimensionError(f"layer expects B x {spec.tokens} x {spec.channels}", x.shape)


def mixer_layer(x: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec) -> Tensor:
    """Z = X + token_mlp(norm1(X)); Y = Z + channel_mlp(norm2(Z))"""
    _check_tokens(x, spec)
    y = ctx.activation(f"{prefix}.norm1", apply_norm(x, ctx, f"{prefix}.norm1", spec))
    z = ctx.activation(f"{prefix}.token_residual",
                       add(x, multi_token_mixing(y, ctx, f"{prefix}.token_mixing", spec)))
    return _channel_half(z, ctx, prefix, spec)


def resmlp_layer(x: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec) -> Tensor:
    """Like mixer_layer, but token mixing is one T x T linear map per group"""
    _check_tokens(x, spec)
    y = ctx.activation(f"{prefix}.norm1", apply_norm(x, ctx, f"{prefix}.norm1", spec))
    w, b = _grouped_params(ctx, f"{prefix}.token_mixing", 'proj', spec.groups, spec.channels)
    mixed = transpose(_grouped_linear(transpose(y, (0, 2, 1)), w, b), (0, 2, 1))
    z = ctx.activation(f"{prefix}.token_residual", add(x, mixed))
    return _channel_half(z, ctx, prefix, spec)


def _channel_half(z: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec) -> Tensor:
    y = ctx.activation(f"{prefix}.norm2", apply_norm(z, ctx, f"{prefix}.norm2", spec))
    out = add(z, channel_mixing(y, ctx, f"{prefix}.channel_mixing", spec))
    return ctx.activation(f"{prefix}.channel_residual", out)


def convmixer_layer(x: Tensor, ctx: ForwardContext, prefix: str, spec: LayerSpec) -> Tensor:
    """Y = norm2(pointwise(norm1(act(depthwise(X)) + X)))"""
    if x.ndim != 4 or x.shape[1] != spec.channels:
        raise DimensionError(f"convmixer layer expects B x {spec.channels} x H x W", x.shape)
    token = f"{prefix}.token_mixing"
    d = conv2d(x, ctx.weight(f"{token}.depthwise.weight"), ConvMode.DEPTHWISE)
    d = add(d, channel_bias(ctx.param(f"{token}.depthwise.bias"), 4, 1))
    a = ctx.activation(f"{token}.act", apply_activation(d, ctx, f"{token}.act", spec))
    r = ctx.activation(f"{prefix}.token_residual", add(a, x))
    r = ctx.activation(f"{prefix}.norm1", apply_norm(r, ctx, f"{prefix}.norm1", spec, axis=1))
    channel = f"{prefix}.channel_mixing"
    p = conv2d(r, ctx.weight(f"{channel}.pointwise.weight"), ConvMode.POINTWISE)
    p = add(p, channel_bias(ctx.param(f"{channel}.pointwise.bias"), 4, 1))
    p = ctx.activation(f"{channel}.out", p)
    return ctx.activation(f"{prefix}.norm2", apply_norm(p, ctx, f"{prefix}.norm2", spec, axis=1))


LAYER_FUNCTIONS = {
    ModelFamily.MIXER: mixer_layer,
    ModelFamily.RESMLP: resmlp_layer,
    ModelFamily.CONVMIXER: convmixer_layer,
}
