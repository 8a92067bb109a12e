"""
Tests for normalizations, patch embedding and the Mixer / ResMLP / ConvMixer layers
"""

import math

import numpy as np
import pytest

from conftest import tiny_config
from mixquant.core.errors import ContractError, DegenerateInputError, DimensionError, UnsupportedConfigurationError
from mixquant.core.tensor import Tensor
from mixquant.models.config import ActKind, ModelFamily, NormKind
from mixquant.models.context import ForwardContext
from mixquant.models.layers import (affine_norm, batch_norm, convmixer_layer, layer_norm, mixer_layer,
                                    multi_token_mixing, patch_embed, resmlp_layer)
from mixquant.models.mixer import build_model


def _vec(*values):
    return Tensor(np.array(values, dtype=np.float64))


def _params(config, seed=0, bias_scale=0.1):
    """float64 parameters with non-zero biases so oracles exercise them"""
    model = build_model(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    params = dict(model.params)
    for name, value in params.items():
        if name.endswith('.bias'):
            params[name] = rng.normal(size=value.shape) * bias_scale
    return params, model.buffers


def _zero_mixing_weights(params, layer=0):
    for name in list(params):
        if name.startswith(f"layers.{layer}.") and '_mixing' in name:
            params[name] = np.zeros_like(params[name])


# Oracles: straight-line loops, independent of the tensor ops

def _gelu(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def _layer_norm_rows(x, gamma, beta, eps):
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        mu = sum(x[t]) / x.shape[1]
        var = sum((v - mu) ** 2 for v in x[t]) / x.shape[1]
        for c in range(x.shape[1]):
            out[t, c] = (x[t, c] - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def _mlp(u, w1, b1, w2, b2):
    hidden = [_gelu(sum(w1[j, i] * u[i] for i in range(len(u))) + b1[j]) for j in range(w1.shape[0])]
    return np.array([sum(w2[k, j] * hidden[j] for j in range(len(hidden))) + b2[k] for k in range(w2.shape[0])])


def _channel_half_oracle(z, p, eps):
    y = _layer_norm_rows(z, p['layers.0.norm2.weight'], p['layers.0.norm2.bias'], eps)
    out = z.copy()
    for t in range(z.shape[0]):
        out[t] += _mlp(y[t], p['layers.0.channel_mixing.fc1.weight'], p['layers.0.channel_mixing.fc1.bias'],
                       p['layers.0.channel_mixing.fc2.weight'], p['layers.0.channel_mixing.fc2.bias'])
    return out


def mixer_oracle(x, p, eps):
    y = _layer_norm_rows(x, p['layers.0.norm1.weight'], p['layers.0.norm1.bias'], eps)
    z = x.copy()
    prefix = 'layers.0.token_mixing.0'
    for c in range(x.shape[1]):
        z[:, c] += _mlp(y[:, c], p[f'{prefix}.fc1.weight'], p[f'{prefix}.fc1.bias'],
                        p[f'{prefix}.fc2.weight'], p[f'{prefix}.fc2.bias'])
    return _channel_half_oracle(z, p, eps)


def resmlp_oracle(x, p, eps):
    y = _layer_norm_rows(x, p['layers.0.norm1.weight'], p['layers.0.norm1.bias'], eps)
    z = x.copy()
    w, b = p['layers.0.token_mixing.0.proj.weight'], p['layers.0.token_mixing.0.proj.bias']
    for c in range(x.shape[1]):
        for t in range(x.shape[0]):
            z[t, c] += sum(w[t, s] * y[s, c] for s in range(x.shape[0])) + b[t]
    return _channel_half_oracle(z, p, eps)


# Normalizations

def test_affine_norm_hand_evaluation():
    np.testing.assert_allclose(affine_norm(_vec(1, 1), _vec(2, 3), _vec(1, -1)).data, [3.0, 2.0])


def test_affine_norm_identity_and_zero_scale():
    x = _vec(0.5, -2.0)
    np.testing.assert_array_equal(affine_norm(x, _vec(1, 1), _vec(0, 0)).data, x.data)
    np.testing.assert_array_equal(affine_norm(x, _vec(0, 0), _vec(4, 5)).data, [4.0, 5.0])


def test_affine_norm_length_mismatch():
    with pytest.raises(ContractError):
        affine_norm(_vec(1, 2, 3), _vec(1, 1), _vec(0, 0))


def test_layer_norm_hand_evaluation():
    out = layer_norm(_vec(1, 2, 3), _vec(1, 1, 1), _vec(0, 0, 0), eps=0.0)
    np.testing.assert_allclose(out.data, [-1.22474, 0.0, 1.22474], atol=1e-5)


def test_layer_norm_constant_row_and_zero_gamma():
    beta = _vec(0.5, -0.5, 2.0)
    np.testing.assert_allclose(layer_norm(_vec(3, 3, 3), _vec(1, 1, 1), beta, eps=1e-5).data, beta.data)
    np.testing.assert_allclose(layer_norm(_vec(1, 5, 9), _vec(0, 0, 0), beta).data, beta.data)


def test_layer_norm_standardizes_each_row(rng):
    x = Tensor(rng.normal(size=(6, 8)) * 3.0 + 2.0)
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.all(np.abs(out.mean(axis=1)) <= 1e-5)
    assert np.all(np.abs(out.var(axis=1) - 1.0) <= 1e-4)


def test_batch_norm_training_statistics():
    x = Tensor(np.array([[0.0], [2.0]]))
    y, (running_mean, running_var) = batch_norm(x, _vec(1), _vec(0), np.zeros(1), np.ones(1),
                                                eps=1e-5, training=True, momentum=0.9)
    np.testing.assert_allclose(y.data[:, 0], [-1.0, 1.0], atol=1e-5)
    np.testing.assert_allclose(running_mean, [0.1])
    np.testing.assert_allclose(running_var, [1.0])


def test_batch_norm_eval_uses_running_statistics():
    y, updated = batch_norm(Tensor(np.array([[5.0]])), _vec(1), _vec(0), np.zeros(1), np.ones(1))
    assert y.data[0, 0] == pytest.approx(5.0, abs=1e-4)
    assert updated is None


def test_batch_norm_training_needs_two_samples():
    with pytest.raises(DegenerateInputError):
        batch_norm(Tensor(np.array([[1.0]])), _vec(1), _vec(0), np.zeros(1), np.ones(1), training=True)


# Patch embedding

def test_patch_embed_ramp_image():
    images = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    tokens = patch_embed(images, Tensor(np.ones((1, 4))), _vec(0), patch_size=2)
    assert tokens.shape == (1, 4, 1)
    np.testing.assert_array_equal(tokens.data[0, :, 0], [10.0, 18.0, 42.0, 50.0])


def test_patch_embed_whole_image_is_one_token():
    images = Tensor(np.ones((2, 1, 4, 4)))
    assert patch_embed(images, Tensor(np.ones((3, 16))), _vec(0, 0, 0), patch_size=4).shape == (2, 1, 3)


def test_patch_embed_non_divisible():
    with pytest.raises(ContractError):
        patch_embed(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 4))), _vec(0), patch_size=2)


# Mixer and ResMLP layers

@pytest.mark.parametrize("family", [ModelFamily.MIXER, ModelFamily.RESMLP])
def test_zero_mixing_weights_are_identity(family, rng):
    config = tiny_config(family)
    params, buffers = _params(config, bias_scale=0.0)
    _zero_mixing_weights(params)
    layer = mixer_layer if family is ModelFamily.MIXER else resmlp_layer
    x = Tensor(rng.normal(size=(2, config.tokens, config.channels)))
    out = layer(x, ForwardContext(params, buffers), 'layers.0', config.layer_spec())
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("image_size,patch_size", [(4, 2), (2, 2)])
def test_mixer_layer_matches_oracle(image_size, patch_size, rng):
    config = tiny_config(image_size=image_size, patch_size=patch_size, channels=2,
                         token_hidden=1, channel_hidden=1, init_std=0.5)
    params, buffers = _params(config, seed=1)
    x = rng.normal(size=(1, config.tokens, config.channels))
    out = mixer_layer(Tensor(x), ForwardContext(params, buffers), 'layers.0', config.layer_spec())
    np.testing.assert_allclose(out.data[0], mixer_oracle(x[0], params, config.norm_eps), rtol=1e-10, atol=1e-12)


def test_resmlp_layer_matches_oracle(rng):
    config = tiny_config(ModelFamily.RESMLP, channels=2, channel_hidden=1, init_std=0.5)
    params, buffers = _params(config, seed=2)
    x = rng.normal(size=(1, config.tokens, config.channels))
    out = resmlp_layer(Tensor(x), ForwardContext(params, buffers), 'layers.0', config.layer_spec())
    np.testing.assert_allclose(out.data[0], resmlp_oracle(x[0], params, config.norm_eps), rtol=1e-10, atol=1e-12)


def test_resmlp_identity_token_map_doubles_input(rng):
    config = tiny_config(ModelFamily.RESMLP, norm=NormKind.AFFINE)
    params, buffers = _params(config, bias_scale=0.0)
    _zero_mixing_weights(params)
    params['layers.0.token_mixing.0.proj.weight'] = np.eye(config.tokens)
    x = Tensor(rng.normal(size=(3, config.tokens, config.channels)))
    out = resmlp_layer(x, ForwardContext(params, buffers), 'layers.0', config.layer_spec())
    np.testing.assert_allclose(out.data, 2.0 * x.data)


def test_mixer_layer_shape_mismatch():
    config = tiny_config()
    params, buffers = _params(config)
    with pytest.raises(DimensionError):
        mixer_layer(Tensor(np.ones((1, 3, config.channels))), ForwardContext(params, buffers),
                    'layers.0', config.layer_spec())


# Multiple token-mixing

def _token_mixing(config, params, x):
    ctx = ForwardContext(params)
    return multi_token_mixing(Tensor(x), ctx, 'layers.0.token_mixing', config.layer_spec()).data


def test_identical_groups_equal_single_group_bitwise(rng):
    single = tiny_config(groups=1)
    params, _ = _params(single)
    grouped_params = dict(params)
    for name in [n for n in params if n.startswith('layers.0.token_mixing.0.')]:
        for g in (1, 2, 3):
            grouped_params[name.replace('token_mixing.0.', f'token_mixing.{g}.')] = params[name]
    x = rng.normal(size=(2, single.tokens, single.channels))
    grouped = tiny_config(groups=4)
    np.testing.assert_array_equal(_token_mixing(grouped, grouped_params, x), _token_mixing(single, params, x))
    grouped_params = {k: v for k, v in grouped_params.items() if 'token_mixing.3.' not in k}
    with pytest.raises(ContractError):
        _token_mixing(tiny_config(groups=4), grouped_params, x)


def test_zeroed_group_leaves_its_channels_unmixed(rng):
    config = tiny_config(groups=2)
    params, buffers = _params(config)
    for name in [n for n in params if n.startswith('layers.0.token_mixing.1.')]:
        params[name] = np.zeros_like(params[name])
    x = rng.normal(size=(2, config.tokens, config.channels))
    mixed = _token_mixing(config, params, x)
    np.testing.assert_array_equal(mixed[:, :, 2:], 0.0)
    assert np.any(mixed[:, :, :2] != 0.0)


def test_groups_must_divide_channels(rng):
    config = tiny_config(groups=3)
    params, _ = _params(tiny_config(groups=1))
    with pytest.raises(ContractError):
        _token_mixing(config, params, rng.normal(size=(1, config.tokens, config.channels)))


def test_shared_token_mixing_commutes_with_channel_permutation(rng):
    config = tiny_config(groups=1)
    params, _ = _params(config)
    x = rng.normal(size=(2, config.tokens, config.channels))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(_token_mixing(config, params, x[:, :, perm]),
                               _token_mixing(config, params, x)[:, :, perm], rtol=1e-12)


# ConvMixer layer

def _convmixer_params(config, depthwise, pointwise):
    params, buffers = _params(config, bias_scale=0.0)
    params['layers.0.token_mixing.depthwise.weight'] = depthwise
    params['layers.0.channel_mixing.pointwise.weight'] = pointwise
    return ForwardContext(params, buffers)


def test_convmixer_zero_kernels_give_zero(rng):
    config = tiny_config(ModelFamily.CONVMIXER, norm=NormKind.AFFINE)
    c, k = config.channels, config.kernel_size
    ctx = _convmixer_params(config, np.zeros((c, 1, k, k)), np.zeros((c, c, 1, 1)))
    x = Tensor(rng.normal(size=(2, c, config.grid, config.grid)))
    np.testing.assert_array_equal(convmixer_layer(x, ctx, 'layers.0', config.layer_spec()).data, 0.0)


def test_convmixer_identity_kernels_double_non_negative_input(rng):
    config = tiny_config(ModelFamily.CONVMIXER, norm=NormKind.AFFINE, act=ActKind.RELU)
    c, k = config.channels, config.kernel_size
    delta = np.zeros((c, 1, k, k))
    delta[:, 0, k // 2, k // 2] = 1.0
    ctx = _convmixer_params(config, delta, np.eye(c).reshape(c, c, 1, 1))
    x = Tensor(rng.uniform(size=(2, c, config.grid, config.grid)))
    np.testing.assert_allclose(convmixer_layer(x, ctx, 'layers.0', config.layer_spec()).data, 2.0 * x.data)


def test_convmixer_single_pixel_matches_oracle(rng):
    config = tiny_config(ModelFamily.CONVMIXER, image_size=2, patch_size=2, channels=3, init_std=0.5)
    params, buffers = _params(config, seed=3)
    x = rng.normal(size=(1, 3, 1, 1))
    out = convmixer_layer(Tensor(x), ForwardContext(params, buffers), 'layers.0', config.layer_spec())

    p, eps, center = params, config.norm_eps, config.kernel_size // 2
    v = x[0, :, 0, 0]
    dw = p['layers.0.token_mixing.depthwise.weight'][:, 0, center, center]
    a = np.array([_gelu(dw[i] * v[i] + p['layers.0.token_mixing.depthwise.bias'][i]) for i in range(3)])
    r = _layer_norm_rows((a + v)[None, :], p['layers.0.norm1.weight'], p['layers.0.norm1.bias'], eps)[0]
    pw = p['layers.0.channel_mixing.pointwise.weight'][:, :, 0, 0]
    q = np.array([sum(pw[o, i] * r[i] for i in range(3)) + p['layers.0.channel_mixing.pointwise.bias'][o]
                  for o in range(3)])
    expected = _layer_norm_rows(q[None, :], p['layers.0.norm2.weight'], p['layers.0.norm2.bias'], eps)[0]
    np.testing.assert_allclose(out.data[0, :, 0, 0], expected, rtol=1e-10, atol=1e-12)


def test_convmixer_even_kernel():
    config = tiny_config(ModelFamily.CONVMIXER)
    params, buffers = _params(config)
    params['layers.0.token_mixing.depthwise.weight'] = np.ones((config.channels, 1, 2, 2))
    x = Tensor(np.ones((1, config.channels, config.grid, config.grid)))
    with pytest.raises(UnsupportedConfigurationError):
        convmixer_layer(x, ForwardContext(params, buffers), 'layers.0', config.layer_spec())
