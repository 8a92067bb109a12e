"""
Finite-difference checks of every differentiable operation and layer
"""

import numpy as np
import pytest

from conftest import tiny_config
from mixquant.core.errors import NumericError
from mixquant.core.functional import ConvMode, conv2d, cross_entropy, gelu, linear, relu
from mixquant.core.gradcheck import analytic_gradient, avoid_kinks, grad_check, numeric_gradient
from mixquant.core.quantizers import QuantScheme, compute_qparams, fake_quant, pact
from mixquant.core.sensitivity import FlatParams
from mixquant.core.tensor import Tape, Tensor, apply_op, backward, einsum, moments, sqrt
from mixquant.models.config import ActKind, ModelFamily, NormKind
from mixquant.models.context import ForwardContext
from mixquant.models.layers import batch_norm, convmixer_layer, layer_norm, mixer_layer, patch_embed, resmlp_layer
from mixquant.models.mixer import build_model

TOLERANCE = 1e-6


def _weighted(shape, seed=0):
    """Random projection turning an output into a scalar loss"""
    return Tensor(np.random.default_rng(seed + 100).normal(size=shape))


def test_quadratic_form():
    theta = np.random.default_rng(0).normal(size=5)
    result = grad_check(lambda t: (t * t).sum(), theta)
    assert result.passed(TOLERANCE)
    assert result.checked == 5


def test_constant_function_has_zero_error():
    result = grad_check(lambda t: (t * 0.0).sum() + 3.0, np.ones(3))
    assert result.max_relative_error == 0.0


def _scaled(t, weights, backward_weights):
    return apply_op("scaled", (t,), t.data * weights, lambda g: (g * backward_weights,))


def test_wrong_gradient_in_small_coordinate_is_caught():
    weights = np.array([1000.0, 1e-3])
    correct = grad_check(lambda t: _scaled(t, weights, weights).sum(), np.array([1e-4, 0.2]))
    assert correct.passed(TOLERANCE)
    wrong = grad_check(lambda t: _scaled(t, weights, weights * [1.0, 1.01]).sum(), np.array([1e-4, 0.2]))
    assert wrong.max_relative_error == pytest.approx(0.01 / 1.01, rel=1e-4)
    assert not wrong.passed(TOLERANCE)


def test_relu_kink_is_skipped():
    result = grad_check(lambda t: relu(t).sum(), np.array([0.0, 1.0, -1.0]), breakpoints=[0.0])
    assert result.skipped == 1
    assert result.passed(TOLERANCE)


def test_non_finite_function_value():
    with pytest.raises(NumericError):
        numeric_gradient(lambda t: (t / 0.0).sum(), np.ones(2))


def test_avoid_kinks_moves_points_off_breakpoints():
    moved = avoid_kinks(np.array([0.0, 1e-6, 0.5]), [0.0])
    assert abs(moved[0]) > 1e-4 and abs(moved[1]) > 1e-4
    assert moved[2] == 0.5


@pytest.mark.parametrize("op", [
    lambda t: (t * t * t).sum(),
    lambda t: (t / (t * t + 1.0)).sum(),
    lambda t: sqrt(t * t + 1.0).sum(),
    lambda t: (gelu(t) * _weighted((3, 4))).sum(),
    lambda t: (moments(t, axis=1)[1] * _weighted((3,))).sum(),
    lambda t: (t.transpose() @ t).sum(),
    lambda t: cross_entropy(t, np.array([0, 3, 1])),
])
def test_elementwise_and_reductions(op):
    theta = np.random.default_rng(3).normal(size=(3, 4))
    assert grad_check(op, theta).passed(TOLERANCE)


def test_einsum_both_operands():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 2, 5))
    x = rng.normal(size=(2, 3, 5))
    r = _weighted((2, 3, 2))
    assert grad_check(lambda t: (einsum('bci,coi->bco', t, Tensor(w)) * r).sum(), x).passed(TOLERANCE)
    assert grad_check(lambda t: (einsum('bci,coi->bco', Tensor(x), t) * r).sum(), w).passed(TOLERANCE)


def test_linear_weight_and_bias():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(4, 3)))
    w = rng.normal(size=(2, 3))
    r = _weighted((4, 2))
    assert grad_check(lambda t: (linear(x, t, Tensor(np.ones(2))) * r).sum(), w).passed(TOLERANCE)
    assert grad_check(lambda t: (linear(x, Tensor(w), t) * r).sum(), np.zeros(2)).passed(TOLERANCE)


@pytest.mark.parametrize("mode,kernel_shape", [
    (ConvMode.DEPTHWISE, (2, 1, 3, 3)),
    (ConvMode.POINTWISE, (3, 2, 1, 1)),
])
def test_conv2d_input_and_kernel(mode, kernel_shape):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2, 3, 3))
    kernel = rng.normal(size=kernel_shape)
    out_shape = conv2d(Tensor(x), Tensor(kernel), mode).shape
    r = _weighted(out_shape)
    assert grad_check(lambda t: (conv2d(t, Tensor(kernel), mode) * r).sum(), x).passed(TOLERANCE)
    assert grad_check(lambda t: (conv2d(Tensor(x), t, mode) * r).sum(), kernel).passed(TOLERANCE)


def test_relu_away_from_kink():
    theta = avoid_kinks(np.random.default_rng(7).normal(size=6), [0.0])
    r = _weighted((6,))
    assert grad_check(lambda t: (relu(t) * r).sum(), theta, breakpoints=[0.0]).passed(TOLERANCE)


def test_fake_quant_straight_through_matches_clamp():
    qp = compute_qparams(-1.0, 1.0, 8, QuantScheme.SYMMETRIC)
    lo, hi = qp.representable_range()
    x = avoid_kinks(np.linspace(-2.0, 2.0, 41), [float(lo), float(hi)])
    r = np.random.default_rng(8).normal(size=x.shape)
    analytic = analytic_gradient(lambda t: (fake_quant(t, qp) * Tensor(r)).sum(), x)
    clamp = numeric_gradient(lambda t: Tensor(np.sum(np.clip(t.data, lo, hi) * r)), x)
    np.testing.assert_allclose(analytic, clamp, atol=1e-8)
    inside = (x >= lo) & (x <= hi)
    np.testing.assert_array_equal(analytic[~inside], 0.0)
    np.testing.assert_allclose(analytic[inside], r[inside])


def test_pact_alpha_gradient_by_central_differences():
    x = Tensor(np.array([-1.0, 2.0, 9.0]))
    alpha = np.array([6.0])
    numeric = numeric_gradient(lambda a: pact(x, a).sum(), alpha)
    analytic = analytic_gradient(lambda a: pact(x, a).sum(), alpha)
    assert numeric[0] == pytest.approx(1.0, abs=1e-8)
    assert analytic[0] == pytest.approx(1.0)


def test_pact_input_gradient():
    x = avoid_kinks(np.linspace(-3.0, 9.0, 25), [0.0, 6.0])
    alpha = Tensor(np.array([6.0]))
    r = _weighted(x.shape)
    result = grad_check(lambda t: (pact(t, alpha) * r).sum(), x, breakpoints=[0.0, 6.0])
    assert result.passed(TOLERANCE)


def test_layer_norm_and_batch_norm():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 3, 5))
    gamma, beta = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
    r = _weighted(x.shape)
    assert grad_check(lambda t: (layer_norm(t, gamma, beta) * r).sum(), x).passed(TOLERANCE)

    def batch_loss(t):
        y, _ = batch_norm(t, gamma, beta, np.zeros(5), np.ones(5), training=True)
        return (y * r).sum()

    assert grad_check(batch_loss, x).passed(TOLERANCE)


def test_patch_embed():
    rng = np.random.default_rng(10)
    images = rng.normal(size=(2, 1, 4, 4))
    weight = Tensor(rng.normal(size=(3, 4)))
    r = _weighted((2, 4, 3))
    assert grad_check(lambda t: (patch_embed(t, weight, Tensor(np.zeros(3)), 2) * r).sum(),
                      images).passed(TOLERANCE)


LAYER_CASES = [
    (ModelFamily.MIXER, dict()),
    (ModelFamily.MIXER, dict(groups=2, act=ActKind.RELU)),
    (ModelFamily.RESMLP, dict(norm=NormKind.AFFINE)),
    (ModelFamily.RESMLP, dict(groups=4)),
    (ModelFamily.CONVMIXER, dict(norm=NormKind.BATCHNORM, act=ActKind.PACT, pact_alpha=0.5)),
]
LAYER_FUNCTIONS = {
    ModelFamily.MIXER: mixer_layer,
    ModelFamily.RESMLP: resmlp_layer,
    ModelFamily.CONVMIXER: convmixer_layer,
}


@pytest.mark.parametrize("family,overrides", LAYER_CASES)
def test_layer_input_gradient(family, overrides):
    config = tiny_config(family, **overrides)
    model = build_model(config, seed=11, dtype=np.float64)
    spec = config.layer_spec()
    rng = np.random.default_rng(12)
    if family is ModelFamily.CONVMIXER:
        x = rng.normal(size=(2, config.channels, config.grid, config.grid))
    else:
        x = rng.normal(size=(2, config.tokens, config.channels))
    layer = LAYER_FUNCTIONS[family]
    r = _weighted(x.shape)

    def loss(t):
        ctx = ForwardContext(model.params, model.buffers)
        return (layer(t, ctx, 'layers.0', spec) * r).sum()

    assert grad_check(loss, x).passed(TOLERANCE)


def _parameter_gradients(model, images, labels, training):
    flat = FlatParams(model.params)

    def loss_value(theta):
        ctx = model.context(training=training, params=flat.unflatten(theta))
        return cross_entropy(model.forward(Tensor(images), ctx), labels).item()

    tape = Tape()
    ctx = model.context(tape=tape, training=training, params=flat.unflatten(flat.theta))
    loss = cross_entropy(model.forward(Tensor(images), ctx), labels)
    analytic = flat.flatten(ctx.gradients(backward(tape, loss)))

    eps = 1e-5
    numeric = np.zeros_like(flat.theta)
    for i in range(flat.theta.size):
        plus, minus = flat.theta.copy(), flat.theta.copy()
        plus[i] += eps
        minus[i] -= eps
        numeric[i] = (loss_value(plus) - loss_value(minus)) / (2 * eps)
    return analytic, numeric


MODEL_CASES = LAYER_CASES + [
    (ModelFamily.MIXER, dict(norm=NormKind.BATCHNORM)),
    (ModelFamily.CONVMIXER, dict(act=ActKind.GELU)),
]


@pytest.mark.parametrize("training", [False, True])
@pytest.mark.parametrize("family,overrides", MODEL_CASES)
def test_model_parameter_gradients(family, overrides, training):
    config = tiny_config(family, **overrides)
    model = build_model(config, seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    images = rng.uniform(size=(3, 1, config.image_size, config.image_size))
    labels = np.array([0, 2, 1])
    analytic, numeric = _parameter_gradients(model, images, labels, training)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    assert np.abs(analytic - numeric).max() / scale < TOLERANCE
