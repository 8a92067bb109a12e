"""
Tests for finite-difference Hessian-vector products and Hutchinson traces
"""

import numpy as np
import pytest

from conftest import tiny_config
from mixquant.core import sensitivity
from mixquant.core.datasets import synth_dataset
from mixquant.core.errors import ContractError, NumericError
from mixquant.core.sensitivity import block_report, hutchinson_trace, hvp_fd, sensitivity_summary
from mixquant.models.mixer import build_model, count_params
from mixquant.models.report import SensitivityRow

A = np.array([[2.0, 1.0], [1.0, 3.0]])


def _quadratic(matrix):
    return lambda theta: matrix @ theta


def test_hvp_of_quadratic():
    hv = hvp_fd(_quadratic(A), np.array([0.3, -0.7]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(hv, [2.0, 1.0], rtol=1e-8)


def test_hvp_zero_direction():
    np.testing.assert_array_equal(hvp_fd(_quadratic(A), np.ones(2), np.zeros(2)), [0.0, 0.0])


def test_hvp_of_linear_loss_is_zero():
    hv = hvp_fd(lambda theta: np.array([1.0, -2.0]), np.ones(2), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(hv, [0.0, 0.0])


def test_hvp_shape_mismatch():
    with pytest.raises(ContractError):
        hvp_fd(_quadratic(A), np.ones(2), np.ones(3))


def test_hvp_non_finite_gradient():
    with pytest.raises(NumericError):
        hvp_fd(lambda theta: theta * np.inf, np.ones(2), np.ones(2))


def test_trace_of_diagonal_is_exact():
    trace = hutchinson_trace(_quadratic(np.diag([1.0, 2.0, 3.0])), np.zeros(3), np.arange(3), samples=5, seed=0)
    assert trace == pytest.approx(6.0, abs=1e-6)


def test_trace_of_coupled_quadratic_converges():
    trace = hutchinson_trace(_quadratic(A), np.zeros(2), np.arange(2), samples=2000, seed=11)
    assert trace == pytest.approx(5.0, rel=0.02)


def test_trace_scales_with_the_loss():
    matrix = np.array([[1.0, 0.5, 0.0], [0.5, 2.0, 0.3], [0.0, 0.3, 4.0]])
    base = hutchinson_trace(_quadratic(matrix), np.ones(3), np.arange(3), samples=16, seed=4)
    scaled = hutchinson_trace(_quadratic(2.5 * matrix), np.ones(3), np.arange(3), samples=16, seed=4)
    assert scaled == pytest.approx(2.5 * base, rel=1e-9)


def test_trace_restricted_to_block():
    matrix = np.diag([1.0, 2.0, 3.0, 4.0])
    mask = np.array([False, True, False, True])
    trace = hutchinson_trace(_quadratic(matrix), np.zeros(4), mask, samples=3, seed=1)
    assert trace == pytest.approx(6.0, abs=1e-6)


def test_trace_of_flat_loss_is_zero():
    assert hutchinson_trace(lambda theta: np.zeros_like(theta), np.ones(4), np.arange(4), 8, seed=2) == 0.0


def test_trace_is_thread_independent():
    grad_fn = _quadratic(np.array([[1.0, 0.5, 0.0], [0.5, 2.0, 0.3], [0.0, 0.3, 4.0]]))
    serial = hutchinson_trace(grad_fn, np.ones(3), np.arange(3), samples=32, seed=7, threads=1)
    parallel = hutchinson_trace(grad_fn, np.ones(3), np.arange(3), samples=32, seed=7, threads=4)
    assert serial == parallel


@pytest.mark.parametrize("block", [np.zeros(0, dtype=np.int64), np.zeros(3, dtype=bool), np.array([5])])
def test_invalid_blocks(block):
    with pytest.raises(ContractError):
        hutchinson_trace(_quadratic(np.eye(3)), np.zeros(3), block, samples=1, seed=0)


def test_trace_needs_a_sample():
    with pytest.raises(ContractError):
        hutchinson_trace(_quadratic(np.eye(2)), np.zeros(2), np.arange(2), samples=0, seed=0)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def batch():
    data = synth_dataset(seed=1, n=6, classes=3, height=4, width=4)
    return data.images, data.labels


def test_block_report_rows(tiny_model, batch):
    rows = block_report(tiny_model, *batch, samples=3, seed=5)
    counts = count_params(tiny_model)
    assert [(r.layer, r.block) for r in rows] == [(0, 'token_mixing'), (0, 'channel_mixing')]
    assert rows[0].param_count == counts.token_mixing
    assert rows[1].param_count == counts.channel_mixing
    for row in rows:
        assert np.isfinite(row.trace)
        assert row.normalized_trace == pytest.approx(row.trace / row.param_count)
        assert row.samples == 3 and row.seed == 5


def test_block_report_is_reproducible(tiny_model, batch):
    first = block_report(tiny_model, *batch, samples=2, seed=3)
    second = block_report(tiny_model, *batch, samples=2, seed=3, threads=2)
    assert [r.trace for r in first] == [r.trace for r in second]


def test_block_report_needs_images(tiny_model):
    with pytest.raises(ContractError):
        block_report(tiny_model, np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=np.int64))


def test_sensitivity_summary_averages_per_block():
    rows = [SensitivityRow(layer=i, block=block, trace=t, param_count=1, normalized_trace=t, samples=1, seed=0)
            for i, (block, t) in enumerate([('token_mixing', 1.0), ('token_mixing', 3.0),
                                            ('channel_mixing', 0.5)])]
    assert sensitivity_summary(rows) == {'token_mixing': 2.0, 'channel_mixing': 0.5}


def test_block_report_names_the_failing_block(tiny_model, batch, monkeypatch):
    def diverging(grad_fn, theta, v, eps):
        raise NumericError("gradient is not finite at a finite-difference point")

    monkeypatch.setattr(sensitivity, 'hvp_fd', diverging)
    with pytest.raises(NumericError, match="layer 0 token_mixing: gradient is not finite") as e:
        block_report(tiny_model, *batch, samples=1, seed=0)
    assert isinstance(e.value.__cause__, NumericError)
