"""
Numerical core: tensors and autograd, quantizers, observers

Procedures that depend on the model zoo (pipeline, sensitivity, datasets,
experiments, config_parser, optim) are imported from their modules directly.
"""

from .errors import (
    MixQuantError, DimensionError, ContractError, DegenerateInputError, NumericError,
    UnsupportedConfigurationError, ConfigError, ParseError, FormatError, ConsistencyError,
    DivergenceError,
)
from .tensor import Tensor, Tape, backward, matmul, einsum, moments
from .functional import ConvMode, conv2d, gelu, relu, linear, cross_entropy
from .gradcheck import GradCheckResult, grad_check, numeric_gradient, avoid_kinks
from .rng import SplitMix64
from .quantizers import (
    QuantScheme, Granularity, QuantParams, PactParams, compute_qparams, per_channel_qparams,
    quantize, dequantize, fake_quant, quant_error, pact,
)
from .observers import ObserverKind, RangeObserver
from .quant_state import QuantMode, QuantState

__all__ = [
    'MixQuantError', 'DimensionError', 'ContractError', 'DegenerateInputError', 'NumericError',
    'UnsupportedConfigurationError', 'ConfigError', 'ParseError', 'FormatError',
    'ConsistencyError', 'DivergenceError',
    'Tensor', 'Tape', 'backward', 'matmul', 'einsum', 'moments',
    'ConvMode', 'conv2d', 'gelu', 'relu', 'linear', 'cross_entropy',
    'GradCheckResult', 'grad_check', 'numeric_gradient', 'avoid_kinks',
    'SplitMix64',
    'QuantScheme', 'Granularity', 'QuantParams', 'PactParams', 'compute_qparams',
    'per_channel_qparams', 'quantize', 'dequantize', 'fake_quant', 'quant_error', 'pact',
    'ObserverKind', 'RangeObserver',
    'QuantMode', 'QuantState',
]
