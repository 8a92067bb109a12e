"""
Uniform quantization: parameters, quantize/dequantize, fake quantization and PACT
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor, apply_op

SCALE_FLOOR = 1e-8
MIN_BITS = 2
MAX_BITS = 8
DEFAULT_PACT_ALPHA = 6.0
# Asymmetric zero points are clamped to this magnitude so they fit int64
ZERO_POINT_LIMIT = 2 ** 62


class QuantScheme(Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


class Granularity(Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero"""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v >= 0, np.floor(v + 0.5), -np.floor(-v + 0.5))


def _check_bits(bits: int):
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ContractError(f"bit-width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits}")


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Scale and zero point for one tensor (or one vector per channel)"""
    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    scheme: QuantScheme = QuantScheme.SYMMETRIC
    granularity: Granularity = Granularity.PER_TENSOR
    axis: Optional[int] = None

    def __post_init__(self):
        _check_bits(self.bits)
        scale = np.asarray(self.scale, dtype=np.float64)
        zero_point = np.asarray(self.zero_point, dtype=np.int64)
        if scale.shape != zero_point.shape:
            raise ContractError(f"scale {scale.shape} and zero point {zero_point.shape} differ in shape")
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ContractError("scale must be finite and positive")
        if self.scheme is QuantScheme.SYMMETRIC and np.any(zero_point != 0):
            raise ContractError("symmetric quantization requires a zero point of 0")
        if self.granularity is Granularity.PER_CHANNEL:
            if self.axis is None or scale.ndim != 1:
                raise ContractError("per-channel parameters need an axis and one scale per channel")
        elif scale.ndim != 0:
            raise ContractError("per-tensor parameters need a scalar scale")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zero_point)

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def broadcast(self, ndim: int) -> Tuple[np.ndarray, np.ndarray]:
        """Scale and zero point shaped to broadcast against a rank-`ndim` tensor"""
        if self.granularity is Granularity.PER_TENSOR:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.axis % ndim] = self.scale.shape[0]
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def representable_range(self, ndim: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        scale, zero_point = self.broadcast(ndim)
        return scale * (self.qmin - zero_point), scale * (self.qmax - zero_point)

    def _check_operand(self, shape: Tuple[int, ...]):
        if self.granularity is Granularity.PER_CHANNEL:
            if not shape or shape[self.axis % len(shape)] != self.scale.shape[0]:
                raise ContractError(
                    f"tensor of shape {shape} does not have {self.scale.shape[0]} channels on axis {self.axis}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scale": self.scale.tolist(),
            "zero_point": self.zero_point.tolist(),
            "bits": int(self.bits),
            "scheme": self.scheme.value,
            "granularity": self.granularity.value,
            "axis": self.axis,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuantParams":
        return cls(
            scale=np.asarray(data["scale"], dtype=np.float64),
            zero_point=np.asarray(data["zero_point"], dtype=np.int64),
            bits=int(data["bits"]),
            scheme=QuantScheme(data.get("scheme", "symmetric")),
            granularity=Granularity(data.get("granularity", "per_tensor")),
            axis=data.get("axis"),
        )


def compute_qparams(r_min, r_max, bits: int,
                    scheme: QuantScheme = QuantScheme.SYMMETRIC) -> QuantParams:
    """Scale and zero point covering [r_min, r_max]

    Scalar bounds give per-tensor parameters; 1-D bounds give one entry per
    channel with axis 0.
    """
    _check_bits(bits)
    scheme = QuantScheme(scheme)
    r_min = np.asarray(r_min, dtype=np.float64)
    r_max = np.asarray(r_max, dtype=np.float64)
    if r_min.shape != r_max.shape:
        raise ContractError(f"range bounds differ in shape: {r_min.shape} vs {r_max.shape}")
    if not (np.all(np.isfinite(r_min)) and np.all(np.isfinite(r_max))):
        raise NumericError("range bounds must be finite")
    if np.any(r_min > r_max):
        raise ContractError(f"r_min must not exceed r_max, got {r_min} > {r_max}")

    if scheme is QuantScheme.SYMMETRIC:
        scale = np.maximum(np.abs(r_max), np.abs(r_min)) / (2 ** (bits - 1) - 1)
        scale = np.maximum(scale, SCALE_FLOOR)
        zero_point = np.zeros(scale.shape, dtype=np.int64)
    else:
        scale = np.maximum((r_max - r_min) / (2 ** bits - 1), SCALE_FLOOR)
        zero_point = round_half_away((2 ** (bits - 1) - 1) - r_max / scale)
        zero_point = np.clip(zero_point, -float(ZERO_POINT_LIMIT), float(ZERO_POINT_LIMIT)).astype(np.int64)

    granularity = Granularity.PER_TENSOR if scale.ndim == 0 else Granularity.PER_CHANNEL
    return QuantParams(scale=scale, zero_point=zero_point, bits=bits, scheme=scheme,
                       granularity=granularity, axis=None if scale.ndim == 0 else 0)


def per_channel_qparams(w, bits: int, axis: int = 0) -> QuantParams:
    """Symmetric per-output-channel parameters from each channel's extremes"""
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if w.ndim == 0 or w.shape[axis] == 0:
        raise ContractError(f"no channels on axis {axis} of shape {w.shape}")
    rows = np.moveaxis(w, axis, 0).reshape(w.shape[axis], -1)
    if rows.shape[1] == 0:
        raise ContractError(f"channels of shape {w.shape} are empty")
    qp = compute_qparams(rows.min(axis=1), rows.max(axis=1), bits, QuantScheme.SYMMETRIC)
    return QuantParams(scale=qp.scale, zero_point=qp.zero_point, bits=bits,
                       scheme=QuantScheme.SYMMETRIC, granularity=Granularity.PER_CHANNEL, axis=axis)


def quantize(x, qp: QuantParams) -> Tensor:
    """Real values to clamped integer codes (int32 tensor)"""
    values = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("cannot quantize non-finite values")
    qp._check_operand(values.shape)
    scale, zero_point = qp.broadcast(values.ndim)
    codes = np.clip(round_half_away(values / scale + zero_point), qp.qmin, qp.qmax)
    return Tensor(codes.astype(np.int32), copy=False)


def dequantize(q, qp: QuantParams, dtype=np.float64) -> Tensor:
    codes = np.asarray(q.data if isinstance(q, Tensor) else q)
    if codes.dtype.kind not in "iu":
        raise ContractError(f"dequantize expects integer codes, got {codes.dtype}")
    if codes.size and (codes.min() < qp.qmin or codes.max() > qp.qmax):
        raise ContractError(f"codes outside [{qp.qmin}, {qp.qmax}]")
    qp._check_operand(codes.shape)
    scale, zero_point = qp.broadcast(codes.ndim)
    return Tensor((scale * (codes - zero_point)).astype(dtype), copy=False)


def fake_quant(x: Tensor, qp: QuantParams) -> Tensor:
    """dequantize(quantize(x)) with a straight-through gradient inside the range"""
    values = x.data.astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("cannot fake-quantize non-finite values")
    qp._check_operand(values.shape)
    scale, zero_point = qp.broadcast(values.ndim)
    codes = np.clip(round_half_away(values / scale + zero_point), qp.qmin, qp.qmax)
    out = (scale * (codes - zero_point)).astype(x.dtype)
    lo, hi = qp.representable_range(values.ndim)
    mask = (values >= lo) & (values <= hi)
    return apply_op("fake_quant", (x,), out, lambda g: (g * mask,))


def quant_error(x, qp: QuantParams) -> float:
    """Mean squared error introduced by fake quantization"""
    values = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    restored = dequantize(quantize(values, qp), qp).data
    return float(np.mean((values - restored) ** 2))


@dataclass
class PactParams:
    """Initial clipping level of a PACT activation"""
    alpha: float = DEFAULT_PACT_ALPHA

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError(f"PACT alpha must be positive, got {self.alpha}")

    def as_parameter(self, dtype=np.float32) -> np.ndarray:
        """The one-element array a model trains in place of alpha"""
        return np.array([self.alpha], dtype=dtype)


def pact(x: Tensor, alpha: Tensor) -> Tensor:
    """Clip to [0, alpha]; alpha receives the gradient of the clipped region"""
    a = alpha.data
    if a.size != 1:
        raise ContractError(f"PACT alpha must be a scalar, got shape {alpha.shape}")
    if not float(a.reshape(())) > 0:
        raise ContractError(f"PACT alpha must be positive, got {float(a.reshape(()))}")
    level = a.reshape(())
    clipped = x.data >= level
    passing = (x.data >= 0) & ~clipped
    out = np.where(x.data < 0, 0, np.where(clipped, level, x.data)).astype(x.dtype)

    def _backward(g):
        return g * passing, np.asarray((g * clipped).sum()).reshape(alpha.shape)

    return apply_op("pact", (x, alpha), out, _backward)
