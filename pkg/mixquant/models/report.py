"""
Report rows written to CSV/JSON result files
"""

from dataclasses import dataclass
from typing import Any, Dict

from ..core.errors import FormatError


@dataclass
class MetricRow:
    """Accuracy and cost of one model at one precision"""
    model: str
    precision: str
    size_mb: float
    bops_g: float
    top1: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.model,
            'precision': self.precision,
            'size_mb': self.size_mb,
            'bops_g': self.bops_g,
            'top1': self.top1,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricRow':
        try:
            return cls(
                model=str(data['model']),
                precision=str(data['precision']),
                size_mb=float(data['size_mb']),
                bops_g=float(data['bops_g']),
                top1=float(data['top1']),
            )
        except KeyError as e:
            raise FormatError(f"metric row is missing column {e}") from e
        except (TypeError, ValueError) as e:
            raise FormatError(f"malformed metric row: {e}") from e


@dataclass
class SensitivityRow:
    """Hessian-trace sensitivity of one parameter block"""
    layer: int
    block: str
    trace: float
    param_count: int
    normalized_trace: float
    samples: int
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'layer': self.layer,
            'block': self.block,
            'trace': self.trace,
            'param_count': self.param_count,
            'normalized_trace': self.normalized_trace,
            'samples': self.samples,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SensitivityRow':
        return cls(
            layer=int(data['layer']),
            block=str(data['block']),
            trace=float(data['trace']),
            param_count=int(data['param_count']),
            normalized_trace=float(data['normalized_trace']),
            samples=int(data['samples']),
            seed=int(data['seed']),
        )


@dataclass
class ProfileRow:
    """Activation magnitude at one edge of the network"""
    edge: str
    layer: int
    position_pct: float
    max_abs: float
    quantile_abs: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'edge': self.edge,
            'layer': self.layer,
            'position_pct': self.position_pct,
            'max_abs': self.max_abs,
            'quantile_abs': self.quantile_abs,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ProfileRow':
        return cls(
            edge=str(data['edge']),
            layer=int(data['layer']),
            position_pct=float(data['position_pct']),
            max_abs=float(data['max_abs']),
            quantile_abs=float(data['quantile_abs']),
        )


@dataclass
class RangeRow:
    """Calibrated activation range and its quantization parameters"""
    edge: str
    r_min: float
    r_max: float
    scale: float
    zero_point: int
    bits: int
    scheme: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'edge': self.edge,
            'r_min': self.r_min,
            'r_max': self.r_max,
            'scale': self.scale,
            'zero_point': self.zero_point,
            'bits': self.bits,
            'scheme': self.scheme,
        }


@dataclass
class LossRow:
    epoch: int
    loss: float

    def to_dict(self) -> Dict[str, Any]:
        return {'epoch': self.epoch, 'loss': self.loss}


@dataclass
class ExperimentRow:
    """One measured value of one experiment variant (long format)"""
    experiment: str
    seed: int
    variant: str
    metric: str
    value: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'experiment': self.experiment,
            'seed': self.seed,
            'variant': self.variant,
            'metric': self.metric,
            'value': self.value,
        }
