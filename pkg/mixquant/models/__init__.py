"""
Data models and the model zoo for mixquant
"""

from .config import (
    ModelFamily, NormKind, ActKind, OptimizerKind, TrainMode, DataSource, ReportFormat,
    LayerSpec, ModelConfig, QuantConfig, TrainConfig, DataConfig, OutputConfig, RunConfig,
)
from .dataset import Dataset
from .report import MetricRow, SensitivityRow, ProfileRow, RangeRow, LossRow, ExperimentRow
from .context import ForwardContext
from .mixer import MixerModel, ParamCount, build_model, count_params, count_flops

__all__ = [
    'ModelFamily', 'NormKind', 'ActKind', 'OptimizerKind', 'TrainMode', 'DataSource', 'ReportFormat',
    'LayerSpec', 'ModelConfig', 'QuantConfig', 'TrainConfig', 'DataConfig', 'OutputConfig', 'RunConfig',
    'Dataset',
    'MetricRow', 'SensitivityRow', 'ProfileRow', 'RangeRow', 'LossRow', 'ExperimentRow',
    'ForwardContext',
    'MixerModel', 'ParamCount', 'build_model', 'count_params', 'count_flops',
]
