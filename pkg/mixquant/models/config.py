"""
Configuration models for architectures, quantization, training, data and output
"""

from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Dict, Optional, get_type_hints

import structlog

from ..core.errors import ConfigError
from ..core.observers import ObserverKind
from ..core.quantizers import QuantScheme

logger = structlog.get_logger(__name__)

FULL_PRECISION_BITS = 32


class ModelFamily(Enum):
    MIXER = "mixer"
    RESMLP = "resmlp"
    CONVMIXER = "convmixer"


class NormKind(Enum):
    AFFINE = "affine"
    LAYERNORM = "layernorm"
    BATCHNORM = "batchnorm"


class ActKind(Enum):
    GELU = "gelu"
    RELU = "relu"
    PACT = "pact"


class OptimizerKind(Enum):
    ADAM = "adam"
    SGD = "sgd"


class TrainMode(Enum):
    FROM_SCRATCH = "from_scratch"
    QAT_FINETUNE = "qat_finetune"


class DataSource(Enum):
    SYNTHETIC = "synthetic"
    IDX = "idx"


class ReportFormat(Enum):
    CSV = "csv"
    JSON = "json"


def _section_to_dict(section) -> Dict[str, Any]:
    result = {}
    for f in fields(section):
        value = getattr(section, f.name)
        result[f.name] = value.value if isinstance(value, Enum) else value
    return result


def _section_from_dict(cls, data: Dict[str, Any], section_name: str):
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError("unknown key", f"{section_name}.{key}")
        kwargs[key] = coerce_value(value, hints[key], f"{section_name}.{key}")
    return cls(**kwargs)


def coerce_value(value: Any, target: type, field_name: str) -> Any:
    """Convert a raw (usually textual) value to a field's declared type"""
    try:
        if isinstance(target, type) and issubclass(target, Enum):
            return target(value.lower() if isinstance(value, str) else value)
        if target is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ('true', 'yes', '1', 'on'):
                return True
            if text in ('false', 'no', '0', 'off'):
                return False
            raise ValueError(value)
        if target is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if target is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if target is str:
            return str(value)
    except (ValueError, TypeError):
        expected = getattr(target, '__name__', str(target))
        raise ConfigError(f"expected {expected}, got {value!r}", field_name)
    return value


@dataclass
class LayerSpec:
    """Shape and choices shared by every layer of one model"""
    family: ModelFamily
    tokens: int
    channels: int
    token_hidden: int
    channel_hidden: int
    norm: NormKind = NormKind.LAYERNORM
    act: ActKind = ActKind.GELU
    groups: int = 1
    kernel_size: int = 3
    grid: int = 0
    norm_eps: float = 1e-5
    bn_momentum: float = 0.9


@dataclass
class ModelConfig:
    """Architecture of an MLP-like vision model"""

    # Family and depth
    family: ModelFamily = ModelFamily.MIXER
    depth: int = 4

    # Input and patching
    image_size: int = 16
    in_channels: int = 1
    patch_size: int = 4

    # Widths
    channels: int = 32
    token_hidden: int = 16
    channel_hidden: int = 64
    num_classes: int = 10

    # Layer choices
    norm: NormKind = NormKind.LAYERNORM
    act: ActKind = ActKind.GELU
    groups: int = 4
    kernel_size: int = 3
    pact_alpha: float = 6.0
    norm_eps: float = 1e-5
    bn_momentum: float = 0.9
    init_std: float = 0.02

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def label(self) -> str:
        return f"{self.family.value}-{self.norm.value}-{self.act.value}-g{self.groups}-d{self.depth}"

    def layer_spec(self) -> LayerSpec:
        return LayerSpec(
            family=self.family, tokens=self.tokens, channels=self.channels,
            token_hidden=self.token_hidden, channel_hidden=self.channel_hidden,
            norm=self.norm, act=self.act, groups=self.groups,
            kernel_size=self.kernel_size, grid=self.grid,
            norm_eps=self.norm_eps, bn_momentum=self.bn_momentum,
        )

    def validate(self):
        for name in ('depth', 'image_size', 'in_channels', 'patch_size', 'channels',
                     'token_hidden', 'channel_hidden', 'num_classes', 'groups', 'kernel_size'):
            minimum = 0 if name == 'depth' else 1
            if getattr(self, name) < minimum:
                raise ConfigError(f"must be >= {minimum}", f"model.{name}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image size {self.image_size}", 'model.patch_size')
        if self.family is ModelFamily.CONVMIXER:
            if self.kernel_size % 2 == 0:
                raise ConfigError("depthwise kernel size must be odd", 'model.kernel_size')
            if self.groups != 1:
                logger.warning("Token groups are ignored for convmixer", groups=self.groups)
        elif self.channels % self.groups:
            raise ConfigError(
                f"groups {self.groups} do not divide channels {self.channels}", 'model.groups')
        if self.pact_alpha <= 0:
            raise ConfigError("must be positive", 'model.pact_alpha')
        if self.norm_eps < 0:
            raise ConfigError("must be non-negative", 'model.norm_eps')
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ConfigError("must be in [0, 1)", 'model.bn_momentum')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _section_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        return _section_from_dict(cls, data, 'model')


@dataclass
class QuantConfig:
    """Bit-widths and range estimation; 32 bits means not quantized"""
    weight_bits: int = 8
    act_bits: int = 8
    act_scheme: QuantScheme = QuantScheme.SYMMETRIC
    observer: ObserverKind = ObserverKind.EMA
    ema_momentum: float = 0.9
    ema_warm_start: bool = True
    percentile: float = 0.99
    calib_batches: int = 16
    calib_batch_size: int = 64

    @property
    def weights_quantized(self) -> bool:
        return self.weight_bits != FULL_PRECISION_BITS

    @property
    def acts_quantized(self) -> bool:
        return self.act_bits != FULL_PRECISION_BITS

    @property
    def precision_label(self) -> str:
        return f"W{self.weight_bits}A{self.act_bits}"

    def validate(self):
        if self.weights_quantized and not 2 <= self.weight_bits <= 8:
            raise ConfigError("must be in [2, 8] or 32", 'quant.weight_bits')
        if self.act_bits not in (8, FULL_PRECISION_BITS):
            raise ConfigError("activations support 8 or 32 bits", 'quant.act_bits')
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("must be in [0, 1)", 'quant.ema_momentum')
        if not 0.5 < self.percentile <= 1.0:
            raise ConfigError("must be in (0.5, 1]", 'quant.percentile')
        if self.calib_batches < 1 or self.calib_batch_size < 1:
            raise ConfigError("calibration needs at least one non-empty batch", 'quant.calib_batches')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _section_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'QuantConfig':
        return _section_from_dict(cls, data, 'quant')


@dataclass
class TrainConfig:
    """Optimizer and schedule for from-scratch training and QAT fine-tuning"""
    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    qat_learning_rate: float = 2e-5
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 10
    qat_epochs: int = 3
    batch_size: int = 64
    seed: int = 0
    mode: TrainMode = TrainMode.FROM_SCRATCH
    min_pact_alpha: float = 1e-3

    @property
    def effective_learning_rate(self) -> float:
        return self.qat_learning_rate if self.mode is TrainMode.QAT_FINETUNE else self.learning_rate

    @property
    def effective_epochs(self) -> int:
        return self.qat_epochs if self.mode is TrainMode.QAT_FINETUNE else self.epochs

    def validate(self):
        if self.learning_rate < 0 or self.qat_learning_rate < 0:
            raise ConfigError("must be non-negative", 'train.learning_rate')
        if self.epochs < 0 or self.qat_epochs < 0:
            raise ConfigError("must be non-negative", 'train.epochs')
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", 'train.batch_size')
        for name in ('momentum', 'beta1', 'beta2'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("must be in [0, 1)", f"train.{name}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _section_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        return _section_from_dict(cls, data, 'train')


@dataclass
class DataConfig:
    """Where images come from; synthetic sizes follow the model config"""
    source: DataSource = DataSource.SYNTHETIC
    n_train: int = 2000
    n_test: int = 500
    noise: float = 0.3
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def validate(self):
        if self.source is DataSource.IDX:
            for name in ('train_images', 'train_labels', 'test_images', 'test_labels'):
                if not getattr(self, name):
                    raise ConfigError("required for idx data", f"data.{name}")
        elif self.n_train < 1 or self.n_test < 1:
            raise ConfigError("must be >= 1", 'data.n_train')
        if self.noise < 0:
            raise ConfigError("must be non-negative", 'data.noise')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _section_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DataConfig':
        return _section_from_dict(cls, data, 'data')


@dataclass
class OutputConfig:
    """Output directory, artifact names and report format"""
    directory: str = "runs"
    checkpoint: str = "model.ckpt"
    qat_checkpoint: str = "model-qat.ckpt"
    report_format: ReportFormat = ReportFormat.CSV
    threads: int = 1
    eval_batch_size: int = 256
    sensitivity_samples: int = 16
    sensitivity_batch: int = 256
    fd_eps: float = 1e-4
    profile_percentile: float = 0.99

    def report_path(self, stem: str) -> str:
        return f"{stem}.{self.report_format.value}"

    def validate(self):
        if self.threads < 0:
            raise ConfigError("must be >= 0 (0 picks the physical core count)", 'output.threads')
        if self.eval_batch_size < 1 or self.sensitivity_batch < 1:
            raise ConfigError("must be >= 1", 'output.eval_batch_size')
        if self.sensitivity_samples < 1:
            raise ConfigError("must be >= 1", 'output.sensitivity_samples')
        if self.fd_eps <= 0:
            raise ConfigError("must be positive", 'output.fd_eps')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _section_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OutputConfig':
        return _section_from_dict(cls, data, 'output')


@dataclass
class RunConfig:
    """Everything one CLI invocation needs"""
    model: ModelConfig = field(default_factory=ModelConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    SECTIONS = ('model', 'quant', 'train', 'data', 'output')

    def section(self, name: str):
        if name not in self.SECTIONS:
            raise ConfigError(f"unknown section '{name}'")
        return getattr(self, name)

    def validate(self) -> 'RunConfig':
        for name in self.SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name).to_dict() for name in self.SECTIONS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        unknown = set(data) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section '{sorted(unknown)[0]}'")
        return cls(
            model=ModelConfig.from_dict(data.get('model', {})),
            quant=QuantConfig.from_dict(data.get('quant', {})),
            train=TrainConfig.from_dict(data.get('train', {})),
            data=DataConfig.from_dict(data.get('data', {})),
            output=OutputConfig.from_dict(data.get('output', {})),
        )

    def to_text(self) -> str:
        """Render in the config file format; parse_config(to_text()) reproduces self"""
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            for key, value in getattr(self, name).to_dict().items():
                lines.append(f"{key} = {format_value(value)}")
            lines.append("")
        return "\n".join(lines)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def model_config_for(family: ModelFamily, base: Optional[ModelConfig] = None, **overrides) -> ModelConfig:
    """Copy of `base` switched to `family`, with token groups reset for convmixer"""
    data = (base or ModelConfig()).to_dict()
    data['family'] = family.value
    if family is ModelFamily.CONVMIXER:
        data['groups'] = 1
    for key, value in overrides.items():
        data[key] = value.value if isinstance(value, Enum) else value
    return ModelConfig.from_dict(data)
