"""
MLP-like vision model: patch embedding, a stack of layers, pooled linear head
"""

import copy
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from ..core.errors import ConsistencyError
from ..core.functional import linear
from ..core.quantizers import PactParams
from ..core.rng import SplitMix64
from ..core.tensor import DEFAULT_DTYPE, Tape, Tensor, mean, reshape, transpose
from .config import ActKind, ModelConfig, ModelFamily, NormKind
from .context import ActivationRecorder, ForwardContext
from .layers import LAYER_FUNCTIONS, apply_activation, apply_norm, patch_embed

logger = structlog.get_logger(__name__)

BLOCKS = ('embed', 'token_mixing', 'channel_mixing', 'norm', 'head')


@dataclass
class ParamCount:
    """Parameter counts per block; the final norm is part of the head"""
    embed: int = 0
    token_mixing: int = 0
    channel_mixing: int = 0
    norm: int = 0
    head: int = 0

    @property
    def total(self) -> int:
        return self.embed + self.token_mixing + self.channel_mixing + self.norm + self.head

    def to_dict(self) -> Dict[str, int]:
        return {
            'embed': self.embed,
            'token_mixing': self.token_mixing,
            'channel_mixing': self.channel_mixing,
            'norm': self.norm,
            'head': self.head,
            'total': self.total,
        }


def block_of(name: str) -> Tuple[str, Optional[int]]:
    """Which block (and layer index) a parameter name belongs to"""
    parts = name.split('.')
    if parts[0] == 'layers':
        layer = int(parts[1])
        kind = parts[2]
        if kind in ('norm1', 'norm2'):
            return 'norm', layer
        return kind, layer
    return parts[0], None


def edge_layer(edge: str, depth: int) -> int:
    """Layer index of an activation edge; -1 for the embedding, depth for the head"""
    parts = edge.split('.')
    if parts[0] == 'layers':
        return int(parts[1])
    return -1 if parts[0] == 'embed' else depth


class MixerModel:
    """Parameters, buffers and the forward pass of one configured model"""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray],
                 buffers: Optional[Dict[str, np.ndarray]] = None,
                 quantizable: Optional[List[str]] = None):
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else OrderedDict()
        self.quantizable = list(quantizable or [])
        self.spec = config.layer_spec()

    @property
    def name(self) -> str:
        return self.config.label

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def context(self, tape: Optional[Tape] = None, training: bool = False, quant=None,
                recorder: Optional[ActivationRecorder] = None,
                params: Optional[Dict[str, np.ndarray]] = None) -> ForwardContext:
        return ForwardContext(params if params is not None else self.params, self.buffers,
                              tape=tape, training=training, quant=quant, recorder=recorder)

    def forward(self, images, ctx: ForwardContext) -> Tensor:
        """B x C_in x H x W images to B x classes logits"""
        cfg = self.config
        spec = self.spec
        x = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        x = patch_embed(x, ctx.weight('embed.proj.weight'), ctx.param('embed.proj.bias'), cfg.patch_size)
        token_axis = 1
        if cfg.family is ModelFamily.CONVMIXER:
            x = reshape(transpose(x, (0, 2, 1)), (x.shape[0], cfg.channels, cfg.grid, cfg.grid))
            x = apply_activation(x, ctx, 'embed.act', spec)
            x = apply_norm(x, ctx, 'embed.norm', spec, axis=1)
        x = ctx.activation('embed', x)

        layer_fn = LAYER_FUNCTIONS[cfg.family]
        for i in range(cfg.depth):
            x = layer_fn(x, ctx, f"layers.{i}", spec)

        channel_axis = 1 if cfg.family is ModelFamily.CONVMIXER else 2
        x = ctx.activation('head.norm', apply_norm(x, ctx, 'head.norm', spec, axis=channel_axis))
        pooled_axes = (2, 3) if cfg.family is ModelFamily.CONVMIXER else token_axis
        pooled = ctx.activation('head.pool', mean(x, pooled_axes))
        return linear(pooled, ctx.weight('head.fc.weight'), ctx.param('head.fc.bias'))

    def logits(self, images, quant=None, recorder: Optional[ActivationRecorder] = None) -> np.ndarray:
        """Inference-mode logits as a plain array"""
        ctx = self.context(quant=quant, recorder=recorder)
        return self.forward(images, ctx).data

    def predict(self, images, quant=None) -> np.ndarray:
        # argmax returns the lowest index on ties
        return np.argmax(self.logits(images, quant=quant), axis=1)

    def copy(self) -> 'MixerModel':
        return MixerModel(
            copy.deepcopy(self.config),
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
            self.quantizable,
        )

    def astype(self, dtype) -> 'MixerModel':
        clone = self.copy()
        clone.params = OrderedDict((k, v.astype(dtype)) for k, v in clone.params.items())
        clone.buffers = OrderedDict((k, v.astype(dtype)) for k, v in clone.buffers.items())
        return clone

    def apply_buffer_updates(self, updates: Dict[str, np.ndarray]):
        for name, value in updates.items():
            self.buffers[name] = value.astype(self.buffers[name].dtype)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict(self.params)
        state.update(('buffer:' + k, v) for k, v in self.buffers.items())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Replace parameters and buffers; names and shapes must match exactly"""
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        extra = [k for k in state if k not in expected]
        if missing or extra:
            raise ConsistencyError(f"checkpoint entries do not match the model: "
                                   f"missing {missing[:3]}, unexpected {extra[:3]}")
        for name, value in state.items():
            if value.shape != expected[name].shape:
                raise ConsistencyError(
                    f"'{name}' has shape {value.shape}, model expects {expected[name].shape}")
        for name in self.params:
            self.params[name] = np.array(state[name], dtype=self.params[name].dtype)
        for name in self.buffers:
            self.buffers[name] = np.array(state['buffer:' + name], dtype=self.buffers[name].dtype)


def build_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> MixerModel:
    """Initialize a model: weights truncated normal (std init_std), biases 0, norms identity"""
    config.validate()
    rng = SplitMix64(seed)
    params: Dict[str, np.ndarray] = OrderedDict()
    buffers: Dict[str, np.ndarray] = OrderedDict()
    quantizable: List[str] = []

    def weight(name: str, shape):
        params[name] = rng.truncated_normal(shape, std=config.init_std).astype(dtype)
        quantizable.append(name)

    def bias(name: str, size: int):
        params[name] = np.zeros(size, dtype=dtype)

    def norm(prefix: str, size: int):
        params[f"{prefix}.weight"] = np.ones(size, dtype=dtype)
        params[f"{prefix}.bias"] = np.zeros(size, dtype=dtype)
        if config.norm is NormKind.BATCHNORM:
            buffers[f"{prefix}.running_mean"] = np.zeros(size, dtype=dtype)
            buffers[f"{prefix}.running_var"] = np.ones(size, dtype=dtype)

    def act(prefix: str):
        if config.act is ActKind.PACT:
            params[f"{prefix}.alpha"] = PactParams(config.pact_alpha).as_parameter(dtype)

    c, t = config.channels, config.tokens
    weight('embed.proj.weight', (c, config.patch_dim))
    bias('embed.proj.bias', c)
    if config.family is ModelFamily.CONVMIXER:
        act('embed.act')
        norm('embed.norm', c)

    for i in range(config.depth):
        prefix = f"layers.{i}"
        token = f"{prefix}.token_mixing"
        channel = f"{prefix}.channel_mixing"
        if config.family is ModelFamily.CONVMIXER:
            k = config.kernel_size
            weight(f"{token}.depthwise.weight", (c, 1, k, k))
            bias(f"{token}.depthwise.bias", c)
            act(f"{token}.act")
            norm(f"{prefix}.norm1", c)
            weight(f"{channel}.pointwise.weight", (c, c, 1, 1))
            bias(f"{channel}.pointwise.bias", c)
            norm(f"{prefix}.norm2", c)
            continue
        norm(f"{prefix}.norm1", c)
        for g in range(config.groups):
            if config.family is ModelFamily.MIXER:
                weight(f"{token}.{g}.fc1.weight", (config.token_hidden, t))
                bias(f"{token}.{g}.fc1.bias", config.token_hidden)
                weight(f"{token}.{g}.fc2.weight", (t, config.token_hidden))
                bias(f"{token}.{g}.fc2.bias", t)
            else:
                weight(f"{token}.{g}.proj.weight", (t, t))
                bias(f"{token}.{g}.proj.bias", t)
        if config.family is ModelFamily.MIXER:
            act(f"{token}.act")
        norm(f"{prefix}.norm2", c)
        weight(f"{channel}.fc1.weight", (config.channel_hidden, c))
        bias(f"{channel}.fc1.bias", config.channel_hidden)
        act(f"{channel}.act")
        weight(f"{channel}.fc2.weight", (c, config.channel_hidden))
        bias(f"{channel}.fc2.bias", c)

    norm('head.norm', c)
    weight('head.fc.weight', (config.num_classes, c))
    bias('head.fc.bias', config.num_classes)

    model = MixerModel(config, params, buffers, quantizable)
    logger.debug("Model built", model=model.name, params=count_params(model).total, seed=seed)
    return model


def count_params(model: MixerModel) -> ParamCount:
    counts = ParamCount()
    for name, value in model.params.items():
        block, _ = block_of(name)
        setattr(counts, block, getattr(counts, block) + int(value.size))
    return counts


def count_flops(config: ModelConfig) -> int:
    """Multiply-accumulates per image in linear and convolution layers"""
    c, t = config.channels, config.tokens
    total = t * c * config.patch_dim
    for _ in range(config.depth):
        if config.family is ModelFamily.MIXER:
            total += c * 2 * t * config.token_hidden
            total += t * 2 * c * config.channel_hidden
        elif config.family is ModelFamily.RESMLP:
            total += c * t * t
            total += t * 2 * c * config.channel_hidden
        else:
            total += t * c * config.kernel_size ** 2
            total += t * c * c
    total += c * config.num_classes
    return total
