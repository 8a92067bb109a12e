"""
Training, quantization (PTQ and QAT), evaluation and activation profiling
"""

import copy
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import structlog

from ..models.config import QuantConfig, TrainConfig, TrainMode
from ..models.dataset import Dataset
from ..models.mixer import MixerModel, count_flops, count_params, edge_layer
from ..models.report import LossRow, MetricRow, ProfileRow, RangeRow
from .errors import ContractError, DivergenceError
from .functional import cross_entropy, per_sample_cross_entropy
from .observers import ObserverKind, RangeObserver
from .optim import make_optimizer
from .quant_state import QuantMode, QuantState
from .rng import SplitMix64
from .tensor import Tape, Tensor, backward

logger = structlog.get_logger(__name__)


@dataclass
class QuantizedModel:
    """A model together with the quantization state its forward pass uses"""
    model: MixerModel
    state: QuantState

    @property
    def name(self) -> str:
        return self.model.name

    @property
    def quant_config(self) -> QuantConfig:
        return self.state.config

    def logits(self, images) -> np.ndarray:
        return self.model.logits(images, quant=self.state)

    def predict(self, images) -> np.ndarray:
        return self.model.predict(images, quant=self.state)

    def range_rows(self) -> List[RangeRow]:
        rows = []
        for edge, qp in self.state.act_qparams.items():
            observer = self.state.observers.get(edge)
            r_min, r_max = observer.range if observer else (float('nan'), float('nan'))
            rows.append(RangeRow(
                edge=edge, r_min=float(r_min), r_max=float(r_max), scale=float(qp.scale),
                zero_point=int(qp.zero_point), bits=qp.bits, scheme=qp.scheme.value))
        return rows


Trainable = Union[MixerModel, QuantizedModel]


@dataclass
class TrainResult:
    model: Trainable
    losses: List[LossRow] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.losses[-1].loss if self.losses else float('nan')


def train(model: Trainable, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Minibatch training on a copy of `model`

    Each epoch visits the samples in a seeded permutation. In qat_finetune
    mode the model must already carry fake quantization (insert_fake_quant).
    The per-epoch loss is the mean per-sample loss in sample-index order.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if config.mode is TrainMode.QAT_FINETUNE and not isinstance(model, QuantizedModel):
        raise ContractError("qat_finetune needs a model with fake quantization inserted")

    if isinstance(model, QuantizedModel):
        trained = QuantizedModel(model.model.copy(), copy.deepcopy(model.state))
        net, quant = trained.model, trained.state
    else:
        trained = model.copy()
        net, quant = trained, None

    optimizer = make_optimizer(config)
    rng = SplitMix64(config.seed)
    losses: List[LossRow] = []
    per_sample = np.zeros(len(dataset), dtype=np.float64)
    started = time.monotonic()
    epochs = config.effective_epochs
    logger.info("Training started", model=net.name, mode=config.mode.value, epochs=epochs,
                samples=len(dataset), learning_rate=config.effective_learning_rate)

    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        seen = np.zeros(len(dataset), dtype=bool)
        for step, (index, images, labels) in enumerate(dataset.batches(config.batch_size, order, min_size=2)):
            tape = Tape()
            ctx = net.context(tape=tape, training=True, quant=quant)
            logits = net.forward(Tensor(images, dtype=net.dtype), ctx)
            loss = cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, step, value)
            grads = ctx.gradients(backward(tape, loss))
            optimizer.step(net.params, grads)
            _clamp_pact_alphas(net, config.min_pact_alpha)
            net.apply_buffer_updates(ctx.buffer_updates)
            per_sample[index] = per_sample_cross_entropy(logits.data.astype(np.float64), labels)
            seen[index] = True
        epoch_loss = float(per_sample[seen].mean()) if seen.any() else float('nan')
        losses.append(LossRow(epoch=epoch, loss=epoch_loss))
        logger.info("Epoch finished", epoch=epoch, loss=round(epoch_loss, 6))

    seconds = time.monotonic() - started
    logger.info("✅ Training finished", model=net.name, epochs=epochs, seconds=round(seconds, 2))
    return TrainResult(model=trained, losses=losses, seconds=seconds)


def _clamp_pact_alphas(model: MixerModel, minimum: float):
    for name, value in model.params.items():
        if name.endswith('.alpha'):
            np.maximum(value, minimum, out=value)


def insert_fake_quant(model: MixerModel, config: QuantConfig) -> QuantizedModel:
    """Wrap a copy of `model` for quantization-aware training

    Weights are fake-quantized per output channel (symmetric) with
    parameters re-derived from the current values on every forward pass.
    Activation edges use per-tensor parameters from EMA range observers.
    """
    config.validate()
    return QuantizedModel(model.copy(), QuantState(config, QuantMode.QAT))


def calibration_batches(dataset: Dataset, config: QuantConfig, seed: int = 0) -> List[np.ndarray]:
    """Up to calib_batches batches of calib_batch_size images in a seeded order"""
    order = SplitMix64(seed).permutation(len(dataset))
    order = order[:config.calib_batches * config.calib_batch_size]
    return [images for _, images, _ in dataset.batches(config.calib_batch_size, order)]


def calibrate_ptq(model: MixerModel, batches: Sequence[np.ndarray], config: QuantConfig) -> QuantizedModel:
    """Post-training quantization from calibration batches

    Activation ranges are observed with weights already quantized, then
    every parameter is frozen.
    """
    config.validate()
    batches = list(batches)
    if not batches:
        raise ContractError("calibration needs at least one batch")
    state = QuantState(config, QuantMode.CALIBRATE)
    if config.acts_quantized:
        for images in batches:
            if len(images) == 0:
                raise ContractError("calibration batch is empty")
            model.logits(images, quant=state)
    state.freeze({name: model.params[name] for name in model.quantizable})
    logger.info("✅ Calibration finished", model=model.name, precision=config.precision_label,
                batches=len(batches), edges=len(state.act_qparams), observer=config.observer.value)
    return QuantizedModel(model, state)


def evaluate(model: Trainable, dataset: Dataset, batch_size: int = 256, threads: int = 1) -> float:
    """Top-1 accuracy; per-batch counts are integers so the result is thread-independent"""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    batches = [(images, labels) for _, images, labels in dataset.batches(batch_size)]

    def _correct(batch) -> int:
        images, labels = batch
        return int(np.sum(model.predict(images) == labels))

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(_correct, batches))
    else:
        counts = [_correct(batch) for batch in batches]
    return sum(counts) / len(dataset)


def profile_activations(model: MixerModel, dataset: Dataset, percentile: float = 0.99,
                        batch_size: int = 256) -> List[ProfileRow]:
    """Max and percentile of |x| at every activation edge, in forward order"""
    if len(dataset) == 0:
        raise ContractError("cannot profile an empty dataset")
    observers: Dict[str, RangeObserver] = {}

    def record(edge: str, x: Tensor):
        observer = observers.get(edge)
        if observer is None:
            observer = observers[edge] = RangeObserver(ObserverKind.PERCENTILE, percentile=percentile)
        observer.observe(np.abs(x.data))

    for _, images, _ in dataset.batches(batch_size):
        model.logits(images, recorder=record)

    depth = model.config.depth
    rows = []
    for edge, observer in observers.items():
        _, quantile = observer.finalize()
        layer = edge_layer(edge, depth)
        if layer < 0:
            position = 0.0
        elif layer >= depth:
            position = 100.0
        else:
            position = 100.0 * (layer + 1) / depth
        rows.append(ProfileRow(edge=edge, layer=layer, position_pct=position,
                               max_abs=observer.observed_max, quantile_abs=quantile))
    return rows


def bops(flops_g: float, weight_bits: int, act_bits: int) -> float:
    """Bit operations in G: FLOPs(G) x weight bits x activation bits"""
    return flops_g * weight_bits * act_bits


def model_size_mb(param_count: int, weight_bits: int) -> float:
    return param_count * weight_bits / 8e6


def metric_row(model: MixerModel, config: QuantConfig, top1: float) -> MetricRow:
    flops_g = count_flops(model.config) / 1e9
    return MetricRow(
        model=model.name,
        precision=config.precision_label,
        size_mb=model_size_mb(count_params(model).total, config.weight_bits),
        bops_g=bops(flops_g, config.weight_bits, config.act_bits),
        top1=top1,
    )


FULL_PRECISION = QuantConfig(weight_bits=32, act_bits=32)
