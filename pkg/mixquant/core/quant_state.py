"""
Quantization state attached to a forward pass: weight and activation fake-quant
"""

from enum import Enum
from typing import Dict, List, Mapping, Optional

import numpy as np
import structlog

from .errors import ContractError
from .observers import ObserverKind, RangeObserver
from .quantizers import QuantParams, compute_qparams, fake_quant, per_channel_qparams
from .tensor import Tensor

logger = structlog.get_logger(__name__)


class QuantMode(Enum):
    CALIBRATE = "calibrate"
    FROZEN = "frozen"
    QAT = "qat"


class QuantState:
    """Observers and quantization parameters for every weight and activation edge

    calibrate: activations pass through unchanged while observers record
    their ranges. frozen: fixed parameters (after calibrate_ptq). qat: weight
    parameters re-derived every step, activation ranges tracked by EMA
    during training and read back in evaluation.
    A bit-width of 32 disables that side entirely.
    """

    def __init__(self, config, mode: QuantMode = QuantMode.QAT):
        self.config = config
        self.mode = QuantMode(mode)
        self.observers: Dict[str, RangeObserver] = {}
        self.act_qparams: Dict[str, QuantParams] = {}
        self.weight_qparams: Dict[str, QuantParams] = {}
        if self.mode is QuantMode.QAT and config.observer is ObserverKind.PERCENTILE:
            logger.warning("Percentile observers are post-training only, QAT uses EMA")

    @property
    def precision_label(self) -> str:
        return self.config.precision_label

    def _observer_kind(self) -> ObserverKind:
        if self.mode is QuantMode.QAT and self.config.observer is ObserverKind.PERCENTILE:
            return ObserverKind.EMA
        return self.config.observer

    def observer(self, edge: str) -> RangeObserver:
        observer = self.observers.get(edge)
        if observer is None:
            observer = RangeObserver(
                kind=self._observer_kind(),
                momentum=self.config.ema_momentum,
                percentile=self.config.percentile,
                warm_start=self.config.ema_warm_start,
            )
            self.observers[edge] = observer
        return observer

    def weight(self, name: str, w: Tensor) -> Tensor:
        if not self.config.weights_quantized:
            return w
        qp = self.weight_qparams.get(name) if self.mode is QuantMode.FROZEN else None
        if qp is None:
            qp = per_channel_qparams(w.data, self.config.weight_bits, axis=0)
        return fake_quant(w, qp)

    def activation(self, edge: str, x: Tensor, training: bool = False) -> Tensor:
        if not self.config.acts_quantized:
            return x
        if self.mode is QuantMode.CALIBRATE:
            self.observer(edge).observe(x)
            return x
        if self.mode is QuantMode.QAT:
            observer = self.observer(edge)
            if training:
                observer.observe(x)
            elif observer.sample_count == 0:
                raise ContractError(f"activation edge '{edge}' has no observed range yet")
            qp = compute_qparams(*observer.range, self.config.act_bits, self.config.act_scheme)
            return fake_quant(x, qp)
        qp = self.act_qparams.get(edge)
        if qp is None:
            raise ContractError(f"activation edge '{edge}' was not calibrated")
        return fake_quant(x, qp)

    def freeze(self, weights: Optional[Mapping[str, np.ndarray]] = None):
        """Fix activation parameters from observers and weight parameters from values"""
        if self.config.acts_quantized:
            for edge, observer in self.observers.items():
                r_min, r_max = observer.finalize()
                self.act_qparams[edge] = compute_qparams(
                    r_min, r_max, self.config.act_bits, self.config.act_scheme)
        if self.config.weights_quantized and weights:
            for name, value in weights.items():
                self.weight_qparams[name] = per_channel_qparams(value, self.config.weight_bits, axis=0)
        self.mode = QuantMode.FROZEN
        logger.debug("Quantization parameters frozen",
                     edges=len(self.act_qparams), weights=len(self.weight_qparams))

    def edges(self) -> List[str]:
        return list(self.act_qparams or self.observers)
