"""
Per-forward-pass context: parameter lookup, tape, quantization hooks
"""

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from ..core.errors import ContractError
from ..core.tensor import Tape, Tensor

ActivationRecorder = Callable[[str, Tensor], None]


class ForwardContext:
    """Carries everything a layer needs besides its input

    Parameters are read from `params` (name -> array). With a tape, each
    parameter becomes a watched leaf so its gradient can be collected by
    name afterwards. Weights go through the quantization hook, and every
    activation edge through the activation hook and recorder.
    """

    def __init__(self, params: Mapping[str, np.ndarray],
                 buffers: Optional[Mapping[str, np.ndarray]] = None,
                 tape: Optional[Tape] = None, training: bool = False,
                 quant=None, recorder: Optional[ActivationRecorder] = None):
        self.params = params
        self.buffers = buffers or {}
        self.tape = tape
        self.training = training
        self.quant = quant
        self.recorder = recorder
        self.node_ids: Dict[str, int] = {}
        self.buffer_updates: Dict[str, np.ndarray] = {}
        self._cache: Dict[str, Tensor] = {}

    def param(self, name: str) -> Tensor:
        cached = self._cache.get(name)
        if cached is not None:
            return cached
        if name not in self.params:
            raise ContractError(f"missing parameter '{name}'")
        value = self.params[name]
        if self.tape is not None:
            tensor = self.tape.watch(value)
            self.node_ids[name] = tensor.node_id
        else:
            tensor = Tensor(value)
        self._cache[name] = tensor
        return tensor

    def weight(self, name: str) -> Tensor:
        """A matmul/conv weight, fake-quantized when weight quantization is on"""
        w = self.param(name)
        if self.quant is not None:
            w = self.quant.weight(name, w)
        return w

    def activation(self, edge: str, x: Tensor) -> Tensor:
        if self.recorder is not None:
            self.recorder(edge, x)
        if self.quant is not None:
            x = self.quant.activation(edge, x, training=self.training)
        return x

    def buffer(self, name: str) -> np.ndarray:
        if name not in self.buffers:
            raise ContractError(f"missing buffer '{name}'")
        return self.buffers[name]

    def update_buffer(self, name: str, value: np.ndarray):
        self.buffer_updates[name] = value

    def gradients(self, grads: Mapping[int, np.ndarray]) -> Dict[str, np.ndarray]:
        """Gradients from backward() keyed by parameter name"""
        return {name: grads[node_id] for name, node_id in self.node_ids.items()}
