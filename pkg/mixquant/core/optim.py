"""
Optimizers updating named parameter arrays in place
"""

from typing import Dict, Mapping

import numpy as np

from ..models.config import OptimizerKind


class SGD:
    """Plain SGD with optional heavy-ball momentum"""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        for name, grad in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = grad.copy() if v is None else self.momentum * v + grad
                self.velocity[name] = v
                update = v
            else:
                update = grad
            params[name] -= (self.learning_rate * update).astype(params[name].dtype)


class Adam:
    """Adam with bias correction"""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.first: Dict[str, np.ndarray] = {}
        self.second: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, grad in grads.items():
            m = self.first.get(name, np.zeros_like(grad))
            v = self.second.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.first[name], self.second[name] = m, v
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            params[name] -= (self.learning_rate * update).astype(params[name].dtype)


def make_optimizer(train_config):
    lr = train_config.effective_learning_rate
    if train_config.optimizer is OptimizerKind.SGD:
        return SGD(lr, train_config.momentum)
    return Adam(lr, train_config.beta1, train_config.beta2)
