"""
Finite-difference verification of tape gradients
"""

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tape, Tensor, backward

DEFAULT_EPS = 1e-5
KINK_MARGIN = 10.0
KINK_SHIFT = 20.0

ScalarFn = Callable[[Tensor], Tensor]


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped: int

    def passed(self, tolerance: float = 1e-6) -> bool:
        return self.max_relative_error < tolerance


def _evaluate(f: ScalarFn, theta: np.ndarray) -> float:
    value = f(Tensor(theta)).item()
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
    return float(value)


def analytic_gradient(f: ScalarFn, theta: np.ndarray) -> np.ndarray:
    tape = Tape()
    leaf = tape.watch(np.asarray(theta, dtype=np.float64))
    loss = f(leaf)
    return backward(tape, loss)[leaf.node_id]


def numeric_gradient(f: ScalarFn, theta: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences, one coordinate at a time"""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = grad.reshape(-1)
    for i in range(theta.size):
        plus = theta.copy().reshape(-1)
        minus = theta.copy().reshape(-1)
        plus[i] += eps
        minus[i] -= eps
        flat[i] = (_evaluate(f, plus.reshape(theta.shape)) - _evaluate(f, minus.reshape(theta.shape))) / (2 * eps)
    return grad


def kink_mask(theta: np.ndarray, breakpoints: Iterable[float], eps: float = DEFAULT_EPS) -> np.ndarray:
    """True where a coordinate sits within KINK_MARGIN * eps of a breakpoint"""
    theta = np.asarray(theta, dtype=np.float64)
    mask = np.zeros(theta.shape, dtype=bool)
    for point in breakpoints:
        mask |= np.abs(theta - point) < KINK_MARGIN * eps
    return mask


def avoid_kinks(theta: np.ndarray, breakpoints: Iterable[float], eps: float = DEFAULT_EPS) -> np.ndarray:
    """Move coordinates near a breakpoint to breakpoint +/- KINK_SHIFT * eps"""
    theta = np.array(theta, dtype=np.float64)
    for point in breakpoints:
        near = np.abs(theta - point) < KINK_MARGIN * eps
        side = np.where(theta[near] >= point, 1.0, -1.0)
        theta[near] = point + side * KINK_SHIFT * eps
    return theta


def grad_check(f: ScalarFn, theta: np.ndarray, eps: float = DEFAULT_EPS,
               breakpoints: Optional[Iterable[float]] = None) -> GradCheckResult:
    """Compare backward() against central differences

    Each coordinate's error is divided by max(|analytic|, |numeric|, 1e-12)
    and the worst one is reported. Coordinates within KINK_MARGIN * eps of a
    breakpoint are skipped.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size == 0:
        raise ContractError("grad_check needs at least one coordinate")
    analytic = analytic_gradient(f, theta)
    numeric = numeric_gradient(f, theta, eps)
    skip = kink_mask(theta, breakpoints or (), eps)
    keep = ~skip
    error = np.abs(analytic - numeric)[keep]
    scale = np.maximum(np.maximum(np.abs(analytic[keep]), np.abs(numeric[keep])), 1e-12)
    relative = error / scale
    return GradCheckResult(
        max_relative_error=float(relative.max(initial=0.0)),
        checked=int(theta.size - skip.sum()),
        skipped=int(skip.sum()),
    )
