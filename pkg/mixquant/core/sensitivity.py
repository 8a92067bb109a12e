"""
Hessian-trace sensitivity: finite-difference Hessian-vector products and
Hutchinson trace estimates per parameter block
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import structlog

from ..models.mixer import MixerModel
from ..models.report import SensitivityRow
from .errors import ContractError, NumericError
from .functional import cross_entropy
from .rng import SplitMix64, derive_seed
from .tensor import Tape, Tensor, backward

logger = structlog.get_logger(__name__)

DEFAULT_FD_EPS = 1e-4
SENSITIVITY_BLOCKS = ('token_mixing', 'channel_mixing')

GradFn = Callable[[np.ndarray], np.ndarray]


def hvp_fd(grad_fn: GradFn, theta: np.ndarray, v: np.ndarray, eps: float = DEFAULT_FD_EPS) -> np.ndarray:
    """H v ~ (g(theta + h v) - g(theta - h v)) / 2h with h = eps * (1 + max|theta|)"""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if theta.shape != v.shape:
        raise ContractError(f"direction shape {v.shape} does not match parameters {theta.shape}")
    step = eps * (1.0 + float(np.max(np.abs(theta)))) if theta.size else eps
    plus = np.asarray(grad_fn(theta + step * v), dtype=np.float64)
    minus = np.asarray(grad_fn(theta - step * v), dtype=np.float64)
    if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise NumericError("gradient is not finite at a finite-difference point")
    return (plus - minus) / (2.0 * step)


def _block_indices(block, size: int) -> np.ndarray:
    block = np.asarray(block)
    if block.dtype == bool:
        if block.shape != (size,):
            raise ContractError(f"block mask of shape {block.shape} does not match {size} parameters")
        block = np.flatnonzero(block)
    block = block.astype(np.int64).ravel()
    if block.size == 0:
        raise ContractError("parameter block is empty")
    if block.min() < 0 or block.max() >= size:
        raise ContractError(f"block indices outside [0, {size})")
    return block


def hutchinson_trace(grad_fn: GradFn, theta: np.ndarray, block, samples: int, seed: int,
                     eps: float = DEFAULT_FD_EPS, threads: int = 1) -> float:
    """Mean of v^T H v over Rademacher vectors supported on `block`

    Vectors are drawn up front from one seeded stream and their estimates
    summed in draw order, so the result does not depend on `threads`.
    """
    if samples < 1:
        raise ContractError(f"need at least one sample, got {samples}")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    index = _block_indices(block, theta.size)
    rng = SplitMix64(seed)
    vectors = [rng.rademacher(index.size) for _ in range(samples)]

    def _estimate(signs: np.ndarray) -> float:
        v = np.zeros_like(theta)
        v[index] = signs
        hv = hvp_fd(grad_fn, theta, v, eps)
        return float(np.dot(signs, hv[index]))

    if threads > 1 and samples > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            estimates = list(pool.map(_estimate, vectors))
    else:
        estimates = [_estimate(signs) for signs in vectors]
    total = 0.0
    for value in estimates:
        total += value
    return total / samples


class FlatParams:
    """Concatenated float64 view of a model's parameters"""

    def __init__(self, params: Dict[str, np.ndarray]):
        self.names = list(params)
        self.shapes = [params[n].shape for n in self.names]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.theta = (np.concatenate([params[n].astype(np.float64).ravel() for n in self.names])
                      if self.names else np.zeros(0))

    def unflatten(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        return {
            name: theta[self.offsets[i]:self.offsets[i + 1]].reshape(shape)
            for i, (name, shape) in enumerate(zip(self.names, self.shapes))
        }

    def flatten(self, named: Dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(int(self.offsets[-1]), dtype=np.float64)
        for i, name in enumerate(self.names):
            grad = named.get(name)
            if grad is not None:
                out[self.offsets[i]:self.offsets[i + 1]] = grad.ravel()
        return out

    def indices(self, names: Sequence[str]) -> np.ndarray:
        position = {name: i for i, name in enumerate(self.names)}
        parts = [np.arange(self.offsets[position[n]], self.offsets[position[n] + 1]) for n in names]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def loss_gradient_fn(model: MixerModel, images: np.ndarray, labels: np.ndarray) -> Tuple[GradFn, FlatParams]:
    """Pure gradient of the mean cross-entropy in float64 evaluation mode"""
    model64 = model.astype(np.float64)
    flat = FlatParams(model64.params)
    batch = np.asarray(images, dtype=np.float64)

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        tape = Tape()
        ctx = model64.context(tape=tape, training=False, params=flat.unflatten(theta))
        loss = cross_entropy(model64.forward(Tensor(batch), ctx), labels)
        return flat.flatten(ctx.gradients(backward(tape, loss)))

    return grad_fn, flat


def block_report(model: MixerModel, images: np.ndarray, labels: np.ndarray, samples: int = 16,
                 seed: int = 0, eps: float = DEFAULT_FD_EPS, threads: int = 1) -> List[SensitivityRow]:
    """Trace and per-parameter trace of every token-mixing and channel-mixing block"""
    if len(images) == 0:
        raise ContractError("sensitivity needs a non-empty batch")
    grad_fn, flat = loss_gradient_fn(model, images, labels)
    rows = []
    for layer in range(model.config.depth):
        for block in SENSITIVITY_BLOCKS:
            names = [n for n in flat.names if n.startswith(f"layers.{layer}.{block}.")]
            index = flat.indices(names)
            try:
                trace = hutchinson_trace(grad_fn, flat.theta, index, samples,
                                         derive_seed(seed, layer, SENSITIVITY_BLOCKS.index(block)),
                                         eps=eps, threads=threads)
            except NumericError as e:
                raise NumericError(f"layer {layer} {block}: {e}") from e
            rows.append(SensitivityRow(
                layer=layer, block=block, trace=trace, param_count=int(index.size),
                normalized_trace=trace / index.size, samples=samples, seed=seed))
            logger.debug("Block sensitivity", layer=layer, block=block, trace=trace, params=int(index.size))
    logger.info("✅ Sensitivity computed", model=model.name, blocks=len(rows), samples=samples)
    return rows


def sensitivity_summary(rows: Sequence[SensitivityRow]) -> Dict[str, float]:
    """Mean normalized trace per block kind"""
    summary = {}
    for block in SENSITIVITY_BLOCKS:
        values = [r.normalized_trace for r in rows if r.block == block]
        if values:
            summary[block] = float(np.mean(values))
    return summary
