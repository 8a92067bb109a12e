"""
Range observers: track the value range of a tensor over calibration batches
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np
import structlog

from .errors import ContractError, NumericError
from .quantizers import SCALE_FLOOR
from .tensor import Tensor

logger = structlog.get_logger(__name__)

HISTOGRAM_BINS = 2048
DEFAULT_MOMENTUM = 0.9
DEFAULT_PERCENTILE = 0.99


class ObserverKind(Enum):
    MINMAX = "minmax"
    EMA = "ema"
    PERCENTILE = "percentile"


@dataclass
class RangeObserver:
    """Running estimate of [r_min, r_max]

    minmax keeps the running extremes. ema blends each batch's extremes with
    r <- m * r + (1 - m) * batch, starting from 0 unless warm_start takes the
    first batch as is. percentile fills a fixed-size histogram over
    [-bound, bound] (bound doubles as needed) and reads nearest-rank
    percentiles on finalize().
    """
    kind: ObserverKind = ObserverKind.MINMAX
    momentum: float = DEFAULT_MOMENTUM
    percentile: float = DEFAULT_PERCENTILE
    warm_start: bool = False
    bins: int = HISTOGRAM_BINS
    r_min: float = 0.0
    r_max: float = 0.0
    sample_count: int = 0
    observed_min: float = math.inf
    observed_max: float = -math.inf
    bound: float = 0.0
    histogram: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = ObserverKind(self.kind)
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"EMA momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.percentile <= 1.0:
            raise ContractError(f"percentile must be in (0, 1], got {self.percentile}")
        if self.bins < 4 or self.bins % 4:
            raise ContractError(f"histogram bins must be a positive multiple of 4, got {self.bins}")

    def observe(self, batch) -> "RangeObserver":
        values = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64).ravel()
        if values.size == 0:
            raise ContractError("cannot observe an empty batch")
        if not np.all(np.isfinite(values)):
            raise NumericError("observed batch contains non-finite values")
        batch_min, batch_max = float(values.min()), float(values.max())
        first = self.sample_count == 0
        self.observed_min = min(self.observed_min, batch_min)
        self.observed_max = max(self.observed_max, batch_max)

        if self.kind is ObserverKind.MINMAX:
            self.r_min, self.r_max = self.observed_min, self.observed_max
        elif self.kind is ObserverKind.EMA:
            if first and self.warm_start:
                self.r_min, self.r_max = batch_min, batch_max
            else:
                m = self.momentum
                self.r_min = m * self.r_min + (1.0 - m) * batch_min
                self.r_max = m * self.r_max + (1.0 - m) * batch_max
        else:
            self._accumulate(values)
            self.r_min, self.r_max = self.observed_min, self.observed_max

        self.sample_count += values.size
        return self

    def finalize(self) -> Tuple[float, float]:
        if self.sample_count == 0:
            raise ContractError("observer has not seen any data")
        if self.kind is ObserverKind.PERCENTILE:
            upper = self._rank_edge(self.percentile, upper=True)
            lower = self._rank_edge(1.0 - self.percentile, upper=False)
            self.r_max = min(upper, self.observed_max)
            self.r_min = max(lower, self.observed_min)
            if self.r_min > self.r_max:
                self.r_min = self.r_max
        return self.r_min, self.r_max

    @property
    def range(self) -> Tuple[float, float]:
        return self.r_min, self.r_max

    def reset(self):
        self.r_min = self.r_max = 0.0
        self.sample_count = 0
        self.observed_min, self.observed_max = math.inf, -math.inf
        self.bound = 0.0
        self.histogram = None

    def _accumulate(self, values: np.ndarray):
        peak = float(np.max(np.abs(values)))
        if self.histogram is None:
            self.histogram = np.zeros(self.bins, dtype=np.int64)
            self.bound = max(peak, SCALE_FLOOR)
        while peak > self.bound:
            self._double_bound()
        width = 2.0 * self.bound / self.bins
        index = np.floor((values + self.bound) / width).astype(np.int64)
        np.clip(index, 0, self.bins - 1, out=index)
        self.histogram += np.bincount(index, minlength=self.bins)

    def _double_bound(self):
        # old bin i lands in new bin bins/4 + i // 2
        merged = self.histogram.reshape(-1, 2).sum(axis=1)
        grown = np.zeros(self.bins, dtype=np.int64)
        start = self.bins // 4
        grown[start:start + merged.size] = merged
        self.histogram = grown
        self.bound *= 2.0
        logger.debug("Histogram bound doubled", bound=self.bound)

    def _rank_edge(self, q: float, upper: bool) -> float:
        """Bin edge holding the nearest-rank q-quantile"""
        total = int(self.histogram.sum())
        rank = min(total, max(1, math.ceil(q * total - 1e-9)))
        cumulative = np.cumsum(self.histogram)
        index = int(np.searchsorted(cumulative, rank, side="left"))
        width = 2.0 * self.bound / self.bins
        lower = -self.bound + index * width
        return lower + width if upper else lower

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "sample_count": self.sample_count,
        }
