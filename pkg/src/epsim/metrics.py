"""Straggler and efficiency metrics over simulated runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import RoutingBatch


def _values(data: Mapping[int, float] | Sequence[float] | np.ndarray, what: str) -> np.ndarray:
    if isinstance(data, Mapping):
        arr = np.fromiter(data.values(), dtype=float, count=len(data))
    else:
        arr = np.asarray(data, dtype=float)
    if arr.size == 0:
        raise ValueError(f"{what} is empty")
    return arr


def token_straggler(loads: Mapping[int, float] | Sequence[float] | np.ndarray) -> float:
    """Max minus mean of per-device token counts."""
    arr = _values(loads, "loads")
    return float(arr.max() - arr.mean())


def gemm_straggler(times: Mapping[int, float] | Sequence[float] | np.ndarray) -> float:
    """Max minus mean of per-device GEMM seconds."""
    arr = _values(times, "times")
    return float(arr.max() - arr.mean())


def wasted_ratio(times: Mapping[int, float] | Sequence[float] | np.ndarray) -> float:
    """Fraction of the slowest device's time the average device spends idle.

    (max - mean) / max; defined as 0 when max == 0.
    """
    arr = _values(times, "times")
    peak = arr.max()
    if peak == 0.0:
        return 0.0
    return float((peak - arr.mean()) / peak)


@dataclass(frozen=True)
class RunMetrics:
    """Per-iteration series and their means for one simulated run.

    Token and GEMM stragglers plus wasted_ratio are measured on the forward
    pass (the backward pass scales compute uniformly, so it has the same
    shape); layer times are reported per direction.
    """

    token_straggler_series: np.ndarray
    gemm_straggler_series: np.ndarray
    layer_fwd_series: np.ndarray
    layer_bwd_series: np.ndarray
    wasted_ratio_series: np.ndarray
    iterations: int

    def __post_init__(self) -> None:
        for name in (
            "token_straggler_series",
            "gemm_straggler_series",
            "layer_fwd_series",
            "layer_bwd_series",
            "wasted_ratio_series",
        ):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def token_straggler_mean(self) -> float:
        return float(self.token_straggler_series.mean())

    @property
    def gemm_straggler_mean(self) -> float:
        return float(self.gemm_straggler_series.mean())

    @property
    def layer_time_fwd_mean(self) -> float:
        return float(self.layer_fwd_series.mean())

    @property
    def layer_time_bwd_mean(self) -> float:
        return float(self.layer_bwd_series.mean()) if self.layer_bwd_series.size else 0.0

    @property
    def wasted_ratio_mean(self) -> float:
        return float(self.wasted_ratio_series.mean())


def aggregate(timelines: Sequence, batches: Sequence[RoutingBatch] | None = None) -> RunMetrics:
    """Reduce simulate_run output to per-iteration series and means.

    When ``batches`` is given, per-iteration device loads are checked to sum
    to the batch totals (token conservation).  Means are plain arithmetic
    means over iterations, so concatenating two runs gives the weighted mean.
    """
    if len(timelines) == 0:
        raise ValueError("no timelines to aggregate")
    fwd = [t for t in timelines if t.direction == "forward"]
    bwd = [t for t in timelines if t.direction == "backward"]
    if not fwd:
        raise ValueError("no forward timelines to aggregate")
    if batches is not None:
        if len(batches) != len(fwd):
            raise ValueError(f"{len(batches)} batches for {len(fwd)} forward timelines")
        for batch, timeline in zip(batches, fwd):
            if int(timeline.device_loads.sum()) != batch.total_tokens:
                raise ValueError(
                    f"batch {batch.micro_batch_id}: device loads sum to "
                    f"{int(timeline.device_loads.sum())}, batch has {batch.total_tokens}"
                )
    return RunMetrics(
        token_straggler_series=np.array([token_straggler(t.device_loads) for t in fwd]),
        gemm_straggler_series=np.array([gemm_straggler(t.gemm_seconds) for t in fwd]),
        layer_fwd_series=np.array([t.layer_time for t in fwd]),
        layer_bwd_series=np.array([t.layer_time for t in bwd]),
        wasted_ratio_series=np.array([wasted_ratio(t.gemm_seconds) for t in fwd]),
        iterations=len(fwd),
    )
