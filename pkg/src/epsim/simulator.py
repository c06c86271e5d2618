"""Per-micro-batch timeline simulation of one MoE layer's EP group.

Each micro-batch runs through four overlapped stages per device:

  dispatch   tokens travel to their experts' home devices (NIC across nodes,
             NVLink within a node; both channels in parallel)
  static     grouped GEMM over the device's static experts, starting as soon
             as its tokens have arrived
  copy       the host scheduler publishes a rebalance plan cpu_sched_latency
             after dispatch, then copy engines move migrated experts' weights
             and tokens within the NVLink domain, overlapping the static GEMM
  dynamic    grouped GEMM over the dynamic experts each device ended up with,
             gated on both the static GEMM and any incoming copies
  combine    results return to the token sources once every device has
             finished (the all-to-all is gated by the slowest device)

Methods: ``before_lb`` runs everything as one merged GEMM with no plan;
``feplb`` plans from the current batch; ``fastermoe`` plans from the previous
batch (last-value prediction), and with pipe=2 inflates dispatch/combine time
by configured factors to model staged delivery.  The backward pass mirrors
dispatch and combine roles and scales GEMM time by ``backward_multiplier``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .balancer import (
    LoadHistory,
    RebalancePlan,
    optimize_placement,
    plan_rebalance,
    update_history,
)
from .core import (
    ConfigurationError,
    ExpertPlacement,
    IntegrityError,
    ModelConfig,
    RoutingBatch,
    Topology,
)
from .costmodel import GemmParams, ce_copy_time, gemm_time, nic_dispatch_time

FORWARD = "forward"
BACKWARD = "backward"

METHOD_KINDS = ("before_lb", "feplb", "fastermoe")


class SemanticsError(RuntimeError):
    """A plan or timeline violated exactly-once token semantics."""


@dataclass(frozen=True)
class Method:
    """Which load-balancing behaviour to simulate.

    pipe is only meaningful for fastermoe: pipe=1 sends dispatch in one shot,
    pipe=2 stages it through intermediate buffers, inflating dispatch and
    combine time by the two overhead factors.
    """

    kind: str
    pipe: int = 1
    pipe2_dispatch_factor: float = 1.468
    pipe2_combine_factor: float = 1.402

    def __post_init__(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise ConfigurationError(f"method must be one of {METHOD_KINDS}, got {self.kind!r}")
        if self.pipe not in (1, 2):
            raise ConfigurationError(f"pipe must be 1 or 2, got {self.pipe}")
        if self.kind != "fastermoe" and self.pipe != 1:
            raise ConfigurationError(f"pipe={self.pipe} is only valid for fastermoe")
        if self.pipe2_dispatch_factor < 1.0 or self.pipe2_combine_factor < 1.0:
            raise ConfigurationError("pipe2 overhead factors must be >= 1")

    @classmethod
    def before_lb(cls) -> "Method":
        return cls("before_lb")

    @classmethod
    def feplb(cls) -> "Method":
        return cls("feplb")

    @classmethod
    def fastermoe(cls, pipe: int = 1, **kwargs) -> "Method":
        return cls("fastermoe", pipe, **kwargs)

    @classmethod
    def parse(cls, token: str) -> "Method":
        name = token.strip().lower()
        if name in ("before_lb", "feplb"):
            return cls(name)
        if name == "fastermoe":
            return cls("fastermoe", 1)
        if name in ("fastermoe_pipe2", "fastermoe:2", "fastermoe:pipe2"):
            return cls("fastermoe", 2)
        raise ConfigurationError(
            f"unknown method {token!r}; expected before_lb, feplb, fastermoe or fastermoe_pipe2"
        )

    @property
    def label(self) -> str:
        return "fastermoe_pipe2" if (self.kind, self.pipe) == ("fastermoe", 2) else self.kind

    @property
    def plans(self) -> bool:
        return self.kind in ("feplb", "fastermoe")

    @property
    def dispatch_factor(self) -> float:
        return self.pipe2_dispatch_factor if (self.kind, self.pipe) == ("fastermoe", 2) else 1.0

    @property
    def combine_factor(self) -> float:
        return self.pipe2_combine_factor if (self.kind, self.pipe) == ("fastermoe", 2) else 1.0


@dataclass(frozen=True)
class LayerTimeline:
    """Per-device event times (seconds from layer start) for one micro-batch.

    All arrays are indexed by device.  ``device_loads`` are post-plan token
    counts, ``gemm_seconds`` the per-device busy GEMM time (static + dynamic),
    and ``expert_compute_device`` maps every expert to the device that ran it.
    """

    direction: str
    plan: RebalancePlan
    placement: ExpertPlacement
    dispatch_start: np.ndarray
    dispatch_end: np.ndarray
    static_gemm_start: np.ndarray
    static_gemm_end: np.ndarray
    sched_done: np.ndarray
    copy_done: np.ndarray
    dynamic_gemm_start: np.ndarray
    dynamic_gemm_end: np.ndarray
    combine_end: np.ndarray
    dispatch_seconds: np.ndarray
    combine_seconds: np.ndarray
    gemm_seconds: np.ndarray
    device_loads: np.ndarray
    expert_compute_device: np.ndarray

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if isinstance(value, np.ndarray):
                arr = value.copy()
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @property
    def num_devices(self) -> int:
        return self.dispatch_end.size

    @property
    def layer_time(self) -> float:
        return float(self.combine_end.max())


def _phase_seconds(token_matrix: np.ndarray, model: ModelConfig, topo: Topology) -> np.ndarray:
    """Per-receiver comm seconds for a (receiver, sender) token matrix.

    Cross-node volume goes over the NIC, same-node volume over NVLink; the
    channels run in parallel and an unused channel costs nothing.
    """
    nodes = topo.node_of_device
    same_node = nodes[:, None] == nodes[None, :]
    local = np.eye(token_matrix.shape[0], dtype=bool)
    inter_bytes = (token_matrix * ~same_node).sum(axis=1) * float(model.token_bytes)
    intra_bytes = (token_matrix * (same_node & ~local)).sum(axis=1) * float(model.token_bytes)
    seconds = np.zeros(token_matrix.shape[0])
    for d in range(seconds.size):
        times = []
        if inter_bytes[d] > 0:
            times.append(nic_dispatch_time(inter_bytes[d], topo))
        if intra_bytes[d] > 0:
            times.append(ce_copy_time(intra_bytes[d], topo))
        seconds[d] = max(times, default=0.0)
    return seconds


def _check_semantics(
    totals: np.ndarray,
    placement: ExpertPlacement,
    plan: RebalancePlan,
    model: ModelConfig,
    topo: Topology,
    compute_device: np.ndarray,
    device_loads: np.ndarray,
) -> None:
    try:
        plan.validate(placement, model, topo)
    except IntegrityError as exc:
        raise SemanticsError(f"invalid rebalance plan: {exc}") from exc
    expected = np.array(placement.home_array)
    for action in plan.actions:
        expected[action.expert] = action.dst
    if not np.array_equal(expected, compute_device):
        raise SemanticsError("expert-to-device assignment does not match home map plus plan")
    recount = np.bincount(compute_device, weights=totals, minlength=placement.num_devices)
    if not np.array_equal(recount.astype(np.int64), device_loads):
        raise SemanticsError("per-device loads do not re-sum to batch token counts")


def simulate_microbatch(
    batch: RoutingBatch,
    placement: ExpertPlacement,
    method: Method,
    model: ModelConfig,
    topo: Topology,
    gemm: GemmParams,
    direction: str = FORWARD,
    prev_batch: RoutingBatch | None = None,
) -> LayerTimeline:
    """Simulate one micro-batch through the layer and return its timeline."""
    if direction not in (FORWARD, BACKWARD):
        raise ConfigurationError(f"direction must be forward or backward, got {direction!r}")
    if batch.num_experts != placement.num_experts:
        raise IntegrityError(
            f"batch has {batch.num_experts} experts, placement has {placement.num_experts}"
        )
    if batch.num_sources != topo.ep_degree:
        raise IntegrityError(
            f"batch has {batch.num_sources} sources, topology has {topo.ep_degree} devices"
        )
    if placement.num_devices != topo.ep_degree:
        raise IntegrityError(
            f"placement has {placement.num_devices} devices, topology has {topo.ep_degree}"
        )
    num_devices = topo.ep_degree
    totals = batch.expert_totals

    if method.kind == "feplb":
        plan = plan_rebalance(batch, placement, model, topo)
    elif method.kind == "fastermoe" and prev_batch is not None:
        plan = plan_rebalance(prev_batch, placement, model, topo)
    else:
        plan = RebalancePlan()

    compute_device = np.array(placement.home_array)
    for action in plan.actions:
        compute_device[action.expert] = action.dst
    device_loads = np.bincount(compute_device, weights=totals, minlength=num_devices).astype(
        np.int64
    )
    _check_semantics(totals, placement, plan, model, topo, compute_device, device_loads)

    # tokens_to_home[d, s]: tokens source s routes to experts homed on d
    tokens_to_home = np.zeros((num_devices, num_devices))
    np.add.at(tokens_to_home, placement.home_array, batch.counts)
    dispatch_fwd = _phase_seconds(tokens_to_home, model, topo)
    combine_fwd = _phase_seconds(tokens_to_home.T, model, topo)
    if direction == FORWARD:
        dispatch_seconds = dispatch_fwd * method.dispatch_factor
        combine_seconds = combine_fwd * method.combine_factor
    else:
        dispatch_seconds = combine_fwd * method.dispatch_factor
        combine_seconds = dispatch_fwd * method.combine_factor

    gemm_scale = gemm.backward_multiplier if direction == BACKWARD else 1.0
    static_seconds = np.zeros(num_devices)
    dynamic_seconds = np.zeros(num_devices)
    dynamic_mask = placement.dynamic_mask
    for d in range(num_devices):
        if method.plans:
            static_experts = np.flatnonzero((placement.home_array == d) & ~dynamic_mask)
            dynamic_experts = np.flatnonzero((compute_device == d) & dynamic_mask)
            static_seconds[d] = gemm_time(totals[static_experts], gemm) * gemm_scale
            dynamic_seconds[d] = gemm_time(totals[dynamic_experts], gemm) * gemm_scale
        else:
            merged = np.flatnonzero(placement.home_array == d)
            static_seconds[d] = gemm_time(totals[merged], gemm) * gemm_scale

    dispatch_start = np.zeros(num_devices)
    dispatch_end = dispatch_start + dispatch_seconds
    static_gemm_start = dispatch_end.copy()
    static_gemm_end = static_gemm_start + static_seconds
    if method.plans:
        sched_done = dispatch_end + topo.cpu_sched_latency
    else:
        sched_done = dispatch_end.copy()

    copy_done = sched_done.copy()
    link_bytes: dict[tuple[int, int], float] = {}
    for action in plan.actions:
        nbytes = model.expert_weight_bytes + float(totals[action.expert]) * model.token_bytes
        link_bytes[(action.src, action.dst)] = link_bytes.get((action.src, action.dst), 0.0) + nbytes
    for (src, dst), nbytes in sorted(link_bytes.items()):
        done = max(sched_done[src], sched_done[dst]) + ce_copy_time(nbytes, topo)
        copy_done[dst] = max(copy_done[dst], done)

    dynamic_gemm_start = np.maximum(static_gemm_end, copy_done)
    dynamic_gemm_end = dynamic_gemm_start + dynamic_seconds
    combine_start = dynamic_gemm_end.max()
    combine_end = combine_start + combine_seconds

    return LayerTimeline(
        direction=direction,
        plan=plan,
        placement=placement,
        dispatch_start=dispatch_start,
        dispatch_end=dispatch_end,
        static_gemm_start=static_gemm_start,
        static_gemm_end=static_gemm_end,
        sched_done=sched_done,
        copy_done=copy_done,
        dynamic_gemm_start=dynamic_gemm_start,
        dynamic_gemm_end=dynamic_gemm_end,
        combine_end=combine_end,
        dispatch_seconds=dispatch_seconds,
        combine_seconds=combine_seconds,
        gemm_seconds=static_seconds + dynamic_seconds,
        device_loads=device_loads,
        expert_compute_device=compute_device,
    )


def simulate_run(
    batches: Sequence[RoutingBatch],
    method: Method,
    placement: ExpertPlacement,
    model: ModelConfig,
    topo: Topology,
    gemm: GemmParams,
    macro_period: int = 0,
    ema_window: int = 1024,
) -> list[LayerTimeline]:
    """Simulate a training run, one forward and one backward pass per batch.

    Load history is folded in after every batch; with ``macro_period`` > 0
    and the feplb method the placement is re-optimized from that history
    every ``macro_period`` batches (checkpoint-time expert migration).
    fastermoe predicts each batch's plan from the previous batch, so its
    first batch runs unbalanced.
    """
    if macro_period < 0:
        raise ConfigurationError(f"macro_period must be >= 0, got {macro_period}")
    history = LoadHistory.zeros(model.num_experts, ema_window)
    timelines: list[LayerTimeline] = []
    prev: RoutingBatch | None = None
    for index, batch in enumerate(batches):
        for direction in (FORWARD, BACKWARD):
            timelines.append(
                simulate_microbatch(
                    batch, placement, method, model, topo, gemm, direction, prev
                )
            )
        history = update_history(history, batch)
        if macro_period and method.kind == "feplb" and (index + 1) % macro_period == 0:
            placement = optimize_placement(history, placement, topo)
        prev = batch
    return timelines
