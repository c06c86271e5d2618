"""Expert rebalancing: per-micro-batch greedy plans and checkpoint-time
placement optimization.

``plan_rebalance`` is the reactive path: given one batch's routing it picks
whole dynamic experts to copy to less-loaded devices in the same NVLink
domain.  ``optimize_placement`` is the slow path: given smoothed per-expert
load history it re-packs all experts across devices and re-picks which
experts are dynamic.  Both are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import (
    ConfigurationError,
    ExpertPlacement,
    IntegrityError,
    ModelConfig,
    RoutingBatch,
    Topology,
)


class CopyAction(NamedTuple):
    expert: int
    src: int
    dst: int


@dataclass(frozen=True)
class RebalancePlan:
    """Ordered expert migrations for one micro-batch.

    Every action copies a dynamic expert from its home device to another
    device in the same NVLink domain; an expert appears at most once and no
    device receives more actions than its copy-buffer slots.
    """

    actions: tuple[CopyAction, ...] = ()

    def __len__(self) -> int:
        return len(self.actions)

    def __bool__(self) -> bool:
        return bool(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def incoming_counts(self, num_devices: int) -> list[int]:
        counts = [0] * num_devices
        for action in self.actions:
            counts[action.dst] += 1
        return counts

    def validate(self, placement: ExpertPlacement, model: ModelConfig, topo: Topology) -> None:
        """Check the structural invariants; raises IntegrityError on violation."""
        seen: set[int] = set()
        incoming = [0] * placement.num_devices
        for action in self.actions:
            expert, src, dst = action
            if not 0 <= expert < placement.num_experts:
                raise IntegrityError(f"action references unknown expert {expert}")
            if not 0 <= src < placement.num_devices or not 0 <= dst < placement.num_devices:
                raise IntegrityError(f"action references unknown device in {action}")
            if src == dst:
                raise IntegrityError(f"action {action} copies an expert onto its own device")
            if expert in seen:
                raise IntegrityError(f"expert {expert} migrated more than once")
            seen.add(expert)
            if placement.home[expert] != src:
                raise IntegrityError(
                    f"expert {expert} homed on device {placement.home[expert]}, not {src}"
                )
            if expert not in placement.dynamic_sets[src]:
                raise IntegrityError(f"expert {expert} is not dynamic on device {src}")
            if topo.node_of(src) != topo.node_of(dst):
                raise IntegrityError(
                    f"action {action} crosses NVLink domains "
                    f"({topo.node_of(src)} -> {topo.node_of(dst)})"
                )
            incoming[dst] += 1
            if incoming[dst] > model.max_num_dyn:
                raise IntegrityError(
                    f"device {dst} receives {incoming[dst]} copies, max_num_dyn = {model.max_num_dyn}"
                )


def plan_rebalance(
    batch: RoutingBatch,
    placement: ExpertPlacement,
    model: ModelConfig,
    topo: Topology,
) -> RebalancePlan:
    """Greedy per-domain rebalance of the batch's post-dispatch device loads.

    Per NVLink domain: take the most-loaded device, take its busiest
    unmigrated dynamic expert with at least ``tau`` tokens, and move it to
    the least-loaded device in the domain that still has buffer slots.  The
    move commits only if the domain's max load strictly decreases; otherwise
    the domain is done.  Ties break toward the lowest device id, then the
    lowest expert id, so plans are deterministic.
    """
    if batch.num_experts != placement.num_experts:
        raise IntegrityError(
            f"batch has {batch.num_experts} experts, placement has {placement.num_experts}"
        )
    totals = batch.expert_totals
    loads = np.bincount(
        placement.home_array, weights=totals, minlength=placement.num_devices
    )
    actions: list[CopyAction] = []
    incoming = [0] * placement.num_devices
    migrated = [False] * placement.num_experts
    for domain in topo.domains():
        if len(domain) < 2:
            continue
        while True:
            src = max(domain, key=lambda d: (loads[d], -d))
            eligible = [
                e
                for e in placement.dynamic_sets[src]
                if not migrated[e] and totals[e] >= model.tau
            ]
            if not eligible:
                break
            expert = max(eligible, key=lambda e: (totals[e], -e))
            targets = [d for d in domain if d != src and incoming[d] < model.max_num_dyn]
            if not targets:
                break
            dst = min(targets, key=lambda d: (loads[d], d))
            current_max = loads[src]
            moved = totals[expert]
            new_max = max(
                loads[d] + (moved if d == dst else 0.0) - (moved if d == src else 0.0)
                for d in domain
            )
            if not new_max < current_max:
                break
            loads[src] -= moved
            loads[dst] += moved
            incoming[dst] += 1
            migrated[expert] = True
            actions.append(CopyAction(int(expert), int(src), int(dst)))
    return RebalancePlan(tuple(actions))


@dataclass(frozen=True)
class LoadHistory:
    """Per-expert exponentially weighted token counts."""

    ema: np.ndarray
    window: int

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.window}")
        arr = np.asarray(self.ema, dtype=float).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "ema", arr)

    @classmethod
    def zeros(cls, num_experts: int, window: int = 1024) -> "LoadHistory":
        return cls(np.zeros(num_experts), window)


def update_history(history: LoadHistory, batch: RoutingBatch) -> LoadHistory:
    """Fold one batch into the history: ema' = (1-1/w)*ema + (1/w)*count."""
    if batch.num_experts != history.ema.size:
        raise IntegrityError(
            f"batch has {batch.num_experts} experts, history has {history.ema.size}"
        )
    alpha = 1.0 / history.window
    return LoadHistory((1.0 - alpha) * history.ema + alpha * batch.expert_totals, history.window)


def optimize_placement(
    history: LoadHistory, placement: ExpertPlacement, topo: Topology
) -> ExpertPlacement:
    """Re-pack experts across devices by smoothed load (longest first).

    Experts are assigned in decreasing ema order, each to the least-loaded
    device with free capacity; on every device the highest-ema experts become
    the new dynamic set.  An all-zero history leaves the placement unchanged.
    """
    if history.ema.size != placement.num_experts:
        raise IntegrityError(
            f"history covers {history.ema.size} experts, placement has {placement.num_experts}"
        )
    if placement.num_devices != topo.ep_degree:
        raise IntegrityError(
            f"placement has {placement.num_devices} devices, topology has {topo.ep_degree}"
        )
    ema = history.ema
    if not ema.any():
        return placement
    num_devices = placement.num_devices
    capacity = placement.experts_per_device
    dyn = placement.dyn
    order = sorted(range(placement.num_experts), key=lambda e: (-ema[e], e))
    bin_load = [0.0] * num_devices
    owned: list[list[int]] = [[] for _ in range(num_devices)]
    for expert in order:
        open_bins = [d for d in range(num_devices) if len(owned[d]) < capacity]
        dst = min(open_bins, key=lambda d: (bin_load[d], d))
        owned[dst].append(expert)
        bin_load[dst] += float(ema[expert])
    home = [0] * placement.num_experts
    static_sets = []
    dynamic_sets = []
    for d in range(num_devices):
        for e in owned[d]:
            home[e] = d
        ranked = sorted(owned[d], key=lambda e: (-ema[e], e))
        dynamic = frozenset(ranked[:dyn])
        static_sets.append(frozenset(owned[d]) - dynamic)
        dynamic_sets.append(dynamic)
    return ExpertPlacement(tuple(home), tuple(static_sets), tuple(dynamic_sets))
