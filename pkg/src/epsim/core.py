"""Shared domain types: cluster topology, expert placement, routing batches.

Devices are the expert-parallel (EP) ranks of a single MoE layer, numbered
0..ep_degree-1.  Pipeline stages are packed inside nodes, so one stage's EP
ranks fill the nodes in contiguous blocks of ep_degree // num_nodes ranks;
a device's NVLink domain is the block of ranks sharing its node.  All types
here are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

MIB = 1024 * 1024


class ConfigurationError(ValueError):
    """Invalid or mutually inconsistent configuration values."""


class IntegrityError(ValueError):
    """Inputs that reference entities the other inputs do not define."""


@dataclass(frozen=True)
class Topology:
    """Cluster shape and the per-channel constants used by the cost model.

    Bandwidths are bytes/second, latencies seconds.  ``cpu_sched_latency`` is
    the per-micro-batch cost of running the rebalance planner on a host core;
    ``nic_base_latency`` and ``ce_base_latency`` are the fixed setup costs of
    an inter-node transfer and an intra-node copy-engine transfer.
    """

    num_nodes: int = 2
    gpus_per_node: int = 8
    ep_degree: int = 8
    pp_degree: int = 2
    nvlink_bw: float = 900e9
    internode_bw: float = 50e9
    cpu_sched_latency: float = 50e-6
    nic_base_latency: float = 10e-6
    ce_base_latency: float = 5e-6

    def __post_init__(self) -> None:
        for name in ("num_nodes", "gpus_per_node", "ep_degree", "pp_degree"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        total = self.num_nodes * self.gpus_per_node
        parallel = self.ep_degree * self.pp_degree
        if total != parallel:
            raise ConfigurationError(
                f"ep_degree*pp_degree = {parallel} but num_nodes*gpus_per_node = {total}"
            )
        if self.ep_degree % self.num_nodes != 0:
            raise ConfigurationError(
                f"ep_degree = {self.ep_degree} not divisible by num_nodes = {self.num_nodes}"
            )
        for name in ("nvlink_bw", "internode_bw"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("cpu_sched_latency", "nic_base_latency", "ce_base_latency"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def num_devices(self) -> int:
        return self.ep_degree

    @property
    def ranks_per_node(self) -> int:
        return self.ep_degree // self.num_nodes

    def node_of(self, device: int) -> int:
        if not 0 <= device < self.ep_degree:
            raise IntegrityError(f"device {device} outside 0..{self.ep_degree - 1}")
        return device // self.ranks_per_node

    def domains(self) -> tuple[tuple[int, ...], ...]:
        """NVLink domains as tuples of device ids; they partition the devices."""
        r = self.ranks_per_node
        return tuple(
            tuple(range(n * r, (n + 1) * r)) for n in range(self.num_nodes)
        )

    @cached_property
    def node_of_device(self) -> np.ndarray:
        arr = np.arange(self.ep_degree) // self.ranks_per_node
        arr.flags.writeable = False
        return arr


@dataclass(frozen=True)
class ModelConfig:
    """MoE layer shape plus the balancing knobs attached to it.

    ``dyn`` is the number of migratable (dynamic) experts per device, ``tau``
    the minimum token count an expert needs before the planner will move it,
    and ``max_num_dyn`` the number of incoming-copy buffer slots per device.
    ``token_bytes`` defaults to hidden_dim * 2 (fp16 activations).
    """

    num_experts: int = 128
    top_k: int = 2
    hidden_dim: int = 4096
    expert_weight_bytes: int = 72 * MIB
    token_bytes: int = 0
    dyn: int = 4
    tau: int = 64
    max_num_dyn: int = 8

    def __post_init__(self) -> None:
        if self.token_bytes == 0:
            object.__setattr__(self, "token_bytes", self.hidden_dim * 2)
        for name in ("num_experts", "top_k", "hidden_dim", "expert_weight_bytes", "token_bytes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dyn < 0:
            raise ConfigurationError(f"dyn must be >= 0, got {self.dyn}")
        if self.tau < 0:
            raise ConfigurationError(f"tau must be >= 0, got {self.tau}")
        if self.dyn >= 1 and self.max_num_dyn < 1:
            raise ConfigurationError(
                f"max_num_dyn must be >= 1 when dyn = {self.dyn} >= 1, got {self.max_num_dyn}"
            )
        if self.top_k > self.num_experts:
            raise ConfigurationError(
                f"top_k = {self.top_k} exceeds num_experts = {self.num_experts}"
            )

    def experts_per_device(self, ep_degree: int) -> int:
        if self.num_experts % ep_degree != 0:
            raise ConfigurationError(
                f"num_experts = {self.num_experts} not divisible by ep_degree = {ep_degree}"
            )
        return self.num_experts // ep_degree

    @property
    def copied_weight_buffer_bytes(self) -> int:
        """Bytes reserved per device for incoming expert-weight copies."""
        return self.max_num_dyn * self.expert_weight_bytes


@dataclass(frozen=True)
class ExpertPlacement:
    """Expert-to-device assignment with the static/dynamic split per device.

    ``home[e]`` is the device whose HBM holds expert e's weights.  Static
    experts never move; dynamic experts may be copied within their NVLink
    domain for one micro-batch.  The split only changes at checkpoint
    boundaries (see ``balancer.optimize_placement``).
    """

    home: tuple[int, ...]
    static_sets: tuple[frozenset[int], ...]
    dynamic_sets: tuple[frozenset[int], ...]

    def __post_init__(self) -> None:
        num_devices = len(self.static_sets)
        if len(self.dynamic_sets) != num_devices:
            raise IntegrityError("static_sets and dynamic_sets differ in device count")
        seen: set[int] = set()
        per_device = None
        for d in range(num_devices):
            owned = {e for e, h in enumerate(self.home) if h == d}
            if self.static_sets[d] | self.dynamic_sets[d] != owned:
                raise IntegrityError(f"device {d}: static+dynamic sets do not match home map")
            if self.static_sets[d] & self.dynamic_sets[d]:
                raise IntegrityError(f"device {d}: static and dynamic sets overlap")
            if per_device is None:
                per_device = len(owned)
            elif len(owned) != per_device:
                raise IntegrityError(
                    f"device {d} owns {len(owned)} experts, expected {per_device}"
                )
            seen |= owned
        if seen != set(range(len(self.home))):
            raise IntegrityError("home map does not cover every expert exactly once")
        dyn_sizes = {len(s) for s in self.dynamic_sets}
        if len(dyn_sizes) > 1:
            raise IntegrityError(f"dynamic set sizes differ across devices: {sorted(dyn_sizes)}")

    @property
    def num_experts(self) -> int:
        return len(self.home)

    @property
    def num_devices(self) -> int:
        return len(self.static_sets)

    @property
    def experts_per_device(self) -> int:
        return self.num_experts // self.num_devices

    @property
    def dyn(self) -> int:
        return len(self.dynamic_sets[0]) if self.dynamic_sets else 0

    @cached_property
    def home_array(self) -> np.ndarray:
        arr = np.asarray(self.home, dtype=np.int64)
        arr.flags.writeable = False
        return arr

    @cached_property
    def dynamic_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_experts, dtype=bool)
        for s in self.dynamic_sets:
            mask[list(s)] = True
        mask.flags.writeable = False
        return mask

    def experts_on(self, device: int) -> tuple[int, ...]:
        return tuple(sorted(self.static_sets[device] | self.dynamic_sets[device]))


def build_placement(model: ModelConfig, topo: Topology, seed: int = 0) -> ExpertPlacement:
    """Assign experts to devices in contiguous blocks.

    Seed 0 keeps expert ids in order (experts 0..k-1 on device 0, and so on);
    other seeds permute the expert ids before blocking.  On each device the
    ``model.dyn`` experts with the highest ids form the dynamic set.
    """
    per_device = model.experts_per_device(topo.ep_degree)
    if model.dyn > per_device:
        raise ConfigurationError(
            f"dyn = {model.dyn} exceeds experts_per_device = {per_device}"
        )
    order = np.arange(model.num_experts)
    if seed != 0:
        order = np.random.default_rng(seed).permutation(model.num_experts)
    home = [0] * model.num_experts
    static_sets = []
    dynamic_sets = []
    for d in range(topo.ep_degree):
        block = sorted(int(e) for e in order[d * per_device : (d + 1) * per_device])
        for e in block:
            home[e] = d
        dynamic = frozenset(block[per_device - model.dyn :]) if model.dyn else frozenset()
        static_sets.append(frozenset(block) - dynamic)
        dynamic_sets.append(dynamic)
    return ExpertPlacement(tuple(home), tuple(static_sets), tuple(dynamic_sets))


@dataclass(frozen=True, eq=False)
class RoutingBatch:
    """Token counts of one micro-batch, keyed by (expert, source device)."""

    counts: np.ndarray
    micro_batch_id: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2:
            raise ConfigurationError(f"counts must be 2-D (experts x sources), got {arr.ndim}-D")
        if (arr < 0).any():
            raise ConfigurationError("token counts must be non-negative")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "counts", arr)

    @property
    def num_experts(self) -> int:
        return self.counts.shape[0]

    @property
    def num_sources(self) -> int:
        return self.counts.shape[1]

    @property
    def total_tokens(self) -> int:
        return int(self.counts.sum())

    @cached_property
    def expert_totals(self) -> np.ndarray:
        totals = self.counts.sum(axis=1)
        totals.flags.writeable = False
        return totals

    def nonzero_items(self) -> dict[tuple[int, int], int]:
        es, ss = np.nonzero(self.counts)
        return {(int(e), int(s)): int(self.counts[e, s]) for e, s in zip(es, ss)}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoutingBatch):
            return NotImplemented
        return (
            self.micro_batch_id == other.micro_batch_id
            and self.nonzero_items() == other.nonzero_items()
        )


def device_token_load(
    batch: RoutingBatch,
    placement: ExpertPlacement,
    plan: "RebalancePlan | None" = None,
) -> dict[int, int]:
    """Tokens each device computes for ``batch``, after applying ``plan``.

    Without a plan every expert's tokens land on its home device; plan actions
    reattribute a migrated expert's full token count to the destination.
    """
    if batch.num_experts != placement.num_experts:
        raise IntegrityError(
            f"batch has {batch.num_experts} experts, placement has {placement.num_experts}"
        )
    compute_device = np.array(placement.home_array)
    if plan is not None:
        for action in plan.actions:
            if not 0 <= action.expert < placement.num_experts:
                raise IntegrityError(f"plan references unknown expert {action.expert}")
            if not 0 <= action.dst < placement.num_devices:
                raise IntegrityError(f"plan references unknown device {action.dst}")
            compute_device[action.expert] = action.dst
    loads = np.bincount(
        compute_device, weights=batch.expert_totals, minlength=placement.num_devices
    )
    return {d: int(loads[d]) for d in range(placement.num_devices)}
