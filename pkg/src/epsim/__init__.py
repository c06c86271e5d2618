"""Discrete-event simulator for expert-parallel MoE load balancing."""

__version__ = "0.1.0"

from .balancer import (
    CopyAction,
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
    build_placement,
    device_token_load,
)
from .costmodel import (
    GemmParams,
    apply_calibration,
    ce_copy_time,
    gemm_time,
    load_calibration,
    nic_dispatch_time,
)
from .metrics import (
    RunMetrics,
    aggregate,
    gemm_straggler,
    token_straggler,
    wasted_ratio,
)
from .simulator import (
    METHOD_KINDS,
    LayerTimeline,
    Method,
    SemanticsError,
    simulate_microbatch,
    simulate_run,
)
from .workload import (
    TRACE_HEADER,
    TraceParseError,
    WorkloadSpec,
    export_trace,
    generate,
    ingest_trace,
    sample_expert_choices,
)

__all__ = [
    "CopyAction",
    "ConfigurationError",
    "ExpertPlacement",
    "GemmParams",
    "IntegrityError",
    "LayerTimeline",
    "LoadHistory",
    "METHOD_KINDS",
    "Method",
    "ModelConfig",
    "RebalancePlan",
    "RoutingBatch",
    "RunMetrics",
    "SemanticsError",
    "TRACE_HEADER",
    "Topology",
    "TraceParseError",
    "WorkloadSpec",
    "aggregate",
    "apply_calibration",
    "build_placement",
    "ce_copy_time",
    "device_token_load",
    "export_trace",
    "gemm_straggler",
    "gemm_time",
    "generate",
    "ingest_trace",
    "load_calibration",
    "nic_dispatch_time",
    "optimize_placement",
    "plan_rebalance",
    "sample_expert_choices",
    "simulate_microbatch",
    "simulate_run",
    "token_straggler",
    "update_history",
    "wasted_ratio",
]
