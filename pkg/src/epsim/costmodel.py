"""Analytic timing for the simulator's resource channels.

Grouped-GEMM time follows a per-expert roofline: each expert with tokens pays
a fixed launch overhead plus the max of its compute time and its memory time
(weights read once, activations read/written ``activation_traffic_factor``
times).  NIC and copy-engine transfers are latency + bytes/bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import MIB, ConfigurationError, ModelConfig, Topology


@dataclass(frozen=True)
class GemmParams:
    """Calibration constants for grouped-GEMM roofline timing."""

    flops_per_token_per_expert: float
    peak_flops: float = 989e12
    mem_bw: float = 3.35e12
    per_expert_fixed_overhead: float = 2e-6
    weight_bytes: float = 72 * MIB
    token_bytes: float = 8192.0
    activation_traffic_factor: float = 3.0
    backward_multiplier: float = 2.0

    def __post_init__(self) -> None:
        for name in ("flops_per_token_per_expert", "peak_flops", "mem_bw", "token_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("per_expert_fixed_overhead", "weight_bytes", "activation_traffic_factor"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.backward_multiplier <= 0:
            raise ConfigurationError(
                f"backward_multiplier must be positive, got {self.backward_multiplier}"
            )

    @classmethod
    def from_model(
        cls, model: ModelConfig, ffn_dim: int | None = None, **overrides
    ) -> "GemmParams":
        """Derive GEMM constants from a model config.

        With a gated FFN (three hidden_dim x ffn_dim matrices, 2 bytes per
        element) the forward FLOPs per token equal the expert's weight bytes
        numerically, so that is the default when ffn_dim is not given.
        """
        if ffn_dim is not None:
            flops = 6.0 * model.hidden_dim * ffn_dim
        else:
            flops = float(model.expert_weight_bytes)
        params = dict(
            flops_per_token_per_expert=flops,
            weight_bytes=float(model.expert_weight_bytes),
            token_bytes=float(model.token_bytes),
        )
        params.update(overrides)
        return cls(**params)


def gemm_time(per_expert_tokens: Mapping[int, int] | np.ndarray, p: GemmParams) -> float:
    """Grouped-GEMM seconds for one device's expert token counts.

    Experts with zero tokens contribute nothing, launch overhead included.
    """
    if isinstance(per_expert_tokens, Mapping):
        counts = np.fromiter(per_expert_tokens.values(), dtype=float, count=len(per_expert_tokens))
    else:
        counts = np.asarray(per_expert_tokens, dtype=float)
    if (counts < 0).any():
        raise ConfigurationError("token counts must be non-negative")
    counts = counts[counts > 0]
    if counts.size == 0:
        return 0.0
    compute = counts * (p.flops_per_token_per_expert / p.peak_flops)
    memory = (p.weight_bytes + counts * (p.token_bytes * p.activation_traffic_factor)) / p.mem_bw
    return float(np.maximum(compute, memory).sum() + counts.size * p.per_expert_fixed_overhead)


def nic_dispatch_time(nbytes: float, topo: Topology) -> float:
    """Seconds to move ``nbytes`` across the inter-node network."""
    if nbytes < 0:
        raise ConfigurationError(f"nbytes must be >= 0, got {nbytes}")
    return topo.nic_base_latency + nbytes / topo.internode_bw


def ce_copy_time(nbytes: float, topo: Topology) -> float:
    """Seconds for a copy-engine transfer over intra-node NVLink."""
    if nbytes < 0:
        raise ConfigurationError(f"nbytes must be >= 0, got {nbytes}")
    return topo.ce_base_latency + nbytes / topo.nvlink_bw


CALIBRATION_KEYS = frozenset(
    {
        "flops_per_token_per_expert",
        "peak_flops",
        "mem_bw",
        "per_expert_fixed_overhead",
        "weight_bytes",
        "token_bytes",
        "activation_traffic_factor",
        "backward_multiplier",
        "pipe2_dispatch_factor",
        "pipe2_combine_factor",
    }
)


def load_calibration(path: str | Path) -> dict[str, float]:
    """Parse a key=value calibration file; unknown keys are rejected."""
    values: dict[str, float] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}: line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CALIBRATION_KEYS:
            raise ConfigurationError(f"{path}: line {lineno}: unknown calibration key {key!r}")
        try:
            values[key] = float(value.strip())
        except ValueError:
            raise ConfigurationError(
                f"{path}: line {lineno}: non-numeric value for {key!r}"
            ) from None
    return values


def apply_calibration(params: GemmParams, values: Mapping[str, float]) -> GemmParams:
    """Return params with any GemmParams fields from ``values`` replaced."""
    fields = {k: v for k, v in values.items() if k in GemmParams.__dataclass_fields__}
    return replace(params, **fields) if fields else params
