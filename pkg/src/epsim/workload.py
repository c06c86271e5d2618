"""Synthetic routing workloads and routing-trace file I/O.

A workload is a sequence of RoutingBatch objects.  Each token picks ``top_k``
distinct experts from the current popularity vector and is charged to a
source device round-robin over the EP group.  ``drift`` is the per-iteration
probability that the popularity vector is redrawn, which models routing
distributions that shift during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import ConfigurationError, ModelConfig, RoutingBatch, Topology

TRACE_HEADER = "iter,layer,expert_id,source_device,token_count"

SKEW_KINDS = ("uniform", "zipf", "dirichlet", "hot_set")


class TraceParseError(ValueError):
    """Malformed or invalid routing-trace file."""


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters of a synthetic workload.

    Skew families: ``uniform``; ``zipf`` with exponent ``zipf_s`` assigned to
    experts in random rank order; ``dirichlet`` with concentration
    ``dirichlet_alpha``; ``hot_set`` where ``hot_count`` random experts share
    probability mass ``hot_mass`` and the rest split the remainder evenly.
    """

    tokens_per_microbatch: int = 4096
    top_k: int = 2
    skew: str = "uniform"
    zipf_s: float = 1.1
    dirichlet_alpha: float = 0.5
    hot_count: int = 4
    hot_mass: float = 0.5
    drift: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tokens_per_microbatch < 1:
            raise ConfigurationError(
                f"tokens_per_microbatch must be >= 1, got {self.tokens_per_microbatch}"
            )
        if self.top_k < 1:
            raise ConfigurationError(f"top_k must be >= 1, got {self.top_k}")
        if self.skew not in SKEW_KINDS:
            raise ConfigurationError(f"skew must be one of {SKEW_KINDS}, got {self.skew!r}")
        if self.skew == "zipf" and self.zipf_s <= 0:
            raise ConfigurationError(f"zipf_s must be positive, got {self.zipf_s}")
        if self.skew == "dirichlet" and self.dirichlet_alpha <= 0:
            raise ConfigurationError(
                f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}"
            )
        if self.skew == "hot_set":
            if self.hot_count < 1:
                raise ConfigurationError(f"hot_count must be >= 1, got {self.hot_count}")
            if not 0.0 <= self.hot_mass <= 1.0:
                raise ConfigurationError(f"hot_mass must be in [0, 1], got {self.hot_mass}")
        if not 0.0 <= self.drift <= 1.0:
            raise ConfigurationError(f"drift must be in [0, 1], got {self.drift}")


def _popularity(spec: WorkloadSpec, num_experts: int, rng: np.random.Generator) -> np.ndarray:
    if spec.skew == "uniform":
        return np.full(num_experts, 1.0 / num_experts)
    if spec.skew == "zipf":
        ranks = rng.permutation(num_experts) + 1.0
        weights = ranks ** -spec.zipf_s
        return weights / weights.sum()
    if spec.skew == "dirichlet":
        return rng.dirichlet(np.full(num_experts, spec.dirichlet_alpha))
    if spec.hot_count > num_experts:
        raise ConfigurationError(
            f"hot_count = {spec.hot_count} exceeds num_experts = {num_experts}"
        )
    probs = np.zeros(num_experts)
    hot = rng.choice(num_experts, size=spec.hot_count, replace=False)
    probs[hot] = spec.hot_mass / spec.hot_count
    cold = num_experts - spec.hot_count
    if cold:
        probs[probs == 0.0] = (1.0 - spec.hot_mass) / cold
    return probs / probs.sum()


def sample_expert_choices(
    rng: np.random.Generator, probs: np.ndarray, tokens: int, top_k: int
) -> np.ndarray:
    """Draw ``top_k`` distinct experts per token, shape (tokens, top_k).

    Exponential race: taking the top_k smallest Exp(1)/p_i keys reproduces
    sequential sampling without replacement with renormalization.
    """
    if int((probs > 0).sum()) < top_k:
        raise ConfigurationError(
            f"top_k = {top_k} exceeds the {int((probs > 0).sum())} experts with positive weight"
        )
    with np.errstate(divide="ignore"):
        keys = rng.exponential(size=(tokens, probs.size)) / probs
    if top_k == probs.size:
        return np.tile(np.arange(top_k), (tokens, 1))
    return np.argpartition(keys, top_k - 1, axis=1)[:, :top_k]


def generate(
    spec: WorkloadSpec, model: ModelConfig, topo: Topology, num_iters: int
) -> list[RoutingBatch]:
    """Produce ``num_iters`` batches; deterministic for a given spec."""
    if num_iters < 0:
        raise ConfigurationError(f"num_iters must be >= 0, got {num_iters}")
    if spec.top_k > model.num_experts:
        raise ConfigurationError(
            f"top_k = {spec.top_k} exceeds num_experts = {model.num_experts}"
        )
    rng = np.random.default_rng(spec.seed)
    num_experts = model.num_experts
    num_sources = topo.ep_degree
    probs = _popularity(spec, num_experts, rng)
    sources = np.arange(spec.tokens_per_microbatch) % num_sources
    batches = []
    for it in range(num_iters):
        if it > 0 and spec.drift > 0.0 and rng.random() < spec.drift:
            probs = _popularity(spec, num_experts, rng)
        choices = sample_expert_choices(rng, probs, spec.tokens_per_microbatch, spec.top_k)
        flat = (choices * num_sources + sources[:, None]).ravel()
        counts = np.bincount(flat, minlength=num_experts * num_sources)
        batches.append(RoutingBatch(counts.reshape(num_experts, num_sources), it))
    return batches


def export_trace(batches: Iterable[RoutingBatch], path: str | Path) -> None:
    """Write batches as CSV lines ``iter,layer,expert_id,source_device,token_count``.

    Zero-count pairs are omitted; the layer column is always 0 because one
    simulated run covers a single MoE layer.
    """
    lines = [TRACE_HEADER]
    for batch in batches:
        for (expert, source), count in sorted(batch.nonzero_items().items()):
            lines.append(f"{batch.micro_batch_id},0,{expert},{source},{count}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def ingest_trace(path: str | Path) -> list[RoutingBatch]:
    """Read a routing trace back into one RoutingBatch per (iter, layer).

    Expert and source-device dimensions are inferred from the largest ids in
    the file.  Batches come back ordered by (iter, layer) with sequential
    micro_batch_ids.  An empty file yields an empty list.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        return []
    if lines[0].strip() != TRACE_HEADER:
        raise TraceParseError(f"line 1: expected header {TRACE_HEADER!r}, got {lines[0]!r}")
    records: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    max_expert = -1
    max_source = -1
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 5:
            raise TraceParseError(f"line {lineno}: expected 5 comma-separated fields, got {len(fields)}")
        try:
            it, layer, expert, source, count = (int(f) for f in fields)
        except ValueError:
            raise TraceParseError(f"line {lineno}: non-integer field in {line!r}") from None
        if count < 0:
            raise TraceParseError(f"line {lineno}: negative token_count {count}")
        if expert < 0 or source < 0:
            raise TraceParseError(f"line {lineno}: negative expert or source id")
        records.setdefault((it, layer), []).append((expert, source, count))
        max_expert = max(max_expert, expert)
        max_source = max(max_source, source)
    batches = []
    for mb_id, key in enumerate(sorted(records)):
        counts = np.zeros((max_expert + 1, max_source + 1), dtype=np.int64)
        for expert, source, count in records[key]:
            counts[expert, source] += count
        batches.append(RoutingBatch(counts, mb_id))
    return batches
