"""Command-line front end: experiment runner, comparison table, trace export.

Config files are flat ``key = value`` lines with ``#`` comments.  Any value
may be a ``|``-separated list, which expands the config into the cross
product of all such axes (one result row per cell).  ``pp_ep`` couples the
pipeline and expert degrees into a single axis (``pp/ep``), since they
normally co-vary to keep the device count fixed.

The EPSIM_CALIBRATION environment variable names a default cost-model
calibration file; explicit config keys override it.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .core import ConfigurationError, ModelConfig, Topology, build_placement
from .costmodel import GemmParams, load_calibration
from .metrics import aggregate
from .simulator import Method, simulate_run
from .workload import TraceParseError, WorkloadSpec, export_trace, generate

METRICS_COLUMNS = (
    "cell_id",
    "method",
    "pp",
    "ep",
    "dyn",
    "tau",
    "seed",
    "token_straggler",
    "gemm_straggler_s",
    "layer_fwd_s",
    "layer_bwd_s",
    "wasted_ratio",
)

COMPARE_METRICS = (
    "token_straggler",
    "gemm_straggler_s",
    "layer_fwd_s",
    "layer_bwd_s",
    "wasted_ratio",
)

_KEY_COLUMNS = ("pp", "ep", "dyn", "tau", "seed")

DEFAULTS: dict[str, str] = {
    # topology
    "gpus_per_node": "8",
    "pp_ep": "",
    "pp": "",
    "ep": "",
    "nvlink_bw": "900e9",
    "internode_bw": "50e9",
    "cpu_sched_latency": "50e-6",
    "nic_base_latency": "10e-6",
    "ce_base_latency": "5e-6",
    # model
    "num_experts": "128",
    "top_k": "2",
    "hidden_dim": "4096",
    "expert_weight_bytes": str(72 * 1024 * 1024),
    "token_bytes": "0",
    "dyn": "4",
    "tau": "64",
    "max_num_dyn": "8",
    # workload
    "tokens_per_microbatch": "4096",
    "skew": "uniform",
    "drift": "0.0",
    "num_iters": "64",
    # run
    "method": "feplb",
    "seed": "0",
    "placement_seed": "0",
    "macro_period": "0",
    "ema_window": "1024",
    # cost model
    "calibration": "",
    "ffn_dim": "",
    "flops_per_token_per_expert": "",
    "peak_flops": "",
    "mem_bw": "",
    "per_expert_fixed_overhead": "",
    "activation_traffic_factor": "",
    "backward_multiplier": "",
    "pipe2_dispatch_factor": "",
    "pipe2_combine_factor": "",
}


class SchemaError(ValueError):
    """A results file is missing required columns."""


def parse_config(path: str | Path) -> dict[str, str]:
    """Read a flat key=value config; unknown keys are rejected."""
    values: dict[str, str] = dict(DEFAULTS)
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}: line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigurationError(f"{path}: line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def expand_grid(values: dict[str, str]) -> list[dict[str, str]]:
    """Cross product over every key whose value contains ``|``."""
    cells = [dict(values)]
    for key in sorted(values):
        if "|" not in values[key]:
            continue
        options = [v.strip() for v in values[key].split("|")]
        if any(not v for v in options):
            raise ConfigurationError(f"empty grid option in {key!r}")
        cells = [dict(cell, **{key: option}) for cell in cells for option in options]
    return cells


def _parse_int(values: dict[str, str], key: str) -> int:
    try:
        return int(values[key])
    except ValueError:
        raise ConfigurationError(f"{key}: expected integer, got {values[key]!r}") from None


def _parse_float(values: dict[str, str], key: str) -> float:
    try:
        return float(values[key])
    except ValueError:
        raise ConfigurationError(f"{key}: expected number, got {values[key]!r}") from None


def _parse_skew(values: dict[str, str]) -> dict:
    token = values["skew"].strip()
    parts = token.split(":")
    kind = parts[0]
    out: dict = {"skew": kind}
    try:
        if kind == "uniform":
            if len(parts) != 1:
                raise ConfigurationError(f"skew: uniform takes no parameters, got {token!r}")
        elif kind == "zipf":
            if len(parts) != 2:
                raise ConfigurationError(f"skew: expected zipf:<s>, got {token!r}")
            out["zipf_s"] = float(parts[1])
        elif kind == "dirichlet":
            if len(parts) != 2:
                raise ConfigurationError(f"skew: expected dirichlet:<alpha>, got {token!r}")
            out["dirichlet_alpha"] = float(parts[1])
        elif kind == "hot_set":
            if len(parts) != 3:
                raise ConfigurationError(f"skew: expected hot_set:<count>:<mass>, got {token!r}")
            out["hot_count"] = int(parts[1])
            out["hot_mass"] = float(parts[2])
        else:
            raise ConfigurationError(f"skew: unknown family {kind!r} in {token!r}")
    except ValueError:
        raise ConfigurationError(f"skew: non-numeric parameter in {token!r}") from None
    return out


@dataclass(frozen=True)
class Cell:
    """One fully resolved grid cell."""

    cell_id: str
    values: dict[str, str]
    topo: Topology
    model: ModelConfig
    workload: WorkloadSpec
    method: Method
    gemm: GemmParams
    num_iters: int
    seed: int
    placement_seed: int
    macro_period: int
    ema_window: int


def _resolve_degrees(values: dict[str, str]) -> tuple[int, int]:
    pp_ep = values["pp_ep"].strip()
    if pp_ep and (values["pp"] or values["ep"]):
        raise ConfigurationError("give either pp_ep or separate pp/ep keys, not both")
    if pp_ep:
        parts = pp_ep.split("/")
        if len(parts) != 2:
            raise ConfigurationError(f"pp_ep: expected <pp>/<ep>, got {pp_ep!r}")
        try:
            return int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigurationError(f"pp_ep: non-integer in {pp_ep!r}") from None
    pp = int(values["pp"]) if values["pp"] else 2
    ep = int(values["ep"]) if values["ep"] else 8
    return pp, ep


def build_cell(values: dict[str, str], seed_override: int | None = None) -> Cell:
    pp, ep = _resolve_degrees(values)
    gpus_per_node = _parse_int(values, "gpus_per_node")
    if (pp * ep) % gpus_per_node != 0:
        raise ConfigurationError(
            f"pp*ep = {pp * ep} not divisible by gpus_per_node = {gpus_per_node}"
        )
    topo = Topology(
        num_nodes=(pp * ep) // gpus_per_node,
        gpus_per_node=gpus_per_node,
        ep_degree=ep,
        pp_degree=pp,
        nvlink_bw=_parse_float(values, "nvlink_bw"),
        internode_bw=_parse_float(values, "internode_bw"),
        cpu_sched_latency=_parse_float(values, "cpu_sched_latency"),
        nic_base_latency=_parse_float(values, "nic_base_latency"),
        ce_base_latency=_parse_float(values, "ce_base_latency"),
    )
    model = ModelConfig(
        num_experts=_parse_int(values, "num_experts"),
        top_k=_parse_int(values, "top_k"),
        hidden_dim=_parse_int(values, "hidden_dim"),
        expert_weight_bytes=_parse_int(values, "expert_weight_bytes"),
        token_bytes=_parse_int(values, "token_bytes"),
        dyn=_parse_int(values, "dyn"),
        tau=_parse_int(values, "tau"),
        max_num_dyn=_parse_int(values, "max_num_dyn"),
    )
    seed = seed_override if seed_override is not None else _parse_int(values, "seed")
    workload = WorkloadSpec(
        tokens_per_microbatch=_parse_int(values, "tokens_per_microbatch"),
        top_k=model.top_k,
        drift=_parse_float(values, "drift"),
        seed=seed,
        **_parse_skew(values),
    )
    calibration: dict[str, float] = {}
    calibration_path = values["calibration"] or os.environ.get("EPSIM_CALIBRATION", "")
    if calibration_path:
        calibration.update(load_calibration(calibration_path))
    for key in (
        "flops_per_token_per_expert",
        "peak_flops",
        "mem_bw",
        "per_expert_fixed_overhead",
        "activation_traffic_factor",
        "backward_multiplier",
    ):
        if values[key]:
            calibration[key] = _parse_float(values, key)
    ffn_dim = _parse_int(values, "ffn_dim") if values["ffn_dim"] else None
    gemm = GemmParams.from_model(
        model,
        ffn_dim=ffn_dim,
        **{k: v for k, v in calibration.items() if k in GemmParams.__dataclass_fields__},
    )
    method_kwargs = {}
    if "pipe2_dispatch_factor" in calibration or values["pipe2_dispatch_factor"]:
        method_kwargs["pipe2_dispatch_factor"] = (
            _parse_float(values, "pipe2_dispatch_factor")
            if values["pipe2_dispatch_factor"]
            else calibration["pipe2_dispatch_factor"]
        )
    if "pipe2_combine_factor" in calibration or values["pipe2_combine_factor"]:
        method_kwargs["pipe2_combine_factor"] = (
            _parse_float(values, "pipe2_combine_factor")
            if values["pipe2_combine_factor"]
            else calibration["pipe2_combine_factor"]
        )
    base = Method.parse(values["method"])
    method = Method(base.kind, base.pipe, **method_kwargs) if method_kwargs else base
    cell_id = (
        f"pp{pp}ep{ep}_{method.label}_dyn{model.dyn}_tau{model.tau}_seed{seed}"
    )
    return Cell(
        cell_id=cell_id,
        values=dict(values, seed=str(seed)),
        topo=topo,
        model=model,
        workload=workload,
        method=method,
        gemm=gemm,
        num_iters=_parse_int(values, "num_iters"),
        seed=seed,
        placement_seed=_parse_int(values, "placement_seed"),
        macro_period=_parse_int(values, "macro_period"),
        ema_window=_parse_int(values, "ema_window"),
    )


def build_cells(values: dict[str, str], seed_override: int | None = None) -> list[Cell]:
    cells = [build_cell(v, seed_override) for v in expand_grid(values)]
    ids: dict[str, dict[str, str]] = {}
    for cell, raw in zip(cells, expand_grid(values)):
        if cell.cell_id in ids:
            varying = {k for k in raw if raw[k] != ids[cell.cell_id][k]}
            raise ConfigurationError(
                f"grid cells collide on id {cell.cell_id!r}; axes {sorted(varying)} "
                "do not appear in the cell id (vary pp_ep, method, dyn, tau or seed instead)"
            )
        ids[cell.cell_id] = raw
    return cells


def _fmt(value: float) -> str:
    return repr(float(value))


def run_cell(cell: Cell) -> dict:
    """Simulate one cell and return its result row, series and plan dump."""
    placement = build_placement(cell.model, cell.topo, cell.placement_seed)
    batches = generate(cell.workload, cell.model, cell.topo, cell.num_iters)
    timelines = simulate_run(
        batches,
        cell.method,
        placement,
        cell.model,
        cell.topo,
        cell.gemm,
        macro_period=cell.macro_period,
        ema_window=cell.ema_window,
    )
    run = aggregate(timelines, batches)
    pp, ep = _resolve_degrees(cell.values)
    row = {
        "cell_id": cell.cell_id,
        "method": cell.method.label,
        "pp": str(pp),
        "ep": str(ep),
        "dyn": str(cell.model.dyn),
        "tau": str(cell.model.tau),
        "seed": str(cell.seed),
        "token_straggler": _fmt(run.token_straggler_mean),
        "gemm_straggler_s": _fmt(run.gemm_straggler_mean),
        "layer_fwd_s": _fmt(run.layer_time_fwd_mean),
        "layer_bwd_s": _fmt(run.layer_time_bwd_mean),
        "wasted_ratio": _fmt(run.wasted_ratio_mean),
    }
    series_lines = []
    for i in range(run.iterations):
        series_lines.append(
            ",".join(
                (
                    cell.cell_id,
                    str(i),
                    _fmt(run.token_straggler_series[i]),
                    _fmt(run.gemm_straggler_series[i]),
                    _fmt(run.layer_fwd_series[i]),
                    _fmt(run.layer_bwd_series[i]),
                    _fmt(run.wasted_ratio_series[i]),
                )
            )
        )
    plan_lines = []
    for timeline in timelines:
        if timeline.direction != "forward":
            continue
        if timeline.plan.actions:
            for action in timeline.plan.actions:
                plan_lines.append(f"{action.expert},{action.src},{action.dst}")
        plan_lines.append("")
    return {
        "row": row,
        "series": series_lines,
        "plans": plan_lines,
        "copied_weight_buffer_bytes": cell.model.copied_weight_buffer_bytes,
    }


def _run_cell_values(args: tuple[dict[str, str], int | None]) -> dict:
    values, seed_override = args
    return run_cell(build_cell(values, seed_override))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_experiment(
    config_path: str | Path,
    out_dir: str | Path | None = None,
    overwrite: bool = False,
    jobs: int = 1,
    seed: int | None = None,
) -> Path:
    """Run every grid cell of a config and write the results directory.

    Outputs: metrics.csv (one row per cell), series.csv (per-iteration
    metrics), plans/<cell_id>.txt (one ``expert,src,dst`` line per action,
    blank line per micro-batch) and manifest.json.  Deterministic: the same
    config and seed produce byte-identical files.
    """
    config_path = Path(config_path)
    values = parse_config(config_path)
    cells = build_cells(values, seed)
    out = Path(out_dir) if out_dir is not None else Path(f"{config_path.stem}_results")
    if out.exists():
        if not overwrite:
            raise ConfigurationError(
                f"results directory {out} exists; pass --overwrite to replace it"
            )
        shutil.rmtree(out)
    (out / "plans").mkdir(parents=True)
    work = [(cell.values, seed) for cell in cells]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_values, work))
    else:
        results = [_run_cell_values(item) for item in work]
    order = sorted(range(len(cells)), key=lambda i: cells[i].cell_id)
    metrics_lines = [",".join(METRICS_COLUMNS)]
    series_lines = ["cell_id,iter,token_straggler,gemm_straggler_s,layer_fwd_s,layer_bwd_s,wasted_ratio"]
    manifest_cells = []
    for i in order:
        cell, result = cells[i], results[i]
        metrics_lines.append(",".join(result["row"][c] for c in METRICS_COLUMNS))
        series_lines.extend(result["series"])
        _atomic_write(out / "plans" / f"{cell.cell_id}.txt", "\n".join(result["plans"]) + "\n")
        manifest_cells.append(
            {
                "cell_id": cell.cell_id,
                "values": cell.values,
                "copied_weight_buffer_bytes": result["copied_weight_buffer_bytes"],
            }
        )
    _atomic_write(out / "metrics.csv", "\n".join(metrics_lines) + "\n")
    _atomic_write(out / "series.csv", "\n".join(series_lines) + "\n")
    manifest = {
        "tool": "epsim",
        "version": __version__,
        "config_file": config_path.name,
        "config": values,
        "seed_override": seed,
        "cells": manifest_cells,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _read_metrics(path: Path) -> list[dict[str, str]]:
    metrics_file = path / "metrics.csv"
    if not metrics_file.exists():
        raise SchemaError(f"{path}: metrics.csv not found")
    lines = metrics_file.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{metrics_file}: empty")
    header = lines[0].split(",")
    missing = [c for c in METRICS_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{metrics_file}: missing columns {missing}")
    rows = []
    for line in lines[1:]:
        if line.strip():
            rows.append(dict(zip(header, line.split(","))))
    return rows


def compare(result_dirs: Sequence[str | Path], out_csv: str | Path | None = None) -> list[str]:
    """Tabulate metric reductions of each directory relative to the first.

    Rows are joined on (pp, ep, dyn, tau, seed); each non-base directory
    contributes a reduction column per metric, labeled dir:method, and the
    best (largest) reduction per row is marked.  Returns the CSV lines.
    """
    if len(result_dirs) < 2:
        raise ConfigurationError("compare needs at least two results directories")
    dirs = [Path(d) for d in result_dirs]
    tables = [_read_metrics(d) for d in dirs]
    # A single-method base joins on the config key alone (reduction tables);
    # a multi-method base adds method to the key (self-comparison, regression
    # diffing), so identical inputs always line up row for row.
    key_cols = _KEY_COLUMNS
    if len({tuple(r[c] for c in key_cols) for r in tables[0]}) != len(tables[0]):
        key_cols = _KEY_COLUMNS + ("method",)
    base_rows: dict[tuple[str, ...], dict[str, str]] = {}
    for row in tables[0]:
        key = tuple(row[c] for c in key_cols)
        if key in base_rows:
            raise ConfigurationError(
                f"{dirs[0]}: multiple rows for {dict(zip(key_cols, key))}"
            )
        base_rows[key] = row
    labels = []
    other: list[dict[tuple[str, ...], list[dict[str, str]]]] = []
    for d, table in zip(dirs[1:], tables[1:]):
        grouped: dict[tuple[str, ...], list[dict[str, str]]] = {}
        for row in table:
            grouped.setdefault(tuple(row[c] for c in key_cols), []).append(row)
        other.append(grouped)
        methods = sorted({row["method"] for row in table})
        labels.append((d.name, methods))
    columns: list[tuple[int, str, str]] = []  # (dir index, method, label)
    for i, (name, methods) in enumerate(labels):
        for m in methods:
            columns.append((i, m, f"{name}:{m}"))
    header = list(key_cols) + ["metric", "base"] + [
        f"{label}_reduction_pct" for _, _, label in columns
    ] + ["best"]
    lines = [",".join(header)]
    for key in sorted(base_rows):
        base = base_rows[key]
        for metric in COMPARE_METRICS:
            base_value = float(base[metric])
            reductions: list[tuple[str, float | None]] = []
            for dir_index, method, label in columns:
                rows = [r for r in other[dir_index].get(key, []) if r["method"] == method]
                if not rows:
                    reductions.append((label, None))
                    continue
                value = float(rows[0][metric])
                if base_value == 0.0:
                    reductions.append((label, 0.0 if value == 0.0 else float("-inf")))
                else:
                    reductions.append((label, 100.0 * (base_value - value) / base_value))
            present = [(label, r) for label, r in reductions if r is not None]
            # the base wins ties: a reduction must be strictly positive
            best = max(present, key=lambda lr: lr[1])[0] if present else ""
            if present and max(r for _, r in present) <= 0.0:
                best = "base"
            fields = list(key) + [metric, _fmt(base_value)]
            for _, reduction in reductions:
                fields.append("" if reduction is None else f"{reduction:.2f}")
            fields.append(best)
            lines.append(",".join(fields))
    if out_csv is not None:
        _atomic_write(Path(out_csv), "\n".join(lines) + "\n")
    return lines


def trace_export(config_path: str | Path, out_path: str | Path | None = None) -> Path:
    """Generate the config's workload and write it as a routing trace."""
    config_path = Path(config_path)
    values = parse_config(config_path)
    cells = build_cells(values)
    if len(cells) != 1:
        raise ConfigurationError(
            f"trace-export needs a single-cell config, this one expands to {len(cells)} cells"
        )
    cell = cells[0]
    batches = generate(cell.workload, cell.model, cell.topo, cell.num_iters)
    out = Path(out_path) if out_path is not None else Path(f"{config_path.stem}.trace")
    export_trace(batches, out)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="epsim", description="Expert-parallel MoE load-balancing simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every grid cell of a config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="results directory")
    p_run.add_argument("--overwrite", action="store_true", help="replace an existing directory")
    p_run.add_argument("--jobs", type=int, default=1, help="concurrent grid cells")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_cmp = sub.add_parser("compare", help="reductions vs the first results directory")
    p_cmp.add_argument("dirs", nargs="+")
    p_cmp.add_argument("--out", default="comparison.csv", help="comparison CSV path")

    p_trace = sub.add_parser("trace-export", help="write a config's workload as a trace file")
    p_trace.add_argument("config")
    p_trace.add_argument("--out", default=None, help="trace file path")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            out = run_experiment(
                args.config,
                out_dir=args.out,
                overwrite=args.overwrite,
                jobs=args.jobs,
                seed=args.seed,
            )
            print(f"wrote {out}")
        elif args.command == "compare":
            lines = compare(args.dirs, out_csv=args.out)
            for line in lines:
                print(line.replace(",", "\t"))
            print(f"wrote {args.out}")
        else:
            out = trace_export(args.config, args.out)
            print(f"wrote {out}")
    except (ConfigurationError, TraceParseError, SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
