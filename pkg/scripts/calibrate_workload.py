"""Search for synthetic workload parameters that hit the acceptance trend
targets: before_lb wasted_ratio near 0.186 at EP=8, feplb token-straggler
reduction in the 45-75 band rising with EP, feplb at least 1.5x ahead of
fastermoe under drift, and diminishing returns in dyn.

Run from the repo root:  python3 scripts/calibrate_workload.py
Prints candidate tables; the chosen constants get frozen into
tests/test_acceptance.py and configs/.
"""

import argparse
import itertools
from concurrent.futures import ProcessPoolExecutor

from epsim import (
    GemmParams,
    Method,
    ModelConfig,
    Topology,
    WorkloadSpec,
    aggregate,
    build_placement,
    generate,
    simulate_run,
)

GRID = {2: (8, 2), 4: (4, 2), 8: (2, 2)}  # ep -> (pp, nodes), iso 16 GPUs

BASE = dict(num_experts=128, top_k=8, tokens_per_microbatch=8192, tau=64)


def run_cell(ep, method, dyn, skew_kwargs, drift, seed, iters, macro_period, ema_window):
    pp, nodes = GRID[ep]
    topo = Topology(num_nodes=nodes, gpus_per_node=8, ep_degree=ep, pp_degree=pp)
    model = ModelConfig(
        num_experts=BASE["num_experts"], top_k=BASE["top_k"], dyn=dyn, tau=BASE["tau"]
    )
    spec = WorkloadSpec(
        tokens_per_microbatch=BASE["tokens_per_microbatch"], top_k=BASE["top_k"],
        drift=drift, seed=seed, **skew_kwargs,
    )
    gemm = GemmParams.from_model(model)
    placement = build_placement(model, topo)
    batches = generate(spec, model, topo, iters)
    period = macro_period if method.kind == "feplb" else 0
    timelines = simulate_run(
        batches, method, placement, model, topo, gemm,
        macro_period=period, ema_window=ema_window,
    )
    return aggregate(timelines, batches)


def stage1_skews(seeds, iters, jobs):
    """before_lb wasted_ratio at EP=8 per skew family."""
    skews = [
        dict(skew="hot_set", hot_count=8, hot_mass=0.4),
        dict(skew="hot_set", hot_count=16, hot_mass=0.4),
        dict(skew="hot_set", hot_count=16, hot_mass=0.5),
        dict(skew="hot_set", hot_count=16, hot_mass=0.6),
        dict(skew="hot_set", hot_count=24, hot_mass=0.6),
        dict(skew="hot_set", hot_count=32, hot_mass=0.6),
        dict(skew="zipf", zipf_s=0.8),
        dict(skew="zipf", zipf_s=1.0),
        dict(skew="zipf", zipf_s=1.2),
        dict(skew="dirichlet", dirichlet_alpha=0.3),
        dict(skew="dirichlet", dirichlet_alpha=0.5),
        dict(skew="dirichlet", dirichlet_alpha=1.0),
    ]
    tasks = [(8, Method.before_lb(), 4, s, 0.3, seed, iters, 0, 16)
             for s in skews for seed in seeds]
    with ProcessPoolExecutor(jobs) as pool:
        results = list(pool.map(_run_star, tasks))
    print("== stage 1: before_lb wasted_ratio at EP=8 (target 0.186 +- 0.03) ==")
    for i, s in enumerate(skews):
        vals = [results[i * len(seeds) + j].wasted_ratio_mean for j in range(len(seeds))]
        mean = sum(vals) / len(vals)
        tag = " <-- in band" if abs(mean - 0.186) <= 0.02 else ""
        print(f"  {str(s):55s} wasted={mean:.3f} (per-seed {['%.3f' % v for v in vals]}){tag}")


def _run_star(args):
    return run_cell(*args)


def stage2_trends(skew_kwargs, seeds, iters, jobs, drifts, macros):
    print(f"== stage 2: trends for {skew_kwargs} ==")
    for drift, (mp, win) in itertools.product(drifts, macros):
        rows = {}
        tasks = []
        keys = []
        for ep in (2, 4, 8):
            for m in (Method.before_lb(), Method.feplb()):
                for seed in seeds:
                    keys.append((ep, m.label, 4, seed))
                    tasks.append((ep, m, 4, skew_kwargs, drift, seed, iters, mp, win))
        for dyn in (2, 8):
            for seed in seeds:
                keys.append((8, "feplb", dyn, seed))
                tasks.append((8, Method.feplb(), dyn, skew_kwargs, drift, seed, iters, mp, win))
        for seed in seeds:
            keys.append((8, "fastermoe", 4, seed))
            tasks.append((8, Method.fastermoe(), 4, skew_kwargs, drift, seed, iters, mp, win))
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_star, tasks))
        for k, r in zip(keys, results):
            rows.setdefault(k[:3], []).append(r)

        def mean_ts(ep, label, dyn):
            rs = rows[(ep, label, dyn)]
            return sum(r.token_straggler_mean for r in rs) / len(rs)

        def mean_wasted(ep, label, dyn):
            rs = rows[(ep, label, dyn)]
            return sum(r.wasted_ratio_mean for r in rs) / len(rs)

        reductions = {
            ep: 100.0 * (1.0 - mean_ts(ep, "feplb", 4) / mean_ts(ep, "before_lb", 4))
            for ep in (2, 4, 8)
        }
        ratio = mean_ts(8, "fastermoe", 4) / mean_ts(8, "feplb", 4)
        dyn_ts = {dyn: mean_ts(8, "feplb", dyn) for dyn in (2, 4, 8)}
        ok = (
            45.0 <= reductions[8] <= 75.0
            and reductions[2] <= reductions[4] <= reductions[8]
            and ratio >= 1.5
            and dyn_ts[2] >= dyn_ts[4] >= dyn_ts[8]
            and (dyn_ts[4] - dyn_ts[8]) <= (dyn_ts[2] - dyn_ts[4])
        )
        print(
            f"  drift={drift} macro=({mp},{win}): wasted_b4={mean_wasted(8, 'before_lb', 4):.3f} "
            f"red%={{2:{reductions[2]:.1f}, 4:{reductions[4]:.1f}, 8:{reductions[8]:.1f}}} "
            f"fm/fe={ratio:.2f} dyn_ts={{2:{dyn_ts[2]:.0f}, 4:{dyn_ts[4]:.0f}, 8:{dyn_ts[8]:.0f}}}"
            f"{'   <== ALL BANDS MET' if ok else ''}"
        )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--stage", type=int, default=0, help="0 = both")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--iters", type=int, default=48)
    ap.add_argument("--jobs", type=int, default=8)
    ap.add_argument("--hot-count", type=int, default=16)
    ap.add_argument("--hot-mass", type=float, default=0.5)
    args = ap.parse_args()
    if args.stage in (0, 1):
        stage1_skews(args.seeds, args.iters, args.jobs)
    if args.stage in (0, 2):
        skew = dict(skew="hot_set", hot_count=args.hot_count, hot_mass=args.hot_mass)
        stage2_trends(
            skew, args.seeds, args.iters, args.jobs,
            drifts=[0.2, 0.3, 0.5],
            macros=[(4, 8), (8, 8), (8, 16)],
        )


if __name__ == "__main__":
    main()
