"""Command line entry point: ``pilotann <subcommand> ...``.

Thread count is taken from ``PILOTANN_THREADS`` unless ``--threads`` is given.
Experiment subcommands read a flat ``key = value`` config (``--config``) and
accept ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from .backend import THREADS_ENV, ThreadPoolBackend
from .config import load_config
from .dataset_io import GroundTruth, brute_force_topk, load_fvecs, load_ivecs, recall_at_k
from .entry_selection import train_entry_index
from .graph_index import UnreachableTarget, build_graph, load_graph, save_graph
from .pipeline_bench import (ABLATION_COLUMNS, SEEDED_COLUMNS, THRESHOLD_COLUMNS, BenchReport,
                             emit_report, environment, load_pilot_bundle, prepare, run_ablation,
                             run_seeded_experiment, run_sweep, run_threshold_experiment,
                             save_pilot_bundle, write_rows)
from .staged_search import PilotEngine, StageBudgets, Toggles
from .subgraph import build_pilot_subgraph
from .svd_transform import fit_svd, load_svd, primary_dim_for_ratio, save_svd, transform_split

log = logging.getLogger("pilotann")


def _cfg(args):
    pairs = []
    for item in args.set or ():
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    if args.threads:
        pairs.append(("threads", str(args.threads)))
    return load_config(args.config, pairs)


def cmd_build_index(args):
    base = load_fvecs(args.base)
    t = time.perf_counter()
    g = build_graph(base, args.M, args.ef_construction, args.seed)
    save_graph(g, args.out)
    log.info("built %d nodes, %d edges in %.1fs -> %s", g.node_count, g.neighbors.size,
             time.perf_counter() - t, args.out)


def _svd_path(pilot_path: str) -> str:
    return pilot_path.rsplit(".", 1)[0] + ".svd"


def cmd_build_pilot(args):
    base = load_fvecs(args.base)
    graph = load_graph(args.index)
    pd = primary_dim_for_ratio(base.dim, args.svd_ratio)
    svd = fit_svd(base, args.svd_sample_cap, pd, args.seed)
    split = transform_split(svd, base, pd)
    sub = build_pilot_subgraph(graph, base, split, args.sampling_ratio, graph.max_degree,
                               args.ef_construction, args.seed)
    ei = None
    if not args.no_fes:
        members = sub.members
        ei = train_entry_index(members, split.primary[members], args.fes_r, args.fes_iters, args.seed)
    save_pilot_bundle(args.out, sub, ei)
    svd_out = args.svd_out or _svd_path(args.out)
    save_svd(svd, svd_out)
    log.info("pilot: %d members (d'=%d) -> %s, %s", sub.member_count, pd, args.out, svd_out)


def cmd_search(args):
    base = load_fvecs(args.base)
    queries = load_fvecs(args.query)
    graph = load_graph(args.index)
    svd = load_svd(args.svd or _svd_path(args.subgraph))
    sub, ei = load_pilot_bundle(args.subgraph)
    split = transform_split(svd, base, svd.primary_dim)
    backend = ThreadPoolBackend(args.threads or None)
    eng = PilotEngine(graph, base, svd, split, sub, ei, backend, fes_e=args.fes_e or None)
    ef1 = args.ef1 or max(args.ef3, args.k)
    ef2 = args.ef2 or max(args.ef3 // 2, args.k)
    budgets = StageBudgets(ef1, ef2, args.ef3, args.refine_iters)
    tog = Toggles(not args.no_fes, not args.no_stage1, not args.no_stage2, not args.no_pipelining)
    batches = [queries.data[s:s + args.batch] for s in range(0, queries.count, args.batch)]
    t = time.perf_counter()
    results = eng.search_stream(batches, args.k, budgets, tog)
    elapsed = time.perf_counter() - t
    ids = np.concatenate([r.ids for r in results])
    if args.groundtruth:
        gt = load_ivecs(args.groundtruth)
        truth = GroundTruth(gt, np.zeros(gt.shape))
    else:
        truth = brute_force_topk(base, queries, args.k)
    row = {"label": "search", "ef1": ef1 if tog.stage1 else 0, "ef2": ef2 if tog.stage2 else 0,
           "ef3": args.ef3, "k": args.k, "recall": recall_at_k(ids, truth, args.k),
           "qps": queries.count / elapsed}
    for s in ("fes", "stage1", "stage2", "stage3"):
        row[f"{s}_computations"] = float(np.mean(np.concatenate(
            [r.counters.get(s, np.zeros(len(r.ids))) for r in results])))
    row["stage1_weighted"] = row["stage1_computations"] * eng.primary_dim / eng.dim
    row["total_computations"] = sum(row[f"{s}_computations"] for s in ("fes", "stage1", "stage2", "stage3"))
    row["latency_p50_ms"] = row["latency_p95_ms"] = row["latency_p99_ms"] = elapsed / len(batches) * 1e3
    row["schema_version"] = 1
    if args.out:
        emit_report(BenchReport("search", [row], environment()), args.out, plot=False)
    print(f"recall@{args.k}={row['recall']:.4f} qps={row['qps']:.0f} "
          f"stage3={row['stage3_computations']:.1f} total={row['total_computations']:.1f}")


def cmd_sweep(args):
    cfg = _cfg(args)
    art = prepare(cfg)
    eng = art.engine()
    reports = [] if args.baseline else [run_sweep(art, Toggles(), "pipeline", engine=eng)]
    reports.append(run_sweep(art, Toggles.baseline(), "baseline", engine=eng))
    for f in emit_report(reports, args.out, plot=not args.no_plot):
        print(f)


def cmd_seeded(args):
    cfg = _cfg(args)
    art = prepare(cfg, pilot=False)
    rows = run_seeded_experiment(art, args.tau or None)
    for r in rows:
        print(f"tau/ef={r['tau_frac']:.4f} computations={r['computations']} ratio={r['ratio']}")
    print(write_rows(args.out, SEEDED_COLUMNS, rows))


def cmd_threshold(args):
    cfg = _cfg(args)
    art = prepare(cfg, pilot=False)
    try:
        frac, table = run_threshold_experiment(art, args.speedup)
    except UnreachableTarget as exc:
        print(f"unreachable: {exc}", file=sys.stderr)
        return 2
    base = table[0][1]
    rows = [{"tau_frac": f, "computations": c, "ratio": None if c is None else c / base,
             "speedup_target": args.speedup, "threshold": frac} for f, c in table]
    print(f"threshold tau/ef={frac:.4f} for {args.speedup}x")
    print(write_rows(args.out, THRESHOLD_COLUMNS, rows))
    return 0


def cmd_ablation(args):
    cfg = _cfg(args)
    art = prepare(cfg)
    rows = run_ablation(art, timed=not args.counters_only)
    for r in rows:
        r["target_recall"] = cfg.target_recall
        print(f"{r['scheme']:>12}  qps={r['qps_at_target']}  stage3={r['stage3_at_target']}")
    print(write_rows(args.out, ABLATION_COLUMNS, rows))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pilotann", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    a = sub.add_parser("build-index", help="build the full graph")
    a.add_argument("--base", required=True)
    a.add_argument("--M", type=int, default=32)
    a.add_argument("--ef-construction", type=int, default=200)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_build_index)

    a = sub.add_parser("build-pilot", help="sample the subgraph, fit the SVD, train FES")
    a.add_argument("--base", required=True)
    a.add_argument("--index", required=True)
    a.add_argument("--sampling-ratio", type=float, default=0.25)
    a.add_argument("--svd-ratio", type=float, default=0.25)
    a.add_argument("--svd-sample-cap", type=int, default=100_000)
    a.add_argument("--ef-construction", type=int, default=200)
    a.add_argument("--fes-r", type=int, default=32)
    a.add_argument("--fes-iters", type=int, default=25)
    a.add_argument("--no-fes", action="store_true")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True, help="pilot bundle (.npz)")
    a.add_argument("--svd-out", help="SVD sidecar (default: bundle path with .svd)")
    a.set_defaults(fn=cmd_build_pilot)

    a = sub.add_parser("search", help="run the staged search over a query file")
    a.add_argument("--base", required=True)
    a.add_argument("--index", required=True)
    a.add_argument("--subgraph", required=True)
    a.add_argument("--svd")
    a.add_argument("--query", required=True)
    a.add_argument("--groundtruth")
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--ef1", type=int, default=0)
    a.add_argument("--ef2", type=int, default=0)
    a.add_argument("--ef3", type=int, default=64)
    a.add_argument("--refine-iters", type=int, default=2)
    a.add_argument("--batch", type=int, default=256)
    a.add_argument("--fes-e", type=int, default=0)
    a.add_argument("--no-fes", action="store_true")
    a.add_argument("--no-stage1", action="store_true")
    a.add_argument("--no-stage2", action="store_true")
    a.add_argument("--no-pipelining", action="store_true")
    a.add_argument("--threads", type=int, default=0)
    a.add_argument("--out", help="CSV report")
    a.set_defaults(fn=cmd_search)

    def exp(name, fn, help):
        e = sub.add_parser(name, help=help)
        e.add_argument("--config")
        e.add_argument("--set", action="append", metavar="KEY=VALUE")
        e.add_argument("--threads", type=int, default=0, help=f"overrides {THREADS_ENV}")
        e.add_argument("--out", required=True)
        e.set_defaults(fn=fn)
        return e

    e = exp("sweep", cmd_sweep, "recall / throughput / counter sweep over ef3")
    e.add_argument("--baseline", action="store_true", help="baseline rows only")
    e.add_argument("--no-plot", action="store_true")
    e = exp("seeded-exp", cmd_seeded, "computations to target recall with tau true seeds")
    e.add_argument("--tau", type=float, action="append", help="tau/ef fraction (repeatable)")
    e = exp("threshold-exp", cmd_threshold, "smallest tau/ef giving the target saving")
    e.add_argument("--speedup", type=float, default=2.0)
    e = exp("ablation", cmd_ablation, "remove components one at a time")
    e.add_argument("--counters-only", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
