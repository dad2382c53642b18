"""Remove pipeline components one at a time and compare at matched recall.

    PILOTANN_THREADS=8 python scripts/ablation.py --config scripts/desk.cfg --set n=100000
"""

import argparse

from pilotann.config import load_config
from pilotann.pipeline_bench import ABLATION_COLUMNS, environment, prepare, run_ablation, write_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="ablation.csv")
    ap.add_argument("--counters-only", action="store_true")
    args = ap.parse_args()
    cfg = load_config(args.config, [tuple(s.split("=", 1)) for s in args.set])
    rows = run_ablation(prepare(cfg), timed=not args.counters_only)
    for r in rows:
        r["target_recall"] = cfg.target_recall
    write_rows(args.out, ABLATION_COLUMNS, rows)
    print(environment())
    print(f"{'scheme':>12} {'qps@target':>12} {'stage3@target':>14}")
    for r in rows:
        q = "n/a" if r["qps_at_target"] is None else f"{r['qps_at_target']:.0f}"
        s = "n/a" if r["stage3_at_target"] is None else f"{r['stage3_at_target']:.1f}"
        print(f"{r['scheme']:>12} {q:>12} {s:>14}")


if __name__ == "__main__":
    main()
