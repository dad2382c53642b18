"""Seeded-search curves and the 2x acceleration threshold.

Writes the computations-to-target table per tau/ef and the full
recall/computation curves for plotting.

    python scripts/seeded_search.py --config scripts/desk.cfg --set n=100000
"""

import argparse
import json

from pilotann.config import load_config
from pilotann.graph_index import UnreachableTarget
from pilotann.pipeline_bench import (SEEDED_COLUMNS, prepare, run_seeded_experiment,
                                     run_threshold_experiment, write_rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--speedup", type=float, default=2.0)
    ap.add_argument("--out", default="seeded.csv")
    args = ap.parse_args()
    cfg = load_config(args.config, [tuple(s.split("=", 1)) for s in args.set])
    art = prepare(cfg, pilot=False)
    rows = run_seeded_experiment(art)
    write_rows(args.out, SEEDED_COLUMNS, rows)
    with open(args.out.rsplit(".", 1)[0] + "_curves.json", "w") as f:
        json.dump([{k: r[k] for k in ("tau_frac", "recalls", "curve")} for r in rows], f)
    for r in rows:
        print(f"tau/ef={r['tau_frac']:.3f}  computations={r['computations']}  ratio={r['ratio']}")
    try:
        frac, table = run_threshold_experiment(art, args.speedup)
        print(f"{args.speedup}x threshold: tau/ef = {frac:.4f}")
    except UnreachableTarget as exc:
        print(f"threshold unreachable: {exc}")


if __name__ == "__main__":
    main()
