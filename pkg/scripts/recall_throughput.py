"""Recall / throughput / counter sweep for the pipeline and the baseline, with a plot.

    python scripts/recall_throughput.py --config scripts/desk.cfg --set n=100000 --out sweep.csv
"""

import argparse

from pilotann.config import load_config
from pilotann.pipeline_bench import emit_report, prepare, run_sweep
from pilotann.staged_search import Toggles


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()
    cfg = load_config(args.config, [tuple(s.split("=", 1)) for s in args.set])
    art = prepare(cfg)
    eng = art.engine()
    reps = [run_sweep(art, Toggles(), "pipeline", engine=eng),
            run_sweep(art, Toggles.baseline(), "baseline", engine=eng)]
    for rep in reps:
        for r in rep.rows:
            print(f"{rep.label:>9} ef3={r['ef3']:>4} recall={r['recall']:.4f} qps={r['qps']:9.0f} "
                  f"stage3={r['stage3_computations']:8.1f}")
        if not rep.recall_monotone():
            print(f"note: {rep.label} recall is not monotone in ef on this sweep")
    print(emit_report(reps, args.out))


if __name__ == "__main__":
    main()
