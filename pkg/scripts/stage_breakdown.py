"""Per-stage distance computations at matched recall, pipeline vs baseline.

    python scripts/stage_breakdown.py --config scripts/desk.cfg --set n=100000
"""

import argparse

from pilotann.config import load_config
from pilotann.pipeline_bench import emit_report, matched_point, prepare, run_sweep
from pilotann.staged_search import Toggles

COLUMNS = ("fes_computations", "stage1_computations", "stage1_weighted",
           "stage2_computations", "stage3_computations")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="breakdown.csv")
    args = ap.parse_args()
    cfg = load_config(args.config, [tuple(s.split("=", 1)) for s in args.set])
    art = prepare(cfg)
    eng = art.engine()
    base = run_sweep(art, Toggles.baseline(), "baseline", engine=eng)
    full = run_sweep(art, Toggles(), "pipeline", engine=eng)
    emit_report([full, base], args.out)
    b = matched_point(base, "stage3_computations", cfg.target_recall)
    print(f"recall target {cfg.target_recall}, n={art.base.count}, d={art.base.dim}")
    print(f"{'baseline':>22}: {b:9.1f}")
    for c in COLUMNS:
        print(f"{c:>22}: {matched_point(full, c, cfg.target_recall):9.1f}")
    s23 = matched_point(full, "stage2_computations", cfg.target_recall) + \
        matched_point(full, "stage3_computations", cfg.target_recall)
    print(f"{'stage2+3 / baseline':>22}: {s23 / b:9.3f}")


if __name__ == "__main__":
    main()
