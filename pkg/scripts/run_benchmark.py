"""Run the synthetic ablation benchmark and print the headline comparisons.

    python scripts/run_benchmark.py [--config configs/benchmark.cfg] [--out runs/benchmark]
"""

import argparse
import logging
import time
from pathlib import Path

from emgup.config import RunConfig
from emgup.data import synth_generate
from emgup.evaluation import AblationConfig, run_ablation, summarize, write_summary

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(ROOT / "configs" / "benchmark.cfg"))
    p.add_argument("--out")
    p.add_argument("--seeds", help="comma-separated, overrides ablation_seeds")
    p.add_argument("-v", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.v else logging.WARNING, format="%(message)s")

    overrides = {"out_dir": args.out, "ablation_seeds": args.seeds}
    rc = RunConfig.load(args.config, **{k: v for k, v in overrides.items() if v is not None})
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    reports = run_ablation(lambda s: synth_generate(rc.synth(s))[0], rc, AblationConfig.from_run_config(rc))
    rows = summarize(reports)
    write_summary(rows, out / f"ablation_summary__{rc.fingerprint()}.csv")
    for cell, reps in reports.items():
        for rep in reps:
            rep.save(out / "cells" / f"{cell.label()}__seed{rep.seed}.json")

    for r in rows:
        print(f"{r['variant']:5s} view={r['view_mode'] or '-':9s} filter={r['filtering'] or '-':5s} "
              f"acc={100 * r['mean_acc']:6.2f} mf1={100 * r['mean_mf1']:6.2f}  (std {100 * r['std_acc']:.2f})")
    print(f"{(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
