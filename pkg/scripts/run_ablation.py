"""Plain vs progressive vs direct distillation over seeds and folds.

    python scripts/run_ablation.py --config scripts/configs/ablation.yaml --out runs/ablation

Prints seed-mean F1 per arm and fraction and writes the full report into --out.
"""
from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from setr_pkd.experiment import load_config, run_experiment

HERE = Path(__file__).resolve().parent


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=str(HERE / "configs" / "ablation.yaml"))
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seeds", type=int, nargs="+", help="override the configured seeds")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, {"seeds": args.seeds} if args.seeds else None)
    start = time.perf_counter()
    results = run_experiment(cfg, args.out, jobs=args.jobs)
    rows = [row for r in results for row in r.metric_rows]
    fractions = [str(f) for f in cfg.fractions]

    print(f"\nseed-mean F1 ({len(cfg.seeds)} seeds x {cfg.folds} folds, k={cfg.k})")
    print("arm".ljust(8) + "".join(f.rjust(8) for f in fractions))
    for arm in cfg.arms:
        means = []
        for f in fractions:
            per_seed = [
                np.mean([r["f1"] for r in rows if r["arm"] == arm and r["seed"] == s and r["fraction"] == f])
                for s in cfg.seeds
            ]
            means.append(np.mean(per_seed))
        print(arm.ljust(8) + "".join(f"{m:8.3f}" for m in means))
    failures = [f for r in results for f in r.failures]
    if failures:
        print(f"\n{len(failures)} failed folds, see {args.out}/failures.txt")
    print(f"\n{(time.perf_counter() - start) / 60:.1f} min; report in {args.out}")


if __name__ == "__main__":
    main()
