"""Cross-validated BOW/SDM/FirstP/MaxP/SumP comparison on the synthetic collection.

    python scripts/run_desk_experiment.py /tmp/desk --steps 300
"""

import argparse
import logging
import time
from pathlib import Path

from passrank.desk import DESK_SEED, desk_experiment_config, write_synthetic
from passrank.experiment import audit_leakage, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root", help="data goes to ROOT/data, artifacts to ROOT/experiment")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=DESK_SEED)
    ap.add_argument("--variants", default="title", help="comma-separated query variants")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = Path(args.root)
    write_synthetic(root / "data")
    cfg = desk_experiment_config(root / "data", root / "experiment", args.seed, args.steps)
    cfg.variants = args.variants.split(",")
    t0 = time.perf_counter()
    res = run_experiment(cfg)
    print(res.to_text("ndcg@20"))
    for system, row in res.per_fold.items():
        print(f"{system:<7}", "  ".join(f"{v}: " + " ".join(f"{x:.3f}" for x in folds) for v, folds in row.items()))
    problems = audit_leakage(cfg.workdir)
    print(f"leakage problems: {len(problems)}; elapsed {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
