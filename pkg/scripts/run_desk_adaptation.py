"""Three-arm adaptation study (random init / pretrain / pretrain + weak log).

    python scripts/run_desk_adaptation.py /tmp/desk
"""

import argparse
import logging
import time
from pathlib import Path

from passrank.desk import DESK_SEED, desk_adaptation_config, write_synthetic
from passrank.experiment import audit_leakage, run_adaptation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root", help="data goes to ROOT/data, artifacts to ROOT/adaptation")
    ap.add_argument("--seed", type=int, default=DESK_SEED)
    ap.add_argument("--finetune-steps", type=int, default=150)
    ap.add_argument("--pretrain-steps", type=int, default=300)
    ap.add_argument("--weak-steps", type=int, default=300)
    ap.add_argument("--weak-queries", type=int, default=200)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    root = Path(args.root)
    write_synthetic(root / "data")
    cfg = desk_adaptation_config(
        root / "data", root / "adaptation", args.seed,
        args.finetune_steps, args.pretrain_steps, args.weak_steps, args.weak_queries,
    )
    t0 = time.perf_counter()
    res = run_adaptation(cfg)
    print(res.to_text())
    problems = audit_leakage(cfg.workdir)
    print(f"leakage problems: {len(problems)}; elapsed {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
