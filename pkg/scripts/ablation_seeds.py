#!/usr/bin/env python3
"""Repeat the lambda_dummy ablation over several master seeds for one member class.

    python scripts/ablation_seeds.py [--config configs/desk.cfg] [--member metal/coarse] [--seeds 0 1 2]

Each seed is a separate run (``<run_id>-ablation-<class>-s<seed>``) restricted
to the chosen member class; the script prints AUC per lambda per seed and the
majority direction of AUC(max lambda) >= AUC(0).
"""

import argparse
import logging
from pathlib import Path

from decifr import pipeline

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--member", default="metal/coarse")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--runs-dir", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = pipeline.seed_ablation(args.config, args.member, args.seeds, args.runs_dir, args.workers)
    for r in rows:
        aucs = "  ".join(f"AUC(lambda={k})={v:.4f}" for k, v in r["auc_by_lambda"].items())
        print(f"seed {r['seed']}: {aucs}  direction {'reproduced' if r['direction_reproduced'] else 'NOT reproduced'}")
    wins = sum(r["direction_reproduced"] for r in rows)
    print(f"majority direction: {'reproduced' if 2 * wins > len(rows) else 'NOT reproduced'} ({wins}/{len(rows)})")


if __name__ == "__main__":
    main()
