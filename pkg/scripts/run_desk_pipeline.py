#!/usr/bin/env python3
"""Run every stage of a config end to end and print the headline numbers.

    python scripts/run_desk_pipeline.py [--config configs/desk.cfg] [--workers N] [--runs-dir DIR]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from decifr import pipeline

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--runs-dir", default=None)
    ap.add_argument("--run-id", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.time()
    run = pipeline.run_all(args.config, run_id=args.run_id, workers=args.workers,
                           root=Path(args.runs_dir) if args.runs_dir else None)
    report = json.loads((run.root / "report.json").read_text())
    print(f"\nrun {run.root} finished in {time.time() - t0:.0f}s")
    for c in report["cells"]:
        print(f"  lambda={c['lambda_dummy']:g} {c['member_class']:17s} matched {c['matched_mean_dice']:.4f} "
              f"mismatched {c['mismatched_mean_dice']:.4f}  AUC {c['auc']:.4f}  acc {c['accuracy']:.4f}")
    print(f"report: {run.root / 'report' / 'report.md'}")


if __name__ == "__main__":
    main()
