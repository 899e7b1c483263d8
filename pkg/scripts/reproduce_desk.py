"""Desk-scale reproduction of the DGP-1 results table and the instrument
strength sweep. Writes into ``--out`` and prints the grid tables.

    python scripts/reproduce_desk.py --out runs/desk --workers 4
"""

import argparse
from pathlib import Path

from agmm.experiment import load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--seeds", type=int, default=None, help="override replicates per cell")
    args = ap.parse_args()
    for name in ("fig3_desk", "strength_desk"):
        cfg = load_config(ROOT / "configs" / f"{name}.json")
        if args.seeds:
            cfg.M_experiments = args.seeds
        out = Path(args.out) / name
        res = run_experiment(cfg, out, workers=args.workers)
        print(f"== {name}: {len(res.records)} records, {len(res.errors)} failures")
        for table in sorted((out / "tables").glob("*_grid.txt")):
            print(table.read_text())


if __name__ == "__main__":
    main()
