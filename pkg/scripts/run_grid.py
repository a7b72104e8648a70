#!/usr/bin/env python3
"""Run the benchmark grid and print the condition tables.

    python3 scripts/run_grid.py --config configs/grid_default.toml --out results/
"""
import argparse
import logging
import time
from pathlib import Path

from digitrec.grid import condition_table, emit_reports, load_grid_config, run_grid

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "grid_default.toml")
    p.add_argument("--out", type=Path, default=ROOT / "results")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    overrides = {"seed": args.seed} if args.seed is not None else None
    config = load_grid_config(args.config, overrides)
    start = time.perf_counter()
    report = run_grid(config, workers=args.workers)
    paths = emit_reports(report, args.out)
    for cond in report.conditions:
        print(f"== {cond} ({report.table_profile})")
        print(condition_table(report, cond))
    print("ranking (informational): " + " > ".join(k.upper() for k in report.ranking))
    failed = [c for c in report.cells.values() if not c.ok]
    print(f"{len(report.cells)} cells, {len(failed)} failed, {time.perf_counter() - start:.0f} s; "
          f"{len(paths)} files in {args.out}")


if __name__ == "__main__":
    main()
