#!/usr/bin/env python3
"""Print emitted condition tables and check their Percentage rows against the cells."""
import argparse
import sys
from pathlib import Path

from digitrec.grid import percentage_from_table


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("results", type=Path, help="directory written by the grid runner")
    args = p.parse_args()
    tables = sorted(args.results.glob("table_*.txt"))
    if not tables:
        sys.exit(f"no condition tables under {args.results}")
    status = 0
    for path in tables:
        text = path.read_text()
        print(f"== {path.stem[len('table_'):]}")
        print(text, end="")
        header = text.split("\n", 1)[0].split("\t")[1:]
        last = text.strip().split("\n")[-1].split("\t")[1:]
        recomputed = percentage_from_table(text)
        for name, shown in zip(header, last):
            if shown != "Failed" and shown != f"{recomputed[name]:g}%":
                print(f"  mismatch in {name}: table says {shown}, cells give {recomputed[name]:g}%")
                status = 1
    sys.exit(status)


if __name__ == "__main__":
    main()
