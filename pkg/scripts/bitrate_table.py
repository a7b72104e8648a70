#!/usr/bin/env python3
"""Print the standard PCM formats with their bit rates."""
import argparse

from digitrec.audio_io import bit_rate, format_bit_rate, load_profile_catalog


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--catalog", default=None, help="catalog file (default: the bundled one)")
    args = p.parse_args()
    for prof in load_profile_catalog(args.catalog):
        bps = bit_rate(prof)
        print(f"{prof.label:<26}{prof.bit_depth:>3} bit{prof.sample_rate:>7} Hz{bps:>9} bps  "
              f"{format_bit_rate(bps)}")


if __name__ == "__main__":
    main()
