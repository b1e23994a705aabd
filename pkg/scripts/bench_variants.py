"""Latency and peak tensor memory of the three variants at equal topology.

Timings are single-threaded CPU wall clock and depend on the machine; the
memory column is exact and reproducible.

    python scripts/bench_variants.py --size 128 --runs 30 --csv runs/bench.csv
"""

import argparse
from pathlib import Path

from vmseg.bench import compare_variants, format_table, variant_configs
from vmseg.segnet import NetConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--depth", type=int, default=2)
    parser.add_argument("--base-channels", type=int, default=8)
    parser.add_argument("--runs", type=int, default=30)
    parser.add_argument("--warmup", type=int, default=3)
    parser.add_argument("--csv", help="write the ranking CSV here")
    args = parser.parse_args()
    base = NetConfig(depth=args.depth, base_channels=args.base_channels)
    reports, ranking = compare_variants(variant_configs(base), (1, args.size, args.size), args.warmup, args.runs)
    print(format_table(reports))
    print()
    print(ranking, end="")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(ranking, encoding="utf-8")


if __name__ == "__main__":
    main()
