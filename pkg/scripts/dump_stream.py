#!/usr/bin/env python3
"""Dump a synthetic task stream to CSV files for external inspection.

Usage: python3 scripts/dump_stream.py --out DIR [--tasks 3] [--seed 5]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from growcl.stream import StreamSpec, dump_csv, generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--tasks", type=int, default=3)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--dim", type=int, default=48)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = StreamSpec(n_tasks=args.tasks, classes_per_task=args.classes,
                      dim=args.dim, seed=args.seed)
    for ds in generate(spec):
        for split in ("train", "test"):
            path = out / f"task{ds.task_id}_{split}.csv"
            dump_csv(ds, path, split=split)
            print(f"wrote {path}")


if __name__ == "__main__":
    main()
