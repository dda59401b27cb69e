#!/usr/bin/env python3
"""Convert a flat ``label,bag_id,f1,...,fd`` CSV into the mil-csv format.

The Musk/Elephant CSVs that circulate with several MIL toolkits use this
layout with labels 0/1.  Bag ids are kept, labels mapped 0 -> -1, 1 -> 1.

    python scripts/import_flat_csv.py musk1.csv data/musk1.mil
"""

import argparse
import csv
import sys

import numpy as np

from misboost.data import Bag, Dataset, save_dataset


def convert(src, dst):
    rows = []
    with open(src, newline="") as fh:
        for rec in csv.reader(fh):
            if rec:
                rows.append(rec)
    bags = []
    cur, label, feats = None, None, []
    for rec in rows:
        lab, bag_id = rec[0], rec[1]
        if bag_id != cur:
            if cur is not None:
                bags.append(Bag(cur, np.array(feats), label))
            cur, feats = bag_id, []
            label = 1 if float(lab) > 0 else -1
        feats.append([float(v) for v in rec[2:]])
    bags.append(Bag(cur, np.array(feats), label))
    ds = Dataset(tuple(bags), len(rows[0]) - 2)
    save_dataset(ds, dst)
    return ds


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src")
    ap.add_argument("dst")
    args = ap.parse_args(argv)
    ds = convert(args.src, args.dst)
    pos = sum(b.label == 1 for b in ds.bags)
    print(f"{args.dst}: {len(ds)} bags ({pos} positive), {ds.n_instances} instances, d={ds.dimension}")


if __name__ == "__main__":
    sys.exit(main())
