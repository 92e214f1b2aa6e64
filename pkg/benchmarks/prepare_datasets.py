"""Convert the public MSD and SUSY CSV downloads to the fbin files the nightly
acceptance check reads.

    python3 benchmarks/prepare_datasets.py --msd YearPredictionMSD.txt --susy SUSY.csv.gz --out data/
    FALKON_DATA_DIR=data/ pytest --nightly tests/test_acceptance.py

MSD: target is the year (first column); the first 463715 rows are the
conventional training set and the remaining 51630 the test set.
SUSY: label is the first column; the whole file is written, the check
subsamples and splits it itself.
"""
import argparse
import os

import numpy as np

from falkon_ooc.io import save_fbin
from falkon_ooc.solver import Dataset

MSD_TRAIN = 463_715


def read(path):
    # np.loadtxt reads .gz transparently
    arr = np.loadtxt(path, delimiter=",", dtype=np.float32)
    return arr[:, 1:], arr[:, 0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--msd", help="YearPredictionMSD.txt (optionally .gz)")
    ap.add_argument("--susy", help="SUSY.csv (optionally .gz)")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    if args.msd:
        X, y = read(args.msd)
        save_fbin(os.path.join(args.out, "msd_train.fbin"), Dataset(X[:MSD_TRAIN], y[:MSD_TRAIN]))
        save_fbin(os.path.join(args.out, "msd_test.fbin"), Dataset(X[MSD_TRAIN:], y[MSD_TRAIN:]))
        print(f"msd: {MSD_TRAIN} train, {len(y) - MSD_TRAIN} test, d={X.shape[1]}")
    if args.susy:
        X, y = read(args.susy)
        save_fbin(os.path.join(args.out, "susy.fbin"), Dataset(X, y))
        print(f"susy: n={len(y)}, d={X.shape[1]}")


if __name__ == "__main__":
    main()
