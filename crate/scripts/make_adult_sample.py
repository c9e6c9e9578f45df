#!/usr/bin/env python3
"""Build data/adult_sample.csv from the UCI Adult `adult.data` file.

Usage: make_adult_sample.py <adult.data> <out.csv>

Keeps 9,000 complete rows plus 150 rows with missing ("?") fields, sampled
with a fixed seed, and writes them with a header row. Loading the output
drops the incomplete rows, leaving 9,000 instances (8,000 train / 1,000 test
with --test-fraction 0.111111).
"""
import csv
import random
import sys

COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country",
    "income",
]


def main(src, dst):
    complete, missing = [], []
    with open(src) as f:
        for line in f:
            fields = [x.strip() for x in line.strip().split(",")]
            if len(fields) != len(COLUMNS):
                continue
            (missing if "?" in fields else complete).append(fields)
    rng = random.Random(20170601)
    rows = rng.sample(complete, 9000) + rng.sample(missing, 150)
    rng.shuffle(rows)
    with open(dst, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS)
        w.writerows(rows)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
