#!/usr/bin/env python3
"""IHDP covariates and NPCI response-surface-B realizations.

extract   raw IHDP covariate table -> the 747-row analysis subset
simulate  subset -> N realization CSVs (x1..x25,t,y,mu0,mu1)

The subset keeps every control and the treated children of white mothers,
which yields 747 rows (139 treated). Surface B follows Hill (2011):
Y(0) ~ N(exp((X + 0.5) beta), 1), Y(1) ~ N(X beta - omega, 1) with omega
chosen so that the average effect on the treated equals 4.
"""

import argparse
import csv
import pathlib
import sys

import numpy as np

CONTINUOUS = ["bw", "b.head", "preterm", "birth.o", "nnhealth", "momage"]
BINARY = ["sex", "twin", "b.marr", "mom.lths", "mom.hs", "mom.scoll", "cig", "first", "booze", "drugs",
          "work.dur", "prenatal", "site1", "site2", "site3", "site4", "site5", "site6", "site7"]
COVARIATES = CONTINUOUS + BINARY


def extract(raw: pathlib.Path, out: pathlib.Path) -> None:
    with raw.open(newline="") as f:
        rows = list(csv.DictReader(f))
    keep = [r for r in rows if r["treat"] == "0" or r["momwhite"] == "1"]
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["treat"] + COVARIATES)
        for r in keep:
            w.writerow([r["treat"]] + [r[c] for c in COVARIATES])
    treated = sum(r["treat"] == "1" for r in keep)
    print(f"{len(keep)} rows, {treated} treated -> {out}")


def load_subset(path: pathlib.Path):
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    t = data["treat"].astype(int)
    x = np.column_stack([data[c.replace(".", "")] if c.replace(".", "") in data.dtype.names else data[c]
                         for c in COVARIATES])
    return x, t


def simulate(subset: pathlib.Path, out_dir: pathlib.Path, count: int, seed: int) -> None:
    x_raw, t = load_subset(subset)
    x = x_raw.copy()
    k = len(CONTINUOUS)
    x[:, :k] = (x[:, :k] - x[:, :k].mean(axis=0)) / x[:, :k].std(axis=0)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    header = [f"x{j + 1}" for j in range(x.shape[1])] + ["t", "y", "mu0", "mu1"]
    for r in range(1, count + 1):
        beta = rng.choice([0.0, 0.1, 0.2, 0.3, 0.4], size=x.shape[1], p=[0.6, 0.1, 0.1, 0.1, 0.1])
        mu0 = np.exp((x + 0.5) @ beta)
        lin = x @ beta
        omega = np.mean(lin[t == 1] - mu0[t == 1]) - 4.0
        mu1 = lin - omega
        y0 = mu0 + rng.standard_normal(len(t))
        y1 = mu1 + rng.standard_normal(len(t))
        y = np.where(t == 1, y1, y0)
        path = out_dir / f"ihdp_{r:04d}.csv"
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for i in range(len(t)):
                w.writerow([repr(float(v)) for v in x[i]] + [int(t[i]), repr(float(y[i])),
                                                              repr(float(mu0[i])), repr(float(mu1[i]))])
    print(f"{count} realizations -> {out_dir}")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)
    e = sub.add_parser("extract")
    e.add_argument("raw", type=pathlib.Path)
    e.add_argument("out", type=pathlib.Path)
    s = sub.add_parser("simulate")
    s.add_argument("--subset", type=pathlib.Path, required=True)
    s.add_argument("--out", type=pathlib.Path, required=True)
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    if a.cmd == "extract":
        extract(a.raw, a.out)
    else:
        simulate(a.subset, a.out, a.count, a.seed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
