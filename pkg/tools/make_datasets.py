"""Build the LIBSVM-format datasets under ``data/`` from locally available sources.

Sources:
  * ``keel_ds`` package (raw KEEL copies of pima, wisconsin, australian).
  * scikit-learn's OpenML test fixture ``id_292`` which holds the first 85 rows
    of ``australian_scale`` exactly as distributed on the LIBSVM site.

Every feature is min-max scaled to [-1, 1] the way ``svm-scale`` does it, and
zero entries are omitted from the output.

Usage: python3 tools/make_datasets.py [--out data]
"""
from __future__ import annotations

import argparse
import gzip
from collections import Counter
from pathlib import Path

import numpy as np

FIXTURE = "datasets/tests/data/openml/id_292/data-v1-dl-49822.arff.gz"
# Raw ranges of the three australian columns whose decimal points were lost
# in the KEEL copy (age, debt, years employed).
AUS_RANGES = {1: (13.75, 80.25), 2: (0.0, 28.0), 6: (0.0, 28.5)}


def keel_rows(name: str) -> list[list[str]]:
    import keel_ds

    path = Path(keel_ds.__file__).parent / "data" / "balanced" / "raw" / f"{name}.dat"
    lines = path.read_text().splitlines()
    return [ln.split(",") for ln in lines if ln.strip() and not ln.startswith("@")]


def australian_truth() -> list[tuple[float, np.ndarray]]:
    import sklearn

    path = Path(sklearn.__file__).parent / FIXTURE
    out = []
    for ln in gzip.open(path, "rt").read().splitlines():
        if not ln.startswith("{"):
            continue
        feats = np.zeros(14)
        label = 0.0
        for item in ln.strip("{}").split(","):
            k, v = item.split()
            if int(k) == 0:
                label = float(v)
            else:
                feats[int(k) - 1] = float(v)
        out.append((label, feats))
    return out


def unscale(s: float, lo: float, hi: float) -> float:
    return lo + (s + 1.0) * (hi - lo) / 2.0


def repair_australian(rows: list[list[str]]) -> np.ndarray:
    """Restore decimal points using the exact rows to pick the most common shift."""
    raw = np.array([[float(v) for v in r[:14]] for r in rows])
    truth = australian_truth()
    fixed = raw.copy()
    for col, (lo, hi) in AUS_RANGES.items():
        votes: dict[int, Counter] = {}
        for i, (_, feats) in enumerate(truth):
            digits = raw[i, col]
            true = unscale(feats[col], lo, hi)
            ndig = len(str(int(digits)))
            k = min(range(4), key=lambda k: abs(digits / 10**k - true))
            votes.setdefault(ndig, Counter())[k] += 1
            fixed[i, col] = round(true, 4)
        for i in range(len(truth), len(rows)):
            digits = raw[i, col]
            ndig = len(str(int(digits)))
            order = [k for k, _ in votes.get(ndig, Counter({3: 1})).most_common()]
            order += [k for k in range(5) if k not in order]
            for k in order:
                if lo <= digits / 10**k <= hi:
                    fixed[i, col] = digits / 10**k
                    break
    return fixed


def scale(X: np.ndarray, lo: np.ndarray | None = None, hi: np.ndarray | None = None) -> np.ndarray:
    lo = X.min(axis=0) if lo is None else lo
    hi = X.max(axis=0) if hi is None else hi
    span = np.where(hi > lo, hi - lo, 1.0)
    S = -1.0 + 2.0 * (X - lo) / span
    S[:, hi <= lo] = 0.0
    return S


def write_libsvm(path: Path, labels, S: np.ndarray) -> None:
    with path.open("w") as fh:
        for lab, row in zip(labels, S):
            parts = [f"{j + 1}:{v:.7g}" for j, v in enumerate(row) if abs(v) > 0.0]
            fh.write(" ".join([f"{lab:+d}" if abs(lab) == 1 else str(lab)] + parts) + "\n")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    out = Path(ap.parse_args().out)
    out.mkdir(parents=True, exist_ok=True)

    pima = keel_rows("pima")
    X = np.array([[float(v) for v in r[:8]] for r in pima])
    y = [1 if r[8].strip() == "tested_positive" else -1 for r in pima]
    write_libsvm(out / "diabetes_scale", y, scale(X))

    wis = keel_rows("wisconsin")
    X = np.array([[float(v) for v in r[:9]] for r in wis])
    y = [int(float(r[9])) for r in wis]
    write_libsvm(out / "breast-cancer_scale", y, scale(X))

    aus = keel_rows("australian")
    X = repair_australian(aus)
    lo, hi = X.min(axis=0), X.max(axis=0)
    for col, (a, b) in AUS_RANGES.items():
        lo[col], hi[col] = a, b
    X = np.clip(X, lo, hi)
    y = [1 if int(float(r[14])) == 1 else -1 for r in aus]
    S = scale(X, lo, hi)
    truth = australian_truth()
    err = max(np.abs(S[i] - f).max() for i, (_, f) in enumerate(truth))
    lab_ok = all(y[i] == int(t) for i, (t, _) in enumerate(truth))
    print(f"australian: max deviation from reference rows {err:.2e}, labels match {lab_ok}")
    write_libsvm(out / "australian_scale", y, S)


if __name__ == "__main__":
    main()
