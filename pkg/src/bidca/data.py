"""LIBSVM parsing, seeded splits and fold plans, result documents.

Random permutations come from a portable generator so that a given seed
produces the same split on every platform and in every implementation:

* seeding: SplitMix64 on the user seed
  (increment 0x9E3779B97F4A7C15, multipliers 0xBF58476D1CE4E5B9 and
  0x94D049BB133111EB, shifts 30, 27, 31);
* stream: xorshift64* (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D);
* shuffle: Fisher-Yates from the last index down, ``j = next() % (i + 1)``.
"""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError

MASK64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* generator seeded through SplitMix64."""

    def __init__(self, seed: int):
        z = (int(seed) + 0x9E3779B97F4A7C15) & MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next() % (i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=int)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    """Labelled sparse rows; ``X`` is an (ell x n) CSR matrix, 1-based on disk."""

    labels: np.ndarray
    X: sp.csr_matrix
    name: str = ""

    def __post_init__(self):
        X = sp.csr_matrix(self.X, dtype=float)
        X.sort_indices()
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        if y.size != X.shape[0]:
            raise DataError("label count differs from row count")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.labels.size

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.size

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.labels[idx], self.X[idx], self.name)

    def rows(self) -> list[tuple[float, dict[int, float]]]:
        out = []
        for i in range(self.size):
            a, b = self.X.indptr[i], self.X.indptr[i + 1]
            out.append((float(self.labels[i]),
                        {int(j) + 1: float(v) for j, v in zip(self.X.indices[a:b], self.X.data[a:b])}))
        return out

    def equals(self, other: "Dataset") -> bool:
        return (self.n == other.n and np.array_equal(self.labels, other.labels)
                and self.rows() == other.rows())


LABEL_SCHEMES = {
    frozenset({-1.0, 1.0}): {-1.0: -1.0, 1.0: 1.0},
    frozenset({0.0, 1.0}): {0.0: -1.0, 1.0: 1.0},
    frozenset({1.0, 2.0}): {1.0: 1.0, 2.0: -1.0},
    frozenset({2.0, 4.0}): {2.0: 1.0, 4.0: -1.0},
}


def map_labels(raw: np.ndarray, override: dict | None = None, numeric: bool = False) -> np.ndarray:
    """Map a binary label set to {-1, +1}; ``numeric`` keeps real labels as is."""
    if numeric:
        return raw.astype(float)
    if override is not None:
        table = {float(k): float(v) for k, v in override.items()}
    else:
        seen = frozenset(np.unique(raw).tolist())
        table = None
        for scheme, mapping in LABEL_SCHEMES.items():
            if seen <= scheme:
                table = mapping
                break
        if table is None:
            raise DataError(f"cannot map label set {sorted(seen)} to -1/+1")
    try:
        out = np.array([table[float(v)] for v in raw])
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]} missing from the label map") from None
    if not set(np.unique(out)) <= {-1.0, 1.0}:
        raise DataError("label map must produce -1/+1")
    return out


def _parse_lines(lines: Iterable[str]):
    labels: list[float] = []
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    nrow = 0
    n = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            lab = float(parts[0])
        except ValueError:
            raise DataError(f"line {lineno}: bad label {parts[0]!r}") from None
        if not math.isfinite(lab):
            raise DataError(f"line {lineno}: non-finite label")
        prev = 0
        for tok in parts[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise DataError(f"line {lineno}: expected index:value, got {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise DataError(f"line {lineno}: malformed pair {tok!r}") from None
            if idx < 1:
                raise DataError(f"line {lineno}: feature index {idx} < 1")
            if idx <= prev:
                raise DataError(f"line {lineno}: non-increasing index {idx} after {prev}")
            if not math.isfinite(val):
                raise DataError(f"line {lineno}: non-finite value")
            prev = idx
            rows.append(nrow)
            cols.append(idx - 1)
            vals.append(val)
            n = max(n, idx)
        labels.append(lab)
        nrow += 1
    return np.array(labels), rows, cols, vals, nrow, n


def parse_libsvm(stream: IO[str] | Iterable[str], name: str = "", label_map: dict | None = None,
                 numeric_labels: bool = False, n_features: int | None = None) -> Dataset:
    """Parse LIBSVM text; labels are mapped to -1/+1 unless ``numeric_labels``."""
    raw, rows, cols, vals, nrow, n = _parse_lines(stream)
    if nrow == 0:
        raise DataError("no samples found")
    if n_features is not None:
        if n_features < n:
            raise DataError(f"feature index {n} exceeds n_features={n_features}")
        n = n_features
    X = sp.csr_matrix((vals, (rows, cols)), shape=(nrow, n))
    return Dataset(map_labels(raw, label_map, numeric_labels), X, name)


def load_libsvm(path: str | Path, **kw) -> Dataset:
    """Read a LIBSVM file; a sidecar ``<file>.labels.json`` overrides the label map."""
    path = Path(path)
    side = path.with_name(path.name + ".labels.json")
    if "label_map" not in kw and side.exists():
        kw["label_map"] = json.loads(side.read_text())
    try:
        with path.open(encoding="utf-8") as fh:
            return parse_libsvm(fh, name=kw.pop("name", path.name), **kw)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def format_value(v: float) -> str:
    """Shortest round-trip decimal form."""
    if float(v).is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def write_libsvm(data: Dataset, fh: IO[str]) -> None:
    for lab, feats in data.rows():
        parts = [format_value(lab)] + [f"{i}:{format_value(v)}" for i, v in feats.items()]
        fh.write(" ".join(parts) + "\n")


# ---------------------------------------------------------------------------
# splits and folds


def split(data: Dataset, seed: int, train_fraction: float = 0.5,
          n_train: int | None = None) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ceil(fraction * ell) rows train."""
    ell = data.size
    if n_train is None:
        if not 0 < train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        n_train = math.ceil(train_fraction * ell)
    if not 0 < n_train < ell:
        raise ValueError(f"split of {ell} rows leaves an empty side")
    perm = XorShift64Star(seed).permutation(ell)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


@dataclass(frozen=True)
class FoldPlan:
    T: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    def val(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == t)

    def trn(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != t)

    @property
    def sizes(self) -> list[int]:
        return [int(np.sum(self.assignment == t)) for t in range(self.T)]


def fold_plan(train: Dataset | int, T: int, seed: int) -> FoldPlan:
    """Seeded shuffle, then contiguous validation blocks (larger blocks first)."""
    ell = train if isinstance(train, int) else train.size
    if not 2 <= T <= ell:
        raise ValueError(f"fold count T={T} out of range for {ell} rows")
    # separate stream from the train/test split that uses the same seed
    perm = XorShift64Star(seed ^ 0x5DEECE66D).permutation(ell)
    base, extra = divmod(ell, T)
    assignment = np.empty(ell, dtype=int)
    start = 0
    for t in range(T):
        size = base + (1 if t < extra else 0)
        assignment[perm[start:start + size]] = t
        start += size
    return FoldPlan(T, assignment, seed)


# ---------------------------------------------------------------------------
# results

RESULT_FIELDS = ("dataset", "method", "epsilon", "tol", "seed", "cv_error", "test_error",
                 "time_sec", "iters", "beta_final", "status")
TIMING_FIELDS = ("time_sec",)


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def record_line(rec: dict) -> str:
    return json.dumps(_clean(rec), sort_keys=True)


def _finite(v) -> bool:
    return v is not None and math.isfinite(float(v))


def aggregate(records: Sequence[dict]) -> dict:
    if not records:
        raise ValueError("no records to aggregate")
    out: dict = {"type": "aggregate", "runs": len(records)}
    done = [r for r in records if _finite(r.get("cv_error"))]
    out["completed"] = len(done)
    out["status_counts"] = {}
    for r in records:
        out["status_counts"][r["status"]] = out["status_counts"].get(r["status"], 0) + 1
    for key in ("cv_error", "test_error", "time_sec", "iters", "beta_final"):
        vals = [float(r[key]) for r in done if _finite(r.get(key))]
        if vals:
            out[f"{key}_mean"] = statistics.fmean(vals)
            out[f"{key}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return out


def write_results(records: Sequence[dict], path: str | Path | None = None,
                  fh: IO[str] | None = None) -> dict:
    """Write one JSON line per run plus an aggregate footer; returns the footer."""
    records = list(records)
    if not records:
        raise ValueError("refusing to write an empty results document")
    for r in records:
        missing = [k for k in RESULT_FIELDS if k not in r]
        if missing:
            raise ValueError(f"record lacks fields {missing}")
    footer = aggregate(records)
    text = "".join(record_line({"type": "run", **r}) + "\n" for r in records)
    text += record_line(footer) + "\n"
    if fh is not None:
        fh.write(text)
    if path is not None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write results to {path}: {exc}") from exc
    return footer


def read_results(path: str | Path) -> tuple[list[dict], dict]:
    runs, footer = [], {}
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("type") == "aggregate":
            footer = rec
        else:
            runs.append(rec)
    return runs, footer
