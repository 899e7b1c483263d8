"""Test points, error metrics and percentile aggregation of R^2 records."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, fields

import numpy as np

from agmm.data import Dataset

GROUP_KEYS = ("estimator", "function", "dgp", "gamma", "d", "scheme")
RECORD_FIELDS = ("estimator", "function", "dgp", "gamma", "d", "scheme", "seed", "mse", "r2")
DEFAULT_PROBS = (0.05, 0.10, 0.50, 0.90, 0.95)


@dataclass(frozen=True)
class TestPoints:
    __test__ = False  # not a pytest class

    scheme: str
    points: np.ndarray

    @property
    def count(self) -> int:
        return self.points.size


def grid_points(train_w, count: int = 100, lo_pct: float = 10, hi_pct: float = 90) -> TestPoints:
    lo, hi = np.percentile(np.asarray(train_w), [lo_pct, hi_pct])
    return TestPoints("grid", np.linspace(lo, hi, count))


def marginal_points(fresh: Dataset) -> TestPoints:
    """Treatments of an independent replicate of the data-generating process."""
    return TestPoints("marginal", np.asarray(fresh.w, dtype=np.float64).copy())


def _predict(est, w) -> np.ndarray:
    if hasattr(est, "predict"):
        return np.asarray(est.predict(w))
    return np.asarray(est(w))


def mse(est, truth, pts: TestPoints) -> float:
    if pts.count == 0:
        raise ValueError("no test points")
    err = np.asarray(truth(pts.points)) - _predict(est, pts.points)
    return float(np.mean(err**2))


def r_squared(est, truth, pts: TestPoints) -> float:
    h0 = np.asarray(truth(pts.points), dtype=np.float64)
    var = float(np.mean((h0 - h0.mean()) ** 2))
    if var <= 0.0:
        raise ValueError("R^2 undefined: true function is constant on the test points")
    return 1.0 - mse(est, truth, pts) / var


@dataclass(frozen=True)
class R2Record:
    estimator: str
    function: str
    dgp: int
    gamma: float
    d: int
    scheme: str
    seed: int
    mse: float
    r2: float

    def row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{v:.17g}" if isinstance(v, float) else str(v))
        return out


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for rec in records:
            writer.writerow(rec.row())


def read_records(path) -> list[R2Record]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                R2Record(
                    row["estimator"], row["function"], int(row["dgp"]), float(row["gamma"]),
                    int(row["d"]), row["scheme"], int(row["seed"]), float(row["mse"]),
                    float(row["r2"]),
                )
            )
    return out


def _pname(p: float) -> str:
    return f"p{round(p * 100):02d}"


def percentile_summary(records, probs=DEFAULT_PROBS, keys=GROUP_KEYS) -> list[dict]:
    """Quantiles of r2 per group (linear interpolation between order statistics).

    Rows come back sorted by group key so the output does not depend on the
    order of ``records``.
    """
    groups = defaultdict(list)
    for rec in records:
        groups[tuple(getattr(rec, k) for k in keys)].append(rec.r2)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        vals = np.sort(np.asarray(groups[key]))
        q = np.quantile(vals, probs, method="linear")
        row = dict(zip(keys, key))
        row["count"] = vals.size
        row.update({_pname(p): float(v) for p, v in zip(probs, q)})
        rows.append(row)
    return rows


def write_summary(rows, path) -> None:
    if not rows:
        open(path, "w").close()
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})


def format_table(rows, estimators, functions, lo: str = "p05", hi: str = "p95") -> str:
    """Plain-text table: one row per function, one column per estimator,
    cells ``median (lo, hi)``."""
    cell = {(r["function"], r["estimator"]): r for r in rows}
    header = ["function"] + list(estimators)
    lines = [" | ".join(header)]
    for fn in functions:
        parts = [fn]
        for est in estimators:
            r = cell.get((fn, est))
            parts.append("-" if r is None else f"{r['p50']:.2f} ({r[lo]:.2f}, {r[hi]:.2f})")
        lines.append(" | ".join(parts))
    return "\n".join(lines)


def record_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
