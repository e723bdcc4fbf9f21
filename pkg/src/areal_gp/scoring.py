"""Point and distributional forecast scores."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

SCORE_COLUMNS = ("region_id", "time", "partition", "observed", "mean", "median", "q025", "q975",
                 "crps", "abs_error", "sq_error", "covered")
SUMMARY_COLUMNS = ("region_id", "partition", "n", "rmse", "mae", "crps", "ecp")
ECP_COLUMNS = ("region_id", "train", "test")
OVERALL = "ALL"


def crps_sample(samples, y: float) -> float:
    """Plug-in CRPS of an ensemble against one observation.

    ``mean|x_j - y| - (1 / 2m^2) sum_jk |x_j - x_k|``, with the double sum
    evaluated in ``O(m log m)`` from the order statistics:
    ``sum_jk |x_j - x_k| = 2 sum_j (2j - m - 1) x_(j)``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    m = x.size
    if m == 0:
        raise ValidationError("crps_sample needs at least one sample")
    xs = np.sort(x)
    w = 2.0 * np.arange(1, m + 1) - m - 1.0
    spread = math.fsum(w * xs) / (m * m)
    return math.fsum(np.abs(xs - y)) / m - spread


def crps_ensemble(samples, y, axis: int = 0) -> np.ndarray:
    """Vectorized :func:`crps_sample` over cells; ``samples`` has draws along ``axis``."""
    x = np.moveaxis(np.asarray(samples, dtype=float), axis, 0)
    y = np.asarray(y, dtype=float)
    m = x.shape[0]
    if m == 0:
        raise ValidationError("crps_ensemble needs at least one sample")
    xs = np.sort(x, axis=0)
    w = (2.0 * np.arange(1, m + 1) - m - 1.0).reshape((m,) + (1,) * (x.ndim - 1))
    return np.mean(np.abs(xs - y), axis=0) - np.sum(w * xs, axis=0) / (m * m)


def point_errors(forecast, observed):
    """``(rmse, mae)`` of point forecasts against observations, NaN-skipping."""
    e = np.asarray(forecast, dtype=float) - np.asarray(observed, dtype=float)
    e = e[~np.isnan(e)]
    if e.size == 0:
        raise ValidationError("no observed cells to score")
    return math.sqrt(float(np.mean(e * e))), float(np.mean(np.abs(e)))


def ecp(lo, hi, y) -> float:
    """Fraction of observed cells with ``lo <= y <= hi``."""
    lo, hi, y = (np.asarray(a, dtype=float) for a in (lo, hi, y))
    if np.any(lo > hi):
        raise ValidationError("interval lower bound exceeds upper bound")
    ok = ~np.isnan(y)
    if not np.any(ok):
        raise ValidationError("no observed cells to score")
    return float(np.mean((lo[ok] <= y[ok]) & (y[ok] <= hi[ok])))


@dataclass
class ScoreReport:
    """Per-cell scores plus per-region and overall aggregates."""

    cells: list
    summary: list

    def ecp_table(self) -> list:
        """One row per region with training and test ECP, averaged over that region's cells."""
        by = {(r["region_id"], r["partition"]): r["ecp"] for r in self.summary}
        regions = [r["region_id"] for r in self.summary if r["partition"] == "train" and r["region_id"] != OVERALL]
        rows = [{"region_id": rid, "train": by.get((rid, "train"), math.nan),
                 "test": by.get((rid, "test"), math.nan)} for rid in regions]
        rows.append({"region_id": OVERALL,
                     "train": _nanmean([r["train"] for r in rows]),
                     "test": _nanmean([r["test"] for r in rows])})
        return rows

    def lookup(self, region_id: str, partition: str) -> dict:
        for r in self.summary:
            if r["region_id"] == region_id and r["partition"] == partition:
                return r
        raise KeyError((region_id, partition))


def _nanmean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else math.nan


def score_forecast(samples, observed, region_ids, times, split_time: int) -> ScoreReport:
    """Score predictive samples ``(n_draws, I, n_times)`` against observations ``(I, n_times)``.

    Times ``<= split_time`` form the training partition, later ones the test
    partition. NaN observations are skipped. The point forecast is the
    predictive mean; the interval is the central 95% type-7 interval.
    """
    x = np.asarray(samples, dtype=float)
    y = np.asarray(observed, dtype=float)
    times = np.asarray(times)
    if x.ndim != 3 or x.shape[1:] != y.shape:
        raise ValidationError(f"samples shape {x.shape} does not match observations {y.shape}")
    if len(region_ids) != y.shape[0] or len(times) != y.shape[1]:
        raise ValidationError("region ids or times do not match the observation grid")
    good = ~np.any(np.isnan(x), axis=(1, 2))
    x = x[good]
    if x.shape[0] == 0:
        raise ValidationError("no usable predictive draws")
    mean = x.mean(axis=0)
    q025, median, q975 = np.quantile(x, (0.025, 0.5, 0.975), axis=0, method="linear")
    crps = crps_ensemble(x, np.nan_to_num(y), axis=0)
    cells = []
    for i, rid in enumerate(region_ids):
        for k, t in enumerate(times):
            if np.isnan(y[i, k]):
                continue
            err = mean[i, k] - y[i, k]
            cells.append({
                "region_id": rid, "time": int(t), "partition": "train" if t <= split_time else "test",
                "observed": float(y[i, k]), "mean": float(mean[i, k]), "median": float(median[i, k]),
                "q025": float(q025[i, k]), "q975": float(q975[i, k]), "crps": float(crps[i, k]),
                "abs_error": float(abs(err)), "sq_error": float(err * err),
                "covered": int(q025[i, k] <= y[i, k] <= q975[i, k]),
            })
    return ScoreReport(cells, summarize_cells(cells, list(region_ids)))


def summarize_cells(cells, region_ids) -> list:
    """Aggregate per-cell rows by (region, partition) and overall per partition."""
    out = []
    for partition in ("train", "test"):
        part = [c for c in cells if c["partition"] == partition]
        for rid in list(region_ids) + [OVERALL]:
            sel = part if rid == OVERALL else [c for c in part if c["region_id"] == rid]
            if not sel:
                out.append({"region_id": rid, "partition": partition, "n": 0, "rmse": math.nan,
                            "mae": math.nan, "crps": math.nan, "ecp": math.nan})
                continue
            n = len(sel)
            out.append({
                "region_id": rid, "partition": partition, "n": n,
                "rmse": math.sqrt(math.fsum(c["sq_error"] for c in sel) / n),
                "mae": math.fsum(c["abs_error"] for c in sel) / n,
                "crps": math.fsum(c["crps"] for c in sel) / n,
                "ecp": sum(c["covered"] for c in sel) / n,
            })
    return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_scores(directory, report: ScoreReport):
    """Write ``scores.csv``, ``scores_summary.csv`` and ``ecp_table.csv``."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write(d / "scores.csv", SCORE_COLUMNS, report.cells)
    _write(d / "scores_summary.csv", SUMMARY_COLUMNS, report.summary)
    _write(d / "ecp_table.csv", ECP_COLUMNS, report.ecp_table())


def read_scores(directory) -> ScoreReport:
    from pathlib import Path

    d = Path(directory)
    ints = {"time", "covered", "n"}
    strs = {"region_id", "partition"}

    def load(name, columns):
        with open(d / name, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != columns:
                raise ValidationError(f"{d / name}: expected columns {columns}")
            return [{k: (v if k in strs else int(v) if k in ints else float(v)) for k, v in r.items()}
                    for r in reader]

    return ScoreReport(load("scores.csv", SCORE_COLUMNS), load("scores_summary.csv", SUMMARY_COLUMNS))
