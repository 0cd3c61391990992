"""Map-quality metrics, transmitter localization and CSV reports."""
from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .simdata import GridMap

WINDOW = 5
REPORT_COLUMNS = (
    "row_type",
    "map_id",
    "scenario",
    "method",
    "setting",
    "n",
    "rmse_paper",
    "rmse_global",
    "nmse",
    "loc_error_px",
    "median_rmse_paper",
    "median_rmse_global",
    "median_nmse",
    "median_loc_error_px",
)
METRICS = ("rmse_paper", "rmse_global", "nmse", "loc_error_px")


def _arrays(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = pred.values if isinstance(pred, GridMap) else np.asarray(pred, dtype=np.float64)
    t = truth.values if isinstance(truth, GridMap) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in size")
    return p, t


def rmse_paper(pred, truth) -> float:
    """Mean over rows of the per-row RMSE."""
    p, t = _arrays(pred, truth)
    return float(np.mean(np.sqrt(np.mean((p - t) ** 2, axis=1))))


def rmse_global(pred, truth) -> float:
    p, t = _arrays(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def nmse(pred, truth) -> float:
    """Squared error over the truth's sum of squared deviations.

    Returns NaN for a constant truth map.
    """
    p, t = _arrays(pred, truth)
    den = float(np.sum((t - t.mean()) ** 2))
    if den == 0:
        return float("nan")
    return float(np.sum((p - t) ** 2) / den)


def locate_source(pred) -> tuple[int, int]:
    """Brightest pixel inside the brightest 5x5 window.

    Ties go to the smallest (row, col), both for the window and the pixel.
    """
    v = pred.values if isinstance(pred, GridMap) else np.asarray(pred, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot locate a source on an empty map")
    h, w = v.shape
    kh, kw = min(WINDOW, h), min(WINDOW, w)
    # direct per-window sums: equal windows give bit-equal sums, unlike a summed-area table
    sums = np.lib.stride_tricks.sliding_window_view(v, (kh, kw)).sum(axis=(2, 3))
    i, j = np.unravel_index(int(np.argmax(sums)), sums.shape)
    window = v[i : i + kh, j : j + kw]
    u, s = np.unravel_index(int(np.argmax(window)), window.shape)
    return int(i + u), int(j + s)


def localization_distance(est: tuple[int, int], truth: tuple[int, int]) -> float:
    return math.hypot(est[0] - truth[0], est[1] - truth[1])


def localization_error(preds: Sequence, truths: Sequence[tuple[int, int]]) -> float:
    """Mean Euclidean distance (pixels = meters) between located and true sources."""
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions but {len(truths)} true positions")
    if not preds:
        raise ValueError("no predictions")
    return sum(localization_distance(locate_source(p), t) for p, t in zip(preds, truths)) / len(preds)


@dataclass
class Record:
    map_id: str
    scenario: int
    method: str
    setting: str
    rmse_paper: float
    rmse_global: float
    nmse: float
    loc_error_px: float | None = None


def evaluate_map(pred, truth, map_id: str, scenario: int, method: str, setting: str, tx=None) -> Record:
    loc = None if tx is None else localization_distance(locate_source(pred), tx)
    return Record(map_id, scenario, method, setting, rmse_paper(pred, truth), rmse_global(pred, truth), nmse(pred, truth), loc)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


@dataclass
class EvalReport:
    records: list[Record] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    nmse_excluded: int = 0

    def add(self, rec: Record) -> None:
        if rec.nmse is not None and math.isnan(rec.nmse):
            self.nmse_excluded += 1
        self.records.append(rec)

    def groups(self) -> dict[tuple[int, str, str], list[Record]]:
        out: dict[tuple[int, str, str], list[Record]] = {}
        for r in self.records:
            out.setdefault((r.scenario, r.method, r.setting), []).append(r)
        return dict(sorted(out.items()))

    def aggregates(self) -> list[dict]:
        """One row per (scenario, method, setting): means plus medians.

        NaN metrics (constant-truth NMSE) are left out of both statistics.
        """
        rows = []
        for (scenario, method, setting), recs in self.groups().items():
            row = {"scenario": scenario, "method": method, "setting": setting, "row_type": "aggregate", "n": len(recs)}
            for m in METRICS:
                vals = [getattr(r, m) for r in recs]
                vals = [v for v in vals if v is not None and not math.isnan(v)]
                row[m] = statistics.fmean(vals) if vals else None
                row["median_" + m] = statistics.median(vals) if vals else None
            rows.append(row)
        return rows

    def mean(self, method: str, setting: str, metric: str = "rmse_global", scenario: int | None = None) -> float:
        for row in self.aggregates():
            if row["method"] == method and row["setting"] == setting:
                if scenario is None or row["scenario"] == scenario:
                    return row[metric]
        raise KeyError(f"no records for method={method!r} setting={setting!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.records:
            w.writerow(
                ["map", r.map_id, r.scenario, r.method, r.setting, 1]
                + [_fmt(getattr(r, m)) for m in METRICS]
                + [""] * len(METRICS)
            )
        for row in self.aggregates():
            w.writerow(
                [row["row_type"], "*", row["scenario"], row["method"], row["setting"], row["n"]]
                + [_fmt(row[m]) for m in METRICS]
                + [_fmt(row["median_" + m]) for m in METRICS]
            )
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    def pivot_csv(self, metrics=("rmse_global", "nmse")) -> str:
        """One row per method, one column pair per setting (e.g. per omega)."""
        settings = sorted({r.setting for r in self.records}, key=_setting_key)
        methods = sorted({r.method for r in self.records})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"{m}@{s}" for s in settings for m in metrics])
        for method in methods:
            row = [method]
            for s in settings:
                for m in metrics:
                    try:
                        row.append(_fmt(self.mean(method, s, m)))
                    except KeyError:
                        row.append("")
            w.writerow(row)
        return buf.getvalue()


def _setting_key(s: str):
    """Sort labels like ``fixed:0.1`` or ``blocks:100~s20`` numerically."""
    base, _, noise = s.partition("~s")
    name, _, arg = base.partition(":")
    out = [name]
    for part in (arg, noise):
        try:
            out.append(float(part))
        except ValueError:
            out.append(0.0)
    return tuple(out)


def read_report(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
