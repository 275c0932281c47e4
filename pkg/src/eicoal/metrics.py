"""Frequentist summaries of posterior reproduction-number curves.

All functions take the posterior as a matrix of draws (one row per draw,
one column per output-grid time) together with that grid, or any object
exposing ``output_grid`` and ``R_u`` attributes.  Truth values are matched
to the posterior grid by carrying the last grid value forward.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

QUANTILE_METHOD = "averaged_inverted_cdf"


class MetricsUsageError(ValueError):
    pass


@dataclass(frozen=True)
class TruthGrid:
    """True values on a forward-time grid (days since the tree root)."""

    times: np.ndarray
    R: np.ndarray
    E: Optional[np.ndarray] = None
    I: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if times.ndim != 1 or times.shape != R.shape:
            raise MetricsUsageError("truth times and values must be 1-d arrays of equal length")
        if np.any(np.diff(times) <= 0):
            raise MetricsUsageError("truth times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(R))):
            raise MetricsUsageError("truth values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "R", R)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = ["time", "R"] + (["E"] if self.E is not None else []) + (["I"] if self.I is not None else [])
        writer.writerow(cols)
        for j in range(len(self.times)):
            row = [repr(float(self.times[j])), repr(float(self.R[j]))]
            if self.E is not None:
                row.append(repr(float(self.E[j])))
            if self.I is not None:
                row.append(repr(float(self.I[j])))
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TruthGrid":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise MetricsUsageError("empty truth file")
        get = lambda key: np.array([float(r[key]) for r in rows]) if key in rows[0] else None  # noqa: E731
        return cls(get("time"), get("R"), get("E"), get("I"))


def _unpack(samples, grid=None):
    if grid is None:
        grid, draws = samples.output_grid, samples.R_u
    else:
        draws = samples
    grid = np.asarray(grid, dtype=float)
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[1] != grid.shape[0]:
        raise MetricsUsageError("draws must have one column per grid time")
    if draws.shape[0] == 0 or grid.shape[0] == 0:
        raise MetricsUsageError("empty posterior")
    return grid, draws


def _aligned(samples, truth: TruthGrid, grid=None):
    grid, draws = _unpack(samples, grid)
    if len(truth.times) == 0:
        raise MetricsUsageError("empty truth grid")
    idx = np.searchsorted(grid, truth.times + 1e-9, side="right") - 1
    if np.any(idx < 0):
        raise MetricsUsageError("posterior grid does not cover the start of the truth grid")
    return draws[:, idx]


def credible_bounds(draws: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < level <= 1.0:
        raise MetricsUsageError("level must be in (0, 1]")
    tail = (1.0 - level) / 2.0
    lo = np.quantile(draws, tail, axis=0, method=QUANTILE_METHOD)
    hi = np.quantile(draws, 1.0 - tail, axis=0, method=QUANTILE_METHOD)
    return lo, hi


def envelope(samples, truth: TruthGrid, level: float = 0.95, grid=None) -> float:
    """Share of truth-grid times whose equal-tailed interval contains the truth."""
    draws = _aligned(samples, truth, grid)
    lo, hi = credible_bounds(draws, level)
    return float(np.mean((lo <= truth.R) & (truth.R <= hi)))


def abs_deviation(samples, truth: TruthGrid, grid=None) -> float:
    """Mean absolute difference between posterior median and truth."""
    draws = _aligned(samples, truth, grid)
    med = np.quantile(draws, 0.5, axis=0, method=QUANTILE_METHOD)
    return float(np.mean(np.abs(med - truth.R)))


def mciw(samples, truth: TruthGrid, level: float = 0.95, grid=None) -> float:
    """Mean width of the equal-tailed credible interval over the truth grid."""
    draws = _aligned(samples, truth, grid)
    lo, hi = credible_bounds(draws, level)
    return float(np.mean(hi - lo))


SUMMARY_LEVELS = (0.5, 0.8, 0.95)


def posterior_summary(samples, output_grid, grid=None, levels=SUMMARY_LEVELS) -> dict:
    """Median and equal-tailed interval bounds at each output time.

    Returns a dict of arrays with keys ``time``, ``median`` and
    ``lower_XX`` / ``upper_XX`` for each level.
    """
    src_grid, draws = _unpack(samples, grid)
    output_grid = np.asarray(output_grid, dtype=float)
    idx = np.searchsorted(src_grid, output_grid + 1e-9, side="right") - 1
    if np.any(idx < 0):
        raise MetricsUsageError("output grid starts before the posterior grid")
    sub = draws[:, idx]
    out = {"time": output_grid, "median": np.quantile(sub, 0.5, axis=0, method=QUANTILE_METHOD)}
    for level in levels:
        lo, hi = credible_bounds(sub, level)
        tag = f"{int(round(level * 100))}"
        out[f"lower_{tag}"] = lo
        out[f"upper_{tag}"] = hi
    return out


def table_to_csv(table: dict) -> str:
    keys = list(table)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(keys)
    n = len(np.atleast_1d(table[keys[0]]))
    for j in range(n):
        row = []
        for key in keys:
            val = np.atleast_1d(table[key])[j]
            row.append(val if isinstance(val, str) else repr(float(val)))
        writer.writerow(row)
    return buf.getvalue()


METRIC_COLUMNS = ("ENV", "AD", "MCIW")


def metrics_row(samples, truth: TruthGrid, grid=None) -> dict:
    return {
        "ENV": envelope(samples, truth, grid=grid),
        "AD": abs_deviation(samples, truth, grid=grid),
        "MCIW": mciw(samples, truth, grid=grid),
    }


def summarize_rows(rows: list[dict]) -> dict:
    """Median and 2.5%/97.5% quantiles of each metric across simulations."""
    if not rows:
        raise MetricsUsageError("no metric rows to summarize")
    out = {"n": len(rows)}
    for col in METRIC_COLUMNS:
        vals = np.array([r[col] for r in rows], dtype=float)
        out[col] = float(np.quantile(vals, 0.5, method=QUANTILE_METHOD))
        out[f"{col}_lower"] = float(np.quantile(vals, 0.025, method=QUANTILE_METHOD))
        out[f"{col}_upper"] = float(np.quantile(vals, 0.975, method=QUANTILE_METHOD))
    return out
