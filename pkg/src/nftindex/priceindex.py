"""Chained hedonic price index and series analytics.

The index level at a fitted period is ``base_value * exp(gamma_t - gamma_0)``
(the closed form of chaining the per-period ratios).  Periods inside the
fitted range with no trades carry the previous level forward and are flagged
as gaps; their returns are zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._util import atomic_write_text, parse_iso_date
from .errors import ValidationError
from .hedonic import HedonicParams
from .market import PeriodGrid


@dataclass(frozen=True)
class IndexSeries:
    """Dated index levels over a contiguous period range."""

    base_value: float
    levels: dict[int, float]
    gaps: frozenset[int]
    grid: PeriodGrid | None = None

    def __post_init__(self):
        if not self.levels:
            raise ValidationError("index series needs at least one level")
        if not (self.base_value > 0):
            raise ValidationError("base value must be > 0")

    @property
    def periods(self) -> tuple[int, ...]:
        return tuple(sorted(self.levels))

    def as_array(self) -> np.ndarray:
        return np.array([self.levels[p] for p in self.periods])


@dataclass(frozen=True)
class ReturnSeries:
    values: dict[int, float]
    gaps: frozenset[int]
    kind: str = "arithmetic"


def build_index(params: HedonicParams, base_value: float = 100.0) -> IndexSeries:
    """Index levels from fitted time coefficients; gap periods carried forward."""
    if not (base_value > 0):
        raise ValidationError("base value must be > 0")
    if not params.gamma:
        raise ValidationError("no fitted periods")
    fitted = sorted(params.gamma)
    first, last = fitted[0], fitted[-1]
    gamma0 = params.gamma[first]
    levels: dict[int, float] = {}
    gaps = set()
    for p in range(first, last + 1):
        if p in params.gamma:
            levels[p] = base_value * math.exp(params.gamma[p] - gamma0)
        else:
            levels[p] = levels[p - 1]
            gaps.add(p)
    return IndexSeries(base_value=base_value, levels=levels, gaps=frozenset(gaps), grid=params.grid)


def returns(index: IndexSeries) -> ReturnSeries:
    """Arithmetic per-period returns; zero on gap periods."""
    periods = index.periods
    if len(periods) < 2:
        raise ValidationError("need at least two levels to compute returns")
    values = {}
    for prev, cur in zip(periods, periods[1:]):
        values[cur] = 0.0 if cur in index.gaps else index.levels[cur] / index.levels[prev] - 1.0
    return ReturnSeries(values=values, gaps=index.gaps)


def moving_average(series: Mapping, window: int = 7) -> dict:
    """Trailing mean over up to `window` points; shorter at the head."""
    if window < 1:
        raise ValidationError("window must be >= 1")
    if not series:
        raise ValidationError("empty series")
    keys = sorted(series)
    vals = [float(series[k]) for k in keys]
    out = {}
    acc = 0.0
    for i, k in enumerate(keys):
        acc += vals[i]
        if i >= window:
            acc -= vals[i - window]
        out[k] = acc / min(window, i + 1)
    return out


def realized_return(series: Mapping, start, end) -> float:
    """value[end] / value[start] - 1."""
    if start not in series or end not in series:
        raise ValidationError(f"missing endpoint: {start!r} or {end!r}")
    if not start < end:
        raise ValidationError("start must precede end")
    return float(series[end]) / float(series[start]) - 1.0


def daily_returns(series: Mapping) -> dict:
    """Arithmetic returns between consecutive observations, keyed by the later one."""
    keys = sorted(series)
    if len(keys) < 2:
        raise ValidationError("need at least two observations")
    return {
        cur: float(series[cur]) / float(series[prev]) - 1.0
        for prev, cur in zip(keys, keys[1:])
    }


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    values: tuple[tuple[float | None, ...], ...]  # None marks undefined entries

    def entry(self, a: str, b: str) -> float | None:
        i, j = self.names.index(a), self.names.index(b)
        return self.values[i][j]

    def to_json_dict(self) -> dict:
        return {"names": list(self.names), "matrix": [list(row) for row in self.values]}


def correlation_matrix(series_set: Mapping[str, Mapping]) -> CorrelationMatrix:
    """Pairwise-complete Pearson correlations of named series.

    A pair whose overlap has a zero-variance side gets an explicit None, not 0.
    """
    names = tuple(sorted(series_set))
    if len(names) < 2:
        raise ValidationError("need at least two series")
    data = {n: dict(series_set[n]) for n in names}
    matrix = [[None] * len(names) for _ in names]
    for i, a in enumerate(names):
        matrix[i][i] = 1.0
        for j in range(i + 1, len(names)):
            b = names[j]
            common = sorted(set(data[a]) & set(data[b]))
            if len(common) < 3:
                raise ValidationError(
                    f"series {a!r} and {b!r} overlap on {len(common)} < 3 points"
                )
            xa = np.array([data[a][k] for k in common], dtype=float)
            xb = np.array([data[b][k] for k in common], dtype=float)
            xa -= xa.mean()
            xb -= xb.mean()
            denom = math.sqrt(float(xa @ xa) * float(xb @ xb))
            if denom == 0.0:
                rho = None
            else:
                rho = float(xa @ xb) / denom
            matrix[i][j] = matrix[j][i] = rho
    return CorrelationMatrix(names=names, values=tuple(tuple(row) for row in matrix))


# ---------------------------------------------------------------------------
# CSV interfaces

INDEX_CSV_HEADER = ["date", "level", "level_ma7", "return", "gap_flag"]


def write_index_csv(index: IndexSeries, path, ma_window: int = 7) -> None:
    """date, level, level_ma7, return, gap_flag; dates need a period grid."""
    periods = index.periods
    ma = moving_average(index.levels, ma_window)
    rets = returns(index).values if len(periods) >= 2 else {}
    lines = [",".join(INDEX_CSV_HEADER)]
    for p in periods:
        day = index.grid.date_of(p).isoformat() if index.grid is not None else str(p)
        ret = repr(rets[p]) if p in rets else ""
        lines.append(
            f"{day},{index.levels[p]!r},{ma[p]!r},{ret},{1 if p in index.gaps else 0}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_index_csv(path) -> IndexSeries:
    """Read back an index CSV written by `write_index_csv`."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "level" not in reader.fieldnames:
            raise ValidationError(f"{path}: not an index CSV (no 'level' column)")
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: empty index CSV")
    levels = {}
    gaps = set()
    try:
        grid_mode = "-" in rows[0]["date"]
        if grid_mode:
            dates = [parse_iso_date(r["date"]) for r in rows]
            epoch = min(dates)
            grid = PeriodGrid(epoch=epoch, horizon=max(1, (max(dates) - epoch).days))
            period_keys = [(d - epoch).days for d in dates]
        else:
            grid = None
            period_keys = [int(r["date"]) for r in rows]
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad date column: {exc}") from exc
    for key, row in zip(period_keys, rows):
        try:
            levels[key] = float(row["level"])
        except ValueError as exc:
            raise ValidationError(f"{path}: bad level {row['level']!r}") from exc
        if row.get("gap_flag") == "1":
            gaps.add(key)
    first = min(levels)
    return IndexSeries(
        base_value=levels[first], levels=levels, gaps=frozenset(gaps), grid=grid
    )


def load_close_series_csv(path) -> dict:
    """External market series: (date, close) rows keyed by ISO date."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "close" not in reader.fieldnames or "date" not in reader.fieldnames:
            raise ValidationError(f"{path}: expected 'date' and 'close' columns")
        out = {}
        for row in reader:
            day = parse_iso_date(row["date"])
            try:
                close = float(row["close"])
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: bad close {row['close']!r}") from exc
            if close <= 0:
                raise ValidationError(f"{path}: close must be > 0, got {close}")
            out[day] = close
    if not out:
        raise ValidationError(f"{path}: no data rows")
    return out
