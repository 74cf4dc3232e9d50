"""Explosive-root testing on index levels: ADF regressions, backward-sup
statistics, Monte-Carlo critical values and bubble date-stamping.

Conventions, pinned here once:

* ``adf_statistic`` fits ``dy(t) = mu + nu*y(t-1) + sum_i psi_i dy(t-i)`` on a
  window and returns the t-ratio of ``nu`` with the classical OLS standard
  error (residual variance over n - p).
* ``bsadf(t)`` is the supremum of ADF statistics over all windows *ending* at
  t with at least ``w + 1`` observations.
* Critical-value curves are simulated quantiles of the *forward* statistic
  ``sup over e in [w, t] of ADF on [0, e]`` under a driftless-in-the-limit
  random walk null.  The tested statistic and the null statistic therefore sup
  over different window families; both are implemented exactly as defined.
* Windows that a regression cannot distinguish from an exact fit (zero
  residual or regressor variance) are degenerate: fatal for a direct
  ``adf_statistic`` call, skipped and counted inside sups.
"""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from ._util import canonical_json, read_json, write_json
from .errors import DegenerateRegressionError, ValidationError
from .market import PeriodGrid
from .priceindex import IndexSeries, moving_average

# relative tolerance deciding that a variance is numerically zero
_DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class AdfConfig:
    """Lag order of the unit-root regression; the intercept is always present."""

    lag_order: int = 0
    include_intercept: bool = True

    def __post_init__(self):
        if self.lag_order < 0:
            raise ValidationError("lag_order must be >= 0")
        if not self.include_intercept:
            raise ValidationError("the regression always includes an intercept")


@dataclass(frozen=True)
class NullParams:
    """Random-walk null: step = drift * (T+1)^(-eta) + sigma * N(0,1), y(0) = 0."""

    eta: float = 1.0
    sigma: float = 1.0
    drift: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValidationError("null sigma must be > 0")


@dataclass(frozen=True)
class BsadfConfig:
    min_window: int = 40
    min_duration: int = 5
    confidence: float = 0.99
    n_mc: int = 5000
    seed: int = 20210601
    null_params: NullParams = field(default_factory=NullParams)

    def __post_init__(self):
        if self.min_window < 3:
            raise ValidationError("min_window must be >= lag_order + 3")
        if self.min_duration < 1:
            raise ValidationError("min_duration must be >= 1")
        if not (0 < self.confidence < 1):
            raise ValidationError("confidence must be in (0, 1)")
        if self.n_mc < 100:
            raise ValidationError("n_mc must be >= 100")
        if not (0 <= self.seed < 2**64):
            raise ValidationError("seed must fit in 64 bits")

    def to_json_dict(self) -> dict:
        return {
            "min_window": self.min_window,
            "min_duration": self.min_duration,
            "confidence": self.confidence,
            "n_mc": self.n_mc,
            "seed": self.seed,
            "null_params": {
                "eta": self.null_params.eta,
                "sigma": self.null_params.sigma,
                "drift": self.null_params.drift,
            },
        }


# ---------------------------------------------------------------------------
# ADF statistic


@njit(cache=True)
def _adf_stat_k0(y, t1, t2):  # pragma: no cover - exercised via wrappers
    """t-ratio of nu on window y[t1..t2], no lagged differences.

    Returns (stat, code): code 0 ok, 1 zero regressor variance, 2 zero
    residual variance or no residual degrees of freedom.
    """
    n = t2 - t1
    sx = 0.0
    sd = 0.0
    for t in range(t1 + 1, t2 + 1):
        sx += y[t - 1]
        sd += y[t] - y[t - 1]
    mx = sx / n
    md = sd / n
    sxx = 0.0
    sxy = 0.0
    syy = 0.0
    xscale = 0.0
    dscale = 0.0
    for t in range(t1 + 1, t2 + 1):
        xc = y[t - 1] - mx
        dc = (y[t] - y[t - 1]) - md
        sxx += xc * xc
        sxy += xc * dc
        syy += dc * dc
        if abs(y[t - 1]) > xscale:
            xscale = abs(y[t - 1])
        if abs(y[t] - y[t - 1]) > dscale:
            dscale = abs(y[t] - y[t - 1])
    if sxx <= n * (_DEGENERATE_RTOL * (1.0 + xscale)) ** 2:
        return 0.0, 1
    nu = sxy / sxx
    rss = syy - nu * sxy
    dof = n - 2
    if dof <= 0 or rss <= dof * (_DEGENERATE_RTOL * (1.0 + dscale)) ** 2:
        return 0.0, 2
    return nu / math.sqrt(rss / dof / sxx), 0


def _adf_stat_general(y: np.ndarray, t1: int, t2: int, k: int) -> tuple[float, int]:
    """Same contract as the k=0 kernel, arbitrary lag order, plain numpy OLS."""
    n = t2 - t1 - k
    p = k + 2
    if n - p <= 0:
        return 0.0, 2
    dy = np.diff(y[t1 : t2 + 1])
    rows = np.arange(k, len(dy))
    X = np.empty((n, p))
    X[:, 0] = 1.0
    X[:, 1] = y[t1 + k : t2]
    for i in range(1, k + 1):
        X[:, 1 + i] = dy[rows - i]
    target = dy[rows]
    gram = X.T @ X
    eigs = np.linalg.eigvalsh(gram)
    if eigs[0] <= eigs[-1] * p * np.finfo(float).eps:
        return 0.0, 1
    beta = np.linalg.solve(gram, X.T @ target)
    resid = target - X @ beta
    rss = float(resid @ resid)
    dscale = float(np.max(np.abs(target))) if n else 0.0
    if rss <= (n - p) * (_DEGENERATE_RTOL * (1.0 + dscale)) ** 2:
        return 0.0, 2
    se = math.sqrt(rss / (n - p) * np.linalg.inv(gram)[1, 1])
    return float(beta[1] / se), 0


_DEGENERATE_MESSAGES = {
    1: "degenerate regression: zero regressor variance (constant level)",
    2: "degenerate regression: zero residual variance",
}


def adf_statistic(y: Sequence[float], window: tuple[int, int],
                  config: AdfConfig = AdfConfig()) -> float:
    """Right-tailed ADF t-statistic on the inclusive window ``y[t1..t2]``."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    t1, t2 = int(window[0]), int(window[1])
    if not (0 <= t1 < t2 < len(y)):
        raise ValidationError(f"window ({t1}, {t2}) out of range for series of length {len(y)}")
    if t2 - t1 + 1 < config.lag_order + 3:
        raise ValidationError(
            f"window has {t2 - t1 + 1} observations, need >= lag_order + 3 = {config.lag_order + 3}"
        )
    if not np.all(np.isfinite(y[t1 : t2 + 1])):
        raise ValidationError("series contains non-finite values in the window")
    if config.lag_order == 0:
        stat, code = _adf_stat_k0(y, t1, t2)
    else:
        stat, code = _adf_stat_general(y, t1, t2, config.lag_order)
    if code != 0:
        raise DegenerateRegressionError(f"{_DEGENERATE_MESSAGES[code]} on window ({t1}, {t2})")
    return float(stat)


# ---------------------------------------------------------------------------
# backward sup (the tested signal)


@njit(cache=True)
def _bsadf_at_k0(y, t, w):  # pragma: no cover - exercised via wrappers
    best = -np.inf
    skipped = 0
    for t1 in range(0, t - w + 1):
        stat, code = _adf_stat_k0(y, t1, t)
        if code == 0:
            if stat > best:
                best = stat
        else:
            skipped += 1
    return best, skipped


def _bsadf_at(y: np.ndarray, t: int, w: int, k: int) -> tuple[float, int]:
    if k == 0:
        return _bsadf_at_k0(y, t, w)
    best = -np.inf
    skipped = 0
    for t1 in range(0, t - w + 1):
        stat, code = _adf_stat_general(y, t1, t, k)
        if code == 0:
            best = max(best, stat)
        else:
            skipped += 1
    return best, skipped


def bsadf(y: Sequence[float], t: int, w: int, config: AdfConfig = AdfConfig()) -> float:
    """Sup of ADF statistics over every admissible start for windows ending at t."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    if w < config.lag_order + 3:
        raise ValidationError(f"min window {w} must be >= lag_order + 3")
    if t < w:
        raise ValidationError(f"t={t} is below the minimum window {w}")
    if t >= len(y):
        raise ValidationError(f"t={t} out of range for series of length {len(y)}")
    if not np.all(np.isfinite(y[: t + 1])):
        raise ValidationError("series contains non-finite values")
    best, _ = _bsadf_at(y, t, w, config.lag_order)
    if not np.isfinite(best):
        raise DegenerateRegressionError(f"every window ending at t={t} is degenerate")
    return float(best)


@njit(cache=True)
def _bsadf_signal_k0(y, w):  # pragma: no cover - exercised via wrappers
    T = y.shape[0] - 1
    out = np.full(T + 1, np.nan)
    skipped = np.zeros(T + 1, dtype=np.int64)
    for t in range(w, T + 1):
        best = -np.inf
        found = False
        for t1 in range(0, t - w + 1):
            stat, code = _adf_stat_k0(y, t1, t)
            if code == 0:
                found = True
                if stat > best:
                    best = stat
            else:
                skipped[t] += 1
        if found:
            out[t] = best
    return out, skipped


def bsadf_series(y: Sequence[float], w: int,
                 config: AdfConfig = AdfConfig()) -> tuple[np.ndarray, np.ndarray]:
    """BSADF(t) for every t in [w, T]; NaN below w or where all windows degenerate.

    Returns (signal, skipped-window counts), both aligned to the series index.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    if w < config.lag_order + 3:
        raise ValidationError(f"min window {w} must be >= lag_order + 3")
    if len(y) - 1 < w:
        raise ValidationError(f"series of length {len(y)} has no period >= min window {w}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("series contains non-finite values")
    if config.lag_order == 0:
        return _bsadf_signal_k0(y, w)
    T = len(y) - 1
    out = np.full(T + 1, np.nan)
    skipped = np.zeros(T + 1, dtype=np.int64)
    for t in range(w, T + 1):
        best, n_skip = _bsadf_at(y, t, w, config.lag_order)
        skipped[t] = n_skip
        if np.isfinite(best):
            out[t] = best
    return out, skipped


# ---------------------------------------------------------------------------
# Monte-Carlo critical values (forward sup under the null)


def _simulate_null_chunk(start: int, count: int, T: int, null: NullParams, seed: int) -> np.ndarray:
    """Paths [start, start+count) of the null walk; path i only depends on (seed, i)."""
    step_drift = null.drift * (T + 1) ** (-null.eta)
    y = np.zeros((count, T + 1))
    for i in range(count):
        gen = np.random.Generator(np.random.Philox(key=(seed << 64) + start + i))
        steps = step_drift + null.sigma * gen.standard_normal(T)
        np.cumsum(steps, out=y[i, 1:])
    return y


def _sadf_prefix_k0(y: np.ndarray, w: int) -> np.ndarray:
    """sup_{e in [w, t]} ADF_{0->e} per path and t; vectorized, k=0.

    y has shape (paths, T+1); returns (paths, T-w+1) for t = w..T.
    """
    x = y[:, :-1]
    dy = np.diff(y, axis=1)
    n = np.arange(1, y.shape[1], dtype=np.float64)
    S1 = np.cumsum(x, axis=1)
    S2 = np.cumsum(x * x, axis=1)
    Sy = np.cumsum(dy, axis=1)
    Sxy = np.cumsum(x * dy, axis=1)
    Syy = np.cumsum(dy * dy, axis=1)
    sxx = S2 - S1 * S1 / n
    sxy = Sxy - S1 * Sy / n
    syy = Syy - Sy * Sy / n
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = sxy / sxx
        rss = syy - nu * sxy
        stat = nu / np.sqrt(rss / (n - 2.0) / sxx)
    stat[:, : w - 1] = -np.inf  # column e-1 holds window [0, e]
    np.nan_to_num(stat, copy=False, nan=-np.inf, posinf=np.inf, neginf=-np.inf)
    running = np.maximum.accumulate(stat, axis=1)
    return running[:, w - 1 :]


def _sadf_prefix_general(y: np.ndarray, w: int, k: int) -> np.ndarray:
    out = np.empty((y.shape[0], y.shape[1] - w))
    for i in range(y.shape[0]):
        best = -np.inf
        for e in range(w, y.shape[1]):
            stat, code = _adf_stat_general(y[i], 0, e, k)
            if code == 0 and stat > best:
                best = stat
            out[i, e - w] = best
    return out


@dataclass(frozen=True)
class CriticalValueTable:
    """Per-period quantile curves v^c_w(t) for t in [min_window, horizon]."""

    min_window: int
    horizon: int
    confidences: tuple[float, ...]
    values: dict[float, tuple[float, ...]]
    provenance: dict

    @property
    def periods(self) -> range:
        return range(self.min_window, self.horizon + 1)

    def curve(self, confidence: float) -> np.ndarray:
        if confidence not in self.values:
            raise ValidationError(
                f"confidence {confidence} not in table (has {sorted(self.values)})"
            )
        return np.asarray(self.values[confidence])

    def value_at(self, confidence: float, t: int) -> float:
        if not (self.min_window <= t <= self.horizon):
            raise ValidationError(f"t={t} outside [{self.min_window}, {self.horizon}]")
        return self.curve(confidence)[t - self.min_window]

    def cache_key(self) -> str:
        return hashlib.sha256(canonical_json(self.provenance).encode()).hexdigest()[:20]

    def to_json_dict(self) -> dict:
        return {
            "schema": "nftindex-critvals/1",
            "min_window": self.min_window,
            "horizon": self.horizon,
            "confidences": list(self.confidences),
            "values": {repr(c): list(self.values[c]) for c in self.confidences},
            "provenance": self.provenance,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "CriticalValueTable":
        try:
            if doc.get("schema") != "nftindex-critvals/1":
                raise ValidationError(f"unknown critical-value schema: {doc.get('schema')!r}")
            confidences = tuple(float(c) for c in doc["confidences"])
            values = {c: tuple(doc["values"][repr(c)]) for c in confidences}
            return cls(
                min_window=int(doc["min_window"]),
                horizon=int(doc["horizon"]),
                confidences=confidences,
                values=values,
                provenance=dict(doc["provenance"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed critical-value document: {exc}") from exc


def _provenance(horizon, min_window, confidences, n_mc, seed, null, adf_config) -> dict:
    return {
        "horizon": int(horizon),
        "min_window": int(min_window),
        "confidences": [float(c) for c in confidences],
        "n_mc": int(n_mc),
        "seed": int(seed),
        "eta": float(null.eta),
        "sigma": float(null.sigma),
        "drift": float(null.drift),
        "lag_order": int(adf_config.lag_order),
    }


def critical_values(
    horizon: int,
    min_window: int,
    confidences: Sequence[float] = (0.90, 0.95, 0.99),
    n_mc: int = 5000,
    seed: int = 20210601,
    null_params: NullParams = NullParams(),
    adf_config: AdfConfig = AdfConfig(),
    threads: int = 1,
) -> CriticalValueTable:
    """Simulate the null and return empirical quantile curves of the forward sup.

    Deterministic for a fixed seed: each path draws from its own
    counter-keyed stream, so the result is independent of chunking and of
    the thread count.
    """
    if horizon < min_window:
        raise ValidationError(f"horizon {horizon} must be >= min_window {min_window}")
    if min_window < adf_config.lag_order + 3:
        raise ValidationError("min_window must be >= lag_order + 3")
    if n_mc < 100:
        raise ValidationError("n_mc must be >= 100")
    confidences = tuple(sorted(float(c) for c in confidences))
    if not confidences or not all(0 < c < 1 for c in confidences):
        raise ValidationError("confidences must lie in (0, 1)")
    if not (0 <= seed < 2**64):
        raise ValidationError("seed must fit in 64 bits")
    threads = max(1, int(threads))

    n_cols = horizon - min_window + 1
    sadf = np.empty((n_mc, n_cols))
    chunk = 512
    spans = [(s, min(chunk, n_mc - s)) for s in range(0, n_mc, chunk)]

    def work(span):
        start, count = span
        paths = _simulate_null_chunk(start, count, horizon, null_params, seed)
        if adf_config.lag_order == 0:
            sadf[start : start + count] = _sadf_prefix_k0(paths, min_window)
        else:
            sadf[start : start + count] = _sadf_prefix_general(
                paths, min_window, adf_config.lag_order
            )

    if threads == 1:
        for span in spans:
            work(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, spans))

    values = {}
    for c in confidences:
        values[c] = tuple(float(v) for v in np.quantile(sadf, c, axis=0))
    return CriticalValueTable(
        min_window=min_window,
        horizon=horizon,
        confidences=confidences,
        values=values,
        provenance=_provenance(horizon, min_window, confidences, n_mc, seed, null_params, adf_config),
    )


def load_or_compute_critical_values(cache_dir=None, **kwargs) -> CriticalValueTable:
    """Reuse a cached table when every provenance field matches, else compute and cache."""
    probe = _provenance(
        kwargs["horizon"],
        kwargs["min_window"],
        tuple(sorted(float(c) for c in kwargs.get("confidences", (0.90, 0.95, 0.99)))),
        kwargs.get("n_mc", 5000),
        kwargs.get("seed", 20210601),
        kwargs.get("null_params", NullParams()),
        kwargs.get("adf_config", AdfConfig()),
    )
    path = None
    if cache_dir is not None:
        key = hashlib.sha256(canonical_json(probe).encode()).hexdigest()[:20]
        path = os.path.join(cache_dir, f"critvals-{key}.json")
        if os.path.exists(path):
            table = CriticalValueTable.from_json_dict(read_json(path))
            if table.provenance == probe:
                return table
    threads = kwargs.pop("threads", 1)
    table = critical_values(threads=threads, **kwargs)
    if path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        write_json(path, table.to_json_dict())
    return table


# ---------------------------------------------------------------------------
# date-stamping


@dataclass(frozen=True)
class BubbleEpisode:
    """Period span of one detected bubble; `end` is None while still open."""

    start: int
    end: int | None

    @property
    def closed(self) -> bool:
        return self.end is not None


def detect_bubbles(
    signal: np.ndarray,
    table: CriticalValueTable,
    confidence: float | None = None,
    min_duration: int = 5,
) -> list[BubbleEpisode]:
    """Scan the signal against a quantile curve.

    An episode opens at the first t with signal strictly above the curve and
    closes at the first t >= start + min_duration strictly below it; an
    episode still open at the end of the sample is returned open-ended.
    NaN signal values trigger nothing in either direction.
    """
    if min_duration < 1:
        raise ValidationError("min_duration must be >= 1")
    signal = np.asarray(signal, dtype=float)
    if len(signal) - 1 != table.horizon:
        raise ValidationError(
            f"signal covers periods 0..{len(signal) - 1} but the table ends at {table.horizon}"
        )
    confidence = table.confidences[-1] if confidence is None else float(confidence)
    curve = table.curve(confidence)
    episodes = []
    open_start = None
    for t in range(table.min_window, table.horizon + 1):
        s = signal[t]
        v = curve[t - table.min_window]
        if open_start is None:
            if s > v:
                open_start = t
        elif t >= open_start + min_duration and s < v:
            episodes.append(BubbleEpisode(start=open_start, end=t))
            open_start = None
    if open_start is not None:
        episodes.append(BubbleEpisode(start=open_start, end=None))
    return episodes


# ---------------------------------------------------------------------------
# end-to-end report


@dataclass
class BubbleReport:
    periods: tuple[int, ...]
    bsadf: np.ndarray
    curves: dict[float, np.ndarray]
    episodes: list[BubbleEpisode]
    skipped_windows: dict[int, int]
    degenerate: bool
    confidence: float
    min_duration: int
    config: dict
    grid: PeriodGrid | None = None

    def _label(self, period: int | None):
        if period is None:
            return None
        if self.grid is not None:
            return self.grid.date_of(period).isoformat()
        return period

    def to_json_dict(self) -> dict:
        rows = []
        offset = self.periods[0]
        for i, p in enumerate(self.periods):
            value = self.bsadf[i]
            row = {"date": self._label(p), "bsadf": None if np.isnan(value) else float(value)}
            for c, curve in self.curves.items():
                row[f"cv_{int(round(c * 100))}"] = float(curve[i])
            rows.append(row)
        return {
            "schema": "nftindex-bubbles/1",
            "config": self.config,
            "degenerate": self.degenerate,
            "confidence": self.confidence,
            "min_duration": self.min_duration,
            "episodes": [
                {
                    "start": self._label(e.start),
                    "end": self._label(e.end),
                    "start_period": e.start,
                    "end_period": e.end,
                }
                for e in self.episodes
            ],
            "signal": rows,
            "skipped_windows": {str(self._label(p)): n for p, n in sorted(self.skipped_windows.items())},
        }


def analyze(
    index: IndexSeries,
    bsadf_config: BsadfConfig = BsadfConfig(),
    adf_config: AdfConfig = AdfConfig(),
    cache_dir=None,
    threads: int = 1,
    log_levels: bool = False,
    smooth_window: int | None = None,
) -> BubbleReport:
    """Run the full detection pipeline on an index series.

    Levels are used raw by default; ``log_levels`` and ``smooth_window``
    opt into testing the log or a trailing moving average instead.
    """
    periods = index.periods
    w = bsadf_config.min_window
    if len(periods) < w + bsadf_config.min_duration:
        raise ValidationError(
            f"index has {len(periods)} periods, need >= min_window + min_duration "
            f"= {w + bsadf_config.min_duration}"
        )
    levels = {p: index.levels[p] for p in periods}
    if smooth_window is not None:
        levels = moving_average(levels, smooth_window)
    y = np.array([levels[p] for p in periods])
    if log_levels:
        y = np.log(y)

    horizon = len(periods) - 1
    confidences = tuple(sorted({0.95, 0.99, bsadf_config.confidence}))
    table = load_or_compute_critical_values(
        cache_dir=cache_dir,
        horizon=horizon,
        min_window=w,
        confidences=confidences,
        n_mc=bsadf_config.n_mc,
        seed=bsadf_config.seed,
        null_params=bsadf_config.null_params,
        adf_config=adf_config,
        threads=threads,
    )
    signal, skipped = bsadf_series(y, w, adf_config)
    degenerate = bool(np.all(np.isnan(signal[w:])))
    episodes = (
        []
        if degenerate
        else detect_bubbles(signal, table, bsadf_config.confidence, bsadf_config.min_duration)
    )

    first = periods[0]
    config_echo = {
        "bsadf": bsadf_config.to_json_dict(),
        "adf": {"lag_order": adf_config.lag_order, "include_intercept": True},
        "log_levels": log_levels,
        "smooth_window": smooth_window,
        "critical_values_key": table.cache_key(),
    }
    return BubbleReport(
        periods=tuple(periods[w:]),
        bsadf=signal[w:],
        curves={c: table.curve(c) for c in confidences},
        episodes=[
            BubbleEpisode(start=e.start + first, end=None if e.end is None else e.end + first)
            for e in episodes
        ],
        skipped_windows={periods[t]: int(n) for t, n in enumerate(skipped) if n > 0},
        degenerate=degenerate,
        confidence=bsadf_config.confidence,
        min_duration=bsadf_config.min_duration,
        config=config_echo,
        grid=index.grid,
    )
