"""Log-linear hedonic pricing model with collection and daily time dummies.

A sale's log price decomposes into a global scale, a per-collection
popularity coefficient, three trait-scarcity slopes and a per-period market
coefficient, plus Gaussian noise.  Identifiability is fixed by the gauge
``gamma[reference period] = 0`` and ``alpha[reference collection] = 0``
where the reference collection is the lexicographically smallest id and the
reference period the earliest retained one; only differences of the time
coefficients are observable, so predictions and the derived index do not
depend on this choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .errors import RankDeficientError, ValidationError
from .huber import HuberIRLS
from .market import (
    Asset,
    AssetKey,
    PeriodGrid,
    SaleRecord,
    TraitFrequencyAggregate,
    assign_periods,
    compute_aggregates,
)

BETA_NAMES = ("beta_min", "beta_avg", "beta_max")


@dataclass(frozen=True)
class FitConfig:
    huber_delta: float = 1.345
    max_iterations: int = 200
    coef_tolerance: float = 1e-8
    min_sales_per_collection: int = 1
    min_sales_per_period: int = 1

    def __post_init__(self):
        if self.huber_delta <= 0:
            raise ValidationError("huber_delta must be > 0")
        if self.coef_tolerance <= 0:
            raise ValidationError("coef_tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.min_sales_per_collection < 1 or self.min_sales_per_period < 1:
            raise ValidationError("min-sales thresholds must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "huber_delta": self.huber_delta,
            "max_iterations": self.max_iterations,
            "coef_tolerance": self.coef_tolerance,
            "min_sales_per_collection": self.min_sales_per_collection,
            "min_sales_per_period": self.min_sales_per_period,
        }


@dataclass(frozen=True)
class DesignRow:
    """One retained sale, ready for regression."""

    sale_index: int
    collection_index: int
    period_index: int
    f_min: float
    f_avg: float
    f_max: float
    target: float  # log price


@dataclass(frozen=True)
class DummyMaps:
    """Dense dummy indexing: collections lexicographic, periods ascending.

    Index 0 of each is the gauge reference and carries no design column.
    """

    collections: tuple[str, ...]
    periods: tuple[int, ...]

    @property
    def collection_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.collections)}

    @property
    def period_index(self) -> dict[int, int]:
        return {p: i for i, p in enumerate(self.periods)}

    @property
    def n_columns(self) -> int:
        # alpha dummies + 3 betas + gamma dummies (intercept excluded)
        return (len(self.collections) - 1) + 3 + (len(self.periods) - 1)

    def column_names(self) -> list[str]:
        names = [f"alpha[{c}]" for c in self.collections[1:]]
        names += list(BETA_NAMES)
        names += [f"gamma[{p}]" for p in self.periods[1:]]
        return names


@dataclass
class DesignReport:
    n_input: int = 0
    n_retained: int = 0
    dropped_rows: int = 0
    dropped_collections: dict[str, int] = field(default_factory=dict)
    dropped_periods: dict[int, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_retained": self.n_retained,
            "dropped_rows": self.dropped_rows,
            "dropped_collections": {k: v for k, v in sorted(self.dropped_collections.items())},
            "dropped_periods": {str(k): v for k, v in sorted(self.dropped_periods.items())},
        }


def build_design(
    sales_with_periods: Sequence[tuple[SaleRecord, int]],
    frequencies: Mapping[AssetKey, TraitFrequencyAggregate],
    config: FitConfig = FitConfig(),
) -> tuple[list[DesignRow], DummyMaps, DesignReport]:
    """One design row per retained sale.

    Collections/periods with fewer sales than the configured minima are
    dropped (iterated, since dropping a collection can empty a period) and
    tallied in the report.
    """
    report = DesignReport(n_input=len(sales_with_periods))
    missing = sorted({s.key for s, _ in sales_with_periods} - set(frequencies))
    if missing:
        raise ValidationError(
            f"{len(missing)} sale asset(s) lack frequency aggregates, e.g. {missing[:3]}"
        )

    def tally(pairs):
        coll: dict[str, int] = {}
        per: dict[int, int] = {}
        for s, p in pairs:
            coll[s.collection] = coll.get(s.collection, 0) + 1
            per[p] = per.get(p, 0) + 1
        return coll, per

    original_coll, original_per = tally(sales_with_periods)
    kept = list(sales_with_periods)
    while True:
        coll_counts, period_counts = tally(kept)
        bad_colls = {c for c, n in coll_counts.items() if n < config.min_sales_per_collection}
        bad_periods = {p for p, n in period_counts.items() if n < config.min_sales_per_period}
        if not bad_colls and not bad_periods:
            break
        kept = [(s, p) for s, p in kept if s.collection not in bad_colls and p not in bad_periods]

    # record everything that vanished, including collections/periods emptied
    # indirectly by another drop (those become index gaps downstream)
    final_coll, final_per = tally(kept)
    for c in sorted(set(original_coll) - set(final_coll)):
        report.dropped_collections[c] = original_coll[c]
    for p in sorted(set(original_per) - set(final_per)):
        report.dropped_periods[p] = original_per[p]

    report.dropped_rows = report.n_input - len(kept)
    report.n_retained = len(kept)
    if not kept:
        raise ValidationError("no rows retained after min-sales filtering")

    maps = DummyMaps(
        collections=tuple(sorted({s.collection for s, _ in kept})),
        periods=tuple(sorted({p for _, p in kept})),
    )
    cidx = maps.collection_index
    pidx = maps.period_index
    rows = []
    for i, (sale, period) in enumerate(sales_with_periods):
        if sale.collection not in cidx or period not in pidx:
            continue
        f = frequencies[sale.key]
        rows.append(
            DesignRow(
                sale_index=i,
                collection_index=cidx[sale.collection],
                period_index=pidx[period],
                f_min=f.f_min,
                f_avg=f.f_avg,
                f_max=f.f_max,
                target=math.log(sale.price_usd),
            )
        )
    return rows, maps, report


def design_arrays(rows: Sequence[DesignRow], maps: DummyMaps) -> tuple[sp.csr_matrix, np.ndarray]:
    """CSR design matrix (alpha dummies | betas | gamma dummies) and target."""
    n = len(rows)
    n_alpha = len(maps.collections) - 1
    n_gamma = len(maps.periods) - 1
    p = maps.n_columns
    data, indices, indptr = [], [], [0]
    y = np.empty(n)
    for r, row in enumerate(rows):
        if row.collection_index > 0:
            indices.append(row.collection_index - 1)
            data.append(1.0)
        indices.extend((n_alpha, n_alpha + 1, n_alpha + 2))
        data.extend((row.f_min, row.f_avg, row.f_max))
        if row.period_index > 0:
            indices.append(n_alpha + 3 + row.period_index - 1)
            data.append(1.0)
        indptr.append(len(indices))
        y[r] = row.target
    X = sp.csr_matrix(
        (np.asarray(data), np.asarray(indices, dtype=np.int32), np.asarray(indptr, dtype=np.int32)),
        shape=(n, p),
    )
    assert n_gamma + n_alpha + 3 == p
    return X, y


# ---------------------------------------------------------------------------
# fitted parameters


@dataclass(frozen=True)
class GaugeRecord:
    reference_collection: str
    reference_period: int


@dataclass(frozen=True)
class HedonicParams:
    """Fitted coefficients of the pricing model.

    Everything produced by ``fit`` or deserialization satisfies the gauge
    (reference alpha and gamma exactly zero); ``shifted`` deliberately breaks
    it to exercise gauge invariance of observables.
    """

    log_scale: float
    alpha: dict[str, float]
    beta_min: float
    beta_avg: float
    beta_max: float
    gamma: dict[int, float]
    sigma: float
    gauge: GaugeRecord
    grid: PeriodGrid | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")

    @property
    def periods(self) -> tuple[int, ...]:
        return tuple(sorted(self.gamma))

    def shifted(self, c: float) -> "HedonicParams":
        """Equivalent parameters under the gauge translation gamma+c, scale-c."""
        return replace(
            self,
            log_scale=self.log_scale - c,
            gamma={p: g + c for p, g in self.gamma.items()},
        )


def assert_gauge(params: HedonicParams) -> None:
    """Check the identifiability constraints hold exactly."""
    if params.alpha.get(params.gauge.reference_collection) != 0.0:
        raise ValidationError("gauge violated: reference collection alpha must be 0")
    if params.gamma.get(params.gauge.reference_period) != 0.0:
        raise ValidationError("gauge violated: reference period gamma must be 0")


def predict_log_price(
    params: HedonicParams,
    collection: str,
    freqs: TraitFrequencyAggregate,
    period: int | None = None,
    gamma: float | None = None,
) -> float:
    """Model-fair log price for an asset of `collection` with scarcity `freqs`.

    Either a fitted `period` or an explicit `gamma` estimate must be given.
    """
    if collection not in params.alpha:
        raise ValidationError(f"collection {collection!r} has no fitted coefficient")
    if gamma is None:
        if period is None:
            raise ValidationError("need a period or an explicit gamma")
        if period not in params.gamma:
            raise ValidationError(f"period {period} has no fitted coefficient")
        gamma = params.gamma[period]
    return (
        params.log_scale
        + params.alpha[collection]
        + params.beta_min * freqs.f_min
        + params.beta_avg * freqs.f_avg
        + params.beta_max * freqs.f_max
        + gamma
    )


@dataclass
class FitDiagnostics:
    iterations: int
    converged: bool
    residual_median: float
    residual_mad_scale: float
    n_rows: int
    n_columns: int
    condition_number: float
    design: DesignReport

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_median": self.residual_median,
            "residual_mad_scale": self.residual_mad_scale,
            "n_rows": self.n_rows,
            "n_columns": self.n_columns,
            "condition_number": self.condition_number,
            "design": self.design.to_json_dict(),
        }


def fit(
    rows: Sequence[DesignRow],
    maps: DummyMaps,
    config: FitConfig = FitConfig(),
    report: DesignReport | None = None,
    grid: PeriodGrid | None = None,
) -> tuple[HedonicParams, FitDiagnostics]:
    """Fit the pricing model on a built design with the robust regressor."""
    if not rows:
        raise ValidationError("empty design")
    X, y = design_arrays(rows, maps)
    reg = HuberIRLS(
        delta=config.huber_delta,
        max_iter=config.max_iterations,
        tol=config.coef_tolerance,
        fit_intercept=True,
    )
    try:
        reg.fit(X, y)
    except RankDeficientError as exc:
        names = maps.column_names() + ["intercept"]
        named = [names[i] for i in exc.columns if i < len(names)]
        raise RankDeficientError(
            f"design is rank deficient after gauge constraints; collinear columns: {named}",
            columns=exc.columns,
        ) from exc

    n_alpha = len(maps.collections) - 1
    alpha = {maps.collections[0]: 0.0}
    for i, cid in enumerate(maps.collections[1:]):
        alpha[cid] = float(reg.coef_[i])
    gamma = {maps.periods[0]: 0.0}
    for i, p in enumerate(maps.periods[1:]):
        gamma[p] = float(reg.coef_[n_alpha + 3 + i])
    params = HedonicParams(
        log_scale=reg.intercept_,
        alpha=alpha,
        beta_min=float(reg.coef_[n_alpha]),
        beta_avg=float(reg.coef_[n_alpha + 1]),
        beta_max=float(reg.coef_[n_alpha + 2]),
        gamma=gamma,
        sigma=reg.scale_,
        gauge=GaugeRecord(
            reference_collection=maps.collections[0],
            reference_period=maps.periods[0],
        ),
        grid=grid,
    )
    assert_gauge(params)
    diagnostics = FitDiagnostics(
        iterations=reg.n_iter_,
        converged=reg.converged_,
        residual_median=reg.residual_median_,
        residual_mad_scale=reg.scale_,
        n_rows=X.shape[0],
        n_columns=X.shape[1] + 1,
        condition_number=reg.condition_number_,
        design=report if report is not None else DesignReport(),
    )
    return params, diagnostics


# ---------------------------------------------------------------------------
# serialization


def params_to_json_dict(
    params: HedonicParams,
    diagnostics: FitDiagnostics | None = None,
    config: FitConfig | None = None,
) -> dict:
    grid = params.grid
    if grid is not None:
        gamma = {grid.date_of(p).isoformat(): v for p, v in params.gamma.items()}
        ref_period = grid.date_of(params.gauge.reference_period).isoformat()
    else:
        gamma = {str(p): v for p, v in params.gamma.items()}
        ref_period = str(params.gauge.reference_period)
    doc = {
        "schema": "nftindex-model/1",
        "gauge": {
            "reference_collection": params.gauge.reference_collection,
            "reference_period": ref_period,
        },
        "log_scale": params.log_scale,
        "beta": {"min": params.beta_min, "avg": params.beta_avg, "max": params.beta_max},
        "alpha": {k: params.alpha[k] for k in sorted(params.alpha)},
        "gamma": {k: gamma[k] for k in sorted(gamma)},
        "sigma": params.sigma,
        "grid": None if grid is None else {"epoch": grid.epoch.isoformat(), "horizon": grid.horizon},
    }
    if diagnostics is not None:
        doc["diagnostics"] = diagnostics.to_json_dict()
    if config is not None:
        doc["config"] = config.to_json_dict()
    return doc


def params_from_json_dict(doc: Mapping) -> HedonicParams:
    try:
        if doc.get("schema") != "nftindex-model/1":
            raise ValidationError(f"unknown model schema: {doc.get('schema')!r}")
        grid = None
        if doc.get("grid") is not None:
            grid = PeriodGrid(
                epoch=date.fromisoformat(doc["grid"]["epoch"]),
                horizon=int(doc["grid"]["horizon"]),
            )

        def key_to_period(k: str) -> int:
            if grid is None:
                return int(k)
            return (date.fromisoformat(k) - grid.epoch).days

        params = HedonicParams(
            log_scale=float(doc["log_scale"]),
            alpha={k: float(v) for k, v in doc["alpha"].items()},
            beta_min=float(doc["beta"]["min"]),
            beta_avg=float(doc["beta"]["avg"]),
            beta_max=float(doc["beta"]["max"]),
            gamma={key_to_period(k): float(v) for k, v in doc["gamma"].items()},
            sigma=float(doc["sigma"]),
            gauge=GaugeRecord(
                reference_collection=doc["gauge"]["reference_collection"],
                reference_period=key_to_period(doc["gauge"]["reference_period"]),
            ),
            grid=grid,
        )
        assert_gauge(params)
        return params
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed model document: {exc}") from exc


# ---------------------------------------------------------------------------
# high-level estimator


class HedonicIndexModel(BaseEstimator):
    """End-to-end estimator: domain objects in, fitted pricing model out.

    ``fit`` computes trait aggregates, assigns periods on the grid, builds
    the dummy design and runs the robust regression.  Parameters mirror
    FitConfig so ``get_params`` echoes the full configuration.
    """

    def __init__(self, huber_delta: float = 1.345, max_iterations: int = 200,
                 coef_tolerance: float = 1e-8, min_sales_per_collection: int = 1,
                 min_sales_per_period: int = 1):
        self.huber_delta = huber_delta
        self.max_iterations = max_iterations
        self.coef_tolerance = coef_tolerance
        self.min_sales_per_collection = min_sales_per_collection
        self.min_sales_per_period = min_sales_per_period

    def _config(self) -> FitConfig:
        return FitConfig(
            huber_delta=self.huber_delta,
            max_iterations=self.max_iterations,
            coef_tolerance=self.coef_tolerance,
            min_sales_per_collection=self.min_sales_per_collection,
            min_sales_per_period=self.min_sales_per_period,
        )

    def fit(self, assets: Iterable[Asset], sales: Sequence[SaleRecord],
            grid: PeriodGrid | None = None):
        assets = list(assets)
        if grid is None:
            grid = PeriodGrid.from_sales(sales)
        config = self._config()
        freqs = compute_aggregates(assets)
        with_periods = assign_periods(sales, grid)
        rows, maps, report = build_design(with_periods, freqs, config)
        self.params_, self.diagnostics_ = fit(rows, maps, config, report, grid)
        self.maps_ = maps
        self.frequencies_ = freqs
        self.grid_ = grid
        return self

    def predict_log_price(self, collection: str, freqs: TraitFrequencyAggregate,
                          period: int | None = None, gamma: float | None = None) -> float:
        if not hasattr(self, "params_"):
            raise ValidationError("model is not fitted")
        return predict_log_price(self.params_, collection, freqs, period, gamma)
