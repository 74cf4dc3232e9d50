"""Synthetic market generator: the exact pricing model with known parameters.

Worlds generated here feed the main pipeline unmodified (same JSONL/CSV
schemas) and carry their ground truth, so recovery, index and bubble tests
can compare against known coefficients.  Generation is single-threaded and
draws from one seeded stream in a fixed documented order (alpha, gamma path,
traits, then sales), so identical specs produce byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone

import numpy as np

from ._util import canonical_json, write_json
from .errors import ValidationError
from .hedonic import GaugeRecord, HedonicParams, assert_gauge
from .market import Asset, PeriodGrid, SaleRecord, TraitFrequencyAggregate, compute_aggregates
from .priceindex import IndexSeries


@dataclass(frozen=True)
class GammaPathSpec:
    """Market-coefficient path: constant, random walk, or walk with an
    injected multiplicative explosive segment."""

    kind: str = "constant"
    value: float = 0.0
    drift: float = 0.0
    vol: float = 0.0
    segment_start: int = 0
    segment_length: int = 0
    segment_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "random_walk", "explosive_segment"):
            raise ValidationError(f"unknown gamma path kind {self.kind!r}")
        if self.vol < 0:
            raise ValidationError("vol must be >= 0")
        if self.kind == "explosive_segment":
            if self.segment_length < 1:
                raise ValidationError("segment_length must be >= 1")
            if self.segment_rate <= -1:
                raise ValidationError("segment_rate must be > -1")


def gamma_path(spec: GammaPathSpec, n_periods: int, rng: np.random.Generator) -> np.ndarray:
    """Gamma value per period; always consumes the same number of draws per kind."""
    if spec.kind == "constant":
        return np.full(n_periods, spec.value)
    steps = spec.drift + spec.vol * rng.standard_normal(n_periods - 1)
    if spec.kind == "explosive_segment":
        stop = min(spec.segment_start + spec.segment_length, n_periods - 1)
        steps[spec.segment_start : stop] += math.log1p(spec.segment_rate)
    out = np.empty(n_periods)
    out[0] = spec.value
    out[1:] = spec.value + np.cumsum(steps)
    return out


@dataclass(frozen=True)
class GeneratorSpec:
    n_collections: int = 5
    assets_per_collection: int = 100
    n_periods: int = 50
    gamma: GammaPathSpec = field(default_factory=GammaPathSpec)
    sigma_noise: float = 0.1
    seed: int = 0
    log_scale: float = math.log(100.0)
    beta: tuple[float, float, float] = (-1.0, -0.25, -0.5)
    alpha: tuple[float, ...] | None = None
    alpha_spread: float = 1.0
    n_trait_names: int = 4
    trait_value_counts: tuple[int, ...] = (3, 6, 12, 24)
    traitless_share: float = 0.05
    sales_law: str = "poisson"  # poisson | fixed | full_panel
    sales_rate: float = 5.0
    epoch: date = date(2021, 6, 1)

    def __post_init__(self):
        if min(self.n_collections, self.assets_per_collection) < 1 or self.n_periods < 2:
            raise ValidationError("counts must be >= 1 and n_periods >= 2")
        if self.sigma_noise < 0:
            raise ValidationError("sigma_noise must be >= 0")
        if self.sales_law not in ("poisson", "fixed", "full_panel"):
            raise ValidationError(f"unknown sales law {self.sales_law!r}")
        if self.sales_law != "full_panel" and self.sales_rate <= 0:
            raise ValidationError("sales_rate must be > 0")
        if self.alpha is not None and len(self.alpha) != self.n_collections:
            raise ValidationError("alpha must have one entry per collection")
        if not (0 <= self.traitless_share < 1):
            raise ValidationError("traitless_share must be in [0, 1)")

    def to_json_dict(self) -> dict:
        doc = {
            "n_collections": self.n_collections,
            "assets_per_collection": self.assets_per_collection,
            "n_periods": self.n_periods,
            "gamma": {
                "kind": self.gamma.kind,
                "value": self.gamma.value,
                "drift": self.gamma.drift,
                "vol": self.gamma.vol,
                "segment_start": self.gamma.segment_start,
                "segment_length": self.gamma.segment_length,
                "segment_rate": self.gamma.segment_rate,
            },
            "sigma_noise": self.sigma_noise,
            "seed": self.seed,
            "log_scale": self.log_scale,
            "beta": list(self.beta),
            "alpha": None if self.alpha is None else list(self.alpha),
            "alpha_spread": self.alpha_spread,
            "n_trait_names": self.n_trait_names,
            "trait_value_counts": list(self.trait_value_counts),
            "traitless_share": self.traitless_share,
            "sales_law": self.sales_law,
            "sales_rate": self.sales_rate,
            "epoch": self.epoch.isoformat(),
        }
        return doc


@dataclass
class SyntheticMarket:
    spec: GeneratorSpec
    assets: list[Asset]
    sales: list[SaleRecord]
    frequencies: dict
    ground_truth: HedonicParams
    true_index: IndexSeries
    grid: PeriodGrid


def _collection_id(i: int) -> str:
    return f"C{i:03d}"


def _zipf_probs(n_values: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n_values + 1)
    return w / w.sum()


def generate(spec: GeneratorSpec) -> SyntheticMarket:
    """Draw a full market and return it with gauge-aligned ground truth."""
    rng = np.random.default_rng(spec.seed)
    n_coll = spec.n_collections
    collections = [_collection_id(i) for i in range(n_coll)]

    if spec.alpha is not None:
        alpha = np.asarray(spec.alpha, dtype=float)
    else:
        alpha = rng.normal(0.0, spec.alpha_spread, n_coll)
    gamma = gamma_path(spec.gamma, spec.n_periods, rng)

    value_probs = [
        _zipf_probs(spec.trait_value_counts[j % len(spec.trait_value_counts)])
        for j in range(spec.n_trait_names)
    ]
    assets: list[Asset] = []
    for c in collections:
        for i in range(spec.assets_per_collection):
            traits = []
            if spec.traitless_share == 0 or rng.random() >= spec.traitless_share:
                n_traits = int(rng.integers(1, spec.n_trait_names + 1))
                names = np.sort(rng.choice(spec.n_trait_names, size=n_traits, replace=False))
                for j in names:
                    v = int(rng.choice(len(value_probs[j]), p=value_probs[j]))
                    traits.append((f"trait{j}", f"v{v}"))
            assets.append(Asset(collection=c, token_id=str(i), traits=frozenset(traits)))

    frequencies = compute_aggregates(assets)
    b_min, b_avg, b_max = spec.beta

    def log_fair(ci: int, key, t: int) -> float:
        f = frequencies[key]
        return (
            spec.log_scale
            + alpha[ci]
            + b_min * f.f_min
            + b_avg * f.f_avg
            + b_max * f.f_max
            + gamma[t]
        )

    epoch_dt = datetime(spec.epoch.year, spec.epoch.month, spec.epoch.day, tzinfo=timezone.utc)
    sales: list[SaleRecord] = []
    for t in range(spec.n_periods):
        for ci, c in enumerate(collections):
            if spec.sales_law == "full_panel":
                chosen = np.arange(spec.assets_per_collection)
            elif spec.sales_law == "fixed":
                chosen = rng.integers(0, spec.assets_per_collection, int(spec.sales_rate))
            else:
                count = int(rng.poisson(spec.sales_rate))
                chosen = rng.integers(0, spec.assets_per_collection, count)
            for a in chosen:
                token = str(int(a))
                seconds = int(rng.integers(0, 86400))
                noise = rng.normal(0.0, spec.sigma_noise) if spec.sigma_noise > 0 else 0.0
                price = math.exp(log_fair(ci, (c, token), t) + noise)
                sales.append(
                    SaleRecord(
                        collection=c,
                        token_id=token,
                        timestamp=epoch_dt + timedelta(days=t, seconds=seconds),
                        price_usd=price,
                    )
                )
    sales.sort(key=lambda s: (s.timestamp, s.collection, s.token_id, s.price_usd))

    grid = PeriodGrid(epoch=spec.epoch, horizon=spec.n_periods - 1)
    truth = HedonicParams(
        log_scale=spec.log_scale + float(alpha[0]) + float(gamma[0]),
        alpha={c: float(alpha[i] - alpha[0]) for i, c in enumerate(collections)},
        beta_min=b_min,
        beta_avg=b_avg,
        beta_max=b_max,
        gamma={t: float(gamma[t] - gamma[0]) for t in range(spec.n_periods)},
        sigma=spec.sigma_noise,
        gauge=GaugeRecord(reference_collection=collections[0], reference_period=0),
        grid=grid,
    )
    assert_gauge(truth)
    true_index = IndexSeries(
        base_value=100.0,
        levels={t: 100.0 * math.exp(float(gamma[t] - gamma[0])) for t in range(spec.n_periods)},
        gaps=frozenset(),
        grid=grid,
    )
    return SyntheticMarket(
        spec=spec,
        assets=assets,
        sales=sales,
        frequencies=frequencies,
        ground_truth=truth,
        true_index=true_index,
        grid=grid,
    )


# ---------------------------------------------------------------------------
# file output (the exact ingestion schemas)


def write_market(market: SyntheticMarket, out_dir, fmt: str = "jsonl") -> dict[str, str]:
    """Write assets, sales and ground truth; returns the paths written."""
    import json
    import os

    from .hedonic import params_to_json_dict

    if fmt not in ("jsonl", "csv"):
        raise ValidationError(f"unknown format {fmt!r}")
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "assets": os.path.join(out_dir, f"assets.{fmt}"),
        "sales": os.path.join(out_dir, f"sales.{fmt}"),
        "ground_truth": os.path.join(out_dir, "ground_truth.json"),
    }

    assets = sorted(market.assets, key=lambda a: (a.collection, int(a.token_id)))
    if fmt == "jsonl":
        lines = []
        for a in assets:
            traits = [
                {"trait_type": p, "value": v} for p, v in sorted(a.traits)
            ]
            lines.append(
                json.dumps(
                    {"collection": a.collection, "token_id": a.token_id, "traits": traits},
                    sort_keys=True,
                )
            )
        asset_text = "\n".join(lines) + "\n"
        lines = []
        for s in market.sales:
            lines.append(
                json.dumps(
                    {
                        "collection": s.collection,
                        "token_id": s.token_id,
                        "timestamp": s.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ"),
                        "price_usd": repr(s.price_usd),
                    },
                    sort_keys=True,
                )
            )
        sales_text = "\n".join(lines) + "\n"
    else:
        rows = ["collection,token_id,traits"]
        for a in assets:
            traits = ";".join(f"{p}={v}" for p, v in sorted(a.traits))
            rows.append(f"{a.collection},{a.token_id},{traits}")
        asset_text = "\n".join(rows) + "\n"
        rows = ["collection,token_id,timestamp,price_usd"]
        for s in market.sales:
            rows.append(
                f"{s.collection},{s.token_id},"
                f"{s.timestamp.strftime('%Y-%m-%dT%H:%M:%SZ')},{s.price_usd!r}"
            )
        sales_text = "\n".join(rows) + "\n"

    from ._util import atomic_write_text

    atomic_write_text(paths["assets"], asset_text)
    atomic_write_text(paths["sales"], sales_text)
    truth_doc = {
        "model": params_to_json_dict(market.ground_truth),
        "spec": market.spec.to_json_dict(),
        "true_index": {
            "base_value": market.true_index.base_value,
            "levels": {str(t): market.true_index.levels[t] for t in market.true_index.periods},
        },
    }
    write_json(paths["ground_truth"], truth_doc)
    return paths
