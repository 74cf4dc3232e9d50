"""Market microdata: collections, assets, traits, sales and their ingestion.

Trait scarcity features are computed with exact integer counting; the single
division happens at the end so the only rounding is the final one.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from typing import Iterable, Mapping, Sequence

from ._util import parse_rfc3339
from .errors import ValidationError

AssetKey = tuple[str, str]  # (collection id, token id)


@dataclass(frozen=True)
class Collection:
    """A smart contract's token set, identified by an opaque id."""

    id: str
    name: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("collection id must be non-empty")


@dataclass(frozen=True)
class Asset:
    """A single token: its collection, token id and (possibly empty) trait set."""

    collection: str
    token_id: str
    traits: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        if not self.collection:
            raise ValidationError("asset collection id must be non-empty")

    @property
    def key(self) -> AssetKey:
        return (self.collection, self.token_id)


@dataclass(frozen=True)
class SaleRecord:
    """One sale: asset reference, UTC timestamp and strictly positive USD price."""

    collection: str
    token_id: str
    timestamp: datetime
    price_usd: float

    def __post_init__(self):
        if not (self.price_usd > 0):
            raise ValidationError(f"sale price must be > 0, got {self.price_usd}")
        if self.timestamp.tzinfo is None:
            raise ValidationError("sale timestamp must be timezone-aware UTC")

    @property
    def key(self) -> AssetKey:
        return (self.collection, self.token_id)


@dataclass(frozen=True)
class PeriodGrid:
    """Daily period grid: period t covers the UTC day `epoch + t days`, t in [0, horizon]."""

    epoch: date
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError("grid horizon must be >= 1")

    def period_of(self, ts: datetime) -> int:
        start = datetime(self.epoch.year, self.epoch.month, self.epoch.day, tzinfo=timezone.utc)
        return (ts.astimezone(timezone.utc) - start) // timedelta(days=1)

    def contains(self, ts: datetime) -> bool:
        return 0 <= self.period_of(ts) <= self.horizon

    def date_of(self, period: int) -> date:
        return self.epoch + timedelta(days=period)

    @property
    def n_periods(self) -> int:
        return self.horizon + 1

    @classmethod
    def from_sales(cls, sales: Sequence[SaleRecord]) -> "PeriodGrid":
        if not sales:
            raise ValidationError("cannot derive a period grid from zero sales")
        days = [s.timestamp.astimezone(timezone.utc).date() for s in sales]
        epoch = min(days)
        return cls(epoch=epoch, horizon=max(1, (max(days) - epoch).days))


@dataclass(frozen=True)
class TraitFrequencyAggregate:
    """Min / average / max within-collection frequency over an asset's traits."""

    f_min: float
    f_avg: float
    f_max: float

    def __post_init__(self):
        if not (0 < self.f_min <= self.f_avg <= self.f_max <= 1):
            raise ValidationError(
                f"need 0 < f_min <= f_avg <= f_max <= 1, got "
                f"({self.f_min}, {self.f_avg}, {self.f_max})"
            )

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.f_min, self.f_avg, self.f_max)


TRAITLESS = TraitFrequencyAggregate(1.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# trait frequencies


def collection_trait_counts(collection_assets: Iterable[Asset]) -> tuple[Counter, int]:
    """Count every (trait, value) pair across a collection; returns (counts, size)."""
    counts: Counter = Counter()
    size = 0
    cid = None
    for a in collection_assets:
        if cid is None:
            cid = a.collection
        elif a.collection != cid:
            raise ValidationError(
                f"assets from multiple collections: {cid!r} and {a.collection!r}"
            )
        size += 1
        counts.update(a.traits)
    if size == 0:
        raise ValidationError("empty collection")
    return counts, size


def trait_frequency(collection_assets: Iterable[Asset], trait: tuple[str, str]) -> float:
    """Share of a collection's assets carrying `trait`; exact count, one division."""
    counts, size = collection_trait_counts(collection_assets)
    return counts.get(tuple(trait), 0) / size


def aggregate_from_counts(asset: Asset, counts: Mapping, size: int) -> TraitFrequencyAggregate:
    if not asset.traits:
        return TRAITLESS
    per_trait = [counts[t] for t in asset.traits]
    return TraitFrequencyAggregate(
        f_min=min(per_trait) / size,
        f_avg=sum(per_trait) / (len(per_trait) * size),
        f_max=max(per_trait) / size,
    )


def aggregate_frequencies(asset: Asset, collection_assets: Iterable[Asset]) -> TraitFrequencyAggregate:
    """Scarcity aggregates for one asset; (1, 1, 1) when it has no traits."""
    assets = list(collection_assets)
    if asset not in assets:
        raise ValidationError(f"asset {asset.key} not part of the given collection")
    counts, size = collection_trait_counts(assets)
    return aggregate_from_counts(asset, counts, size)


def compute_aggregates(assets: Iterable[Asset]) -> dict[AssetKey, TraitFrequencyAggregate]:
    """Aggregates for every asset, grouped per collection in one pass."""
    by_collection: dict[str, list[Asset]] = {}
    for a in assets:
        by_collection.setdefault(a.collection, []).append(a)
    out: dict[AssetKey, TraitFrequencyAggregate] = {}
    for members in by_collection.values():
        counts, size = collection_trait_counts(members)
        for a in members:
            out[a.key] = aggregate_from_counts(a, counts, size)
    return out


# ---------------------------------------------------------------------------
# period assignment


def assign_periods(sales: Sequence[SaleRecord], grid: PeriodGrid) -> list[tuple[SaleRecord, int]]:
    """Map each sale to its grid period; rejects timestamps outside the window."""
    out = []
    offenders = []
    for s in sales:
        p = grid.period_of(s.timestamp)
        if 0 <= p <= grid.horizon:
            out.append((s, p))
        else:
            offenders.append(s)
    if offenders:
        shown = ", ".join(
            f"{s.collection}/{s.token_id}@{s.timestamp.isoformat()}" for s in offenders[:5]
        )
        raise ValidationError(
            f"{len(offenders)} sale(s) outside the period grid "
            f"[{grid.epoch} .. {grid.date_of(grid.horizon)}]: {shown}"
        )
    return out


# ---------------------------------------------------------------------------
# file ingestion


@dataclass
class IngestReport:
    """Accepted / rejected row counts, by reason."""

    accepted_assets: int = 0
    duplicate_assets: int = 0
    accepted_sales: int = 0
    rejected: dict[str, int] = field(default_factory=dict)
    placeholder_assets: int = 0
    placeholder_keys: list[AssetKey] = field(default_factory=list)

    def reject(self, reason: str) -> None:
        self.rejected[reason] = self.rejected.get(reason, 0) + 1

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())

    def to_json_dict(self) -> dict:
        return {
            "accepted_assets": self.accepted_assets,
            "duplicate_assets": self.duplicate_assets,
            "accepted_sales": self.accepted_sales,
            "rejected": dict(sorted(self.rejected.items())),
            "rejected_total": self.rejected_total,
            "placeholder_assets": self.placeholder_assets,
            "placeholder_keys": [list(k) for k in sorted(self.placeholder_keys)],
        }


@dataclass
class IngestResult:
    assets: dict[AssetKey, Asset]
    sales: list[SaleRecord]
    report: IngestReport


def _infer_format(path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("jsonl", "csv"):
            raise ValidationError(f"unknown format {fmt!r}, expected jsonl or csv")
        return fmt
    text = str(path)
    if text.endswith(".csv"):
        return "csv"
    if text.endswith((".jsonl", ".ndjson", ".json")):
        return "jsonl"
    raise ValidationError(f"cannot infer format from {path}; pass format explicitly")


def _iter_rows(path, fmt: str):
    """Yield (line number, row dict); malformed rows raise with their line number."""
    if fmt == "jsonl":
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}: line {lineno}: malformed JSON: {exc}") from exc
                if not isinstance(row, dict):
                    raise ValidationError(f"{path}: line {lineno}: row is not an object")
                yield lineno, row
    else:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise ValidationError(f"{path}: empty CSV, no header row")
            for row in reader:
                if None in row:
                    raise ValidationError(
                        f"{path}: line {reader.line_num}: more cells than header columns"
                    )
                yield reader.line_num, row


def _parse_traits_field(raw, path, lineno) -> frozenset[tuple[str, str]]:
    if raw is None or raw == "":
        return frozenset()
    if isinstance(raw, str):  # CSV: semicolon-separated name=value pairs
        pairs = []
        for chunk in raw.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            name, sep, value = chunk.partition("=")
            if not sep:
                raise ValidationError(
                    f"{path}: line {lineno}: trait {chunk!r} is not name=value"
                )
            pairs.append((name, value))
        return frozenset(pairs)
    if isinstance(raw, list):
        pairs = []
        for item in raw:
            if not isinstance(item, dict) or "trait_type" not in item or "value" not in item:
                raise ValidationError(
                    f"{path}: line {lineno}: trait entries need trait_type and value"
                )
            pairs.append((str(item["trait_type"]), str(item["value"])))
        return frozenset(pairs)
    raise ValidationError(f"{path}: line {lineno}: unsupported traits field {type(raw).__name__}")


def load_assets(path, fmt: str | None = None) -> tuple[dict[AssetKey, Asset], int]:
    """Read an asset file; returns (assets by key, duplicate row count).

    Re-listing an asset with identical traits deduplicates silently; the same
    key with different traits is a hard error.
    """
    fmt = _infer_format(path, fmt)
    assets: dict[AssetKey, Asset] = {}
    duplicates = 0
    for lineno, row in _iter_rows(path, fmt):
        try:
            collection = str(row["collection"])
            token_id = str(row["token_id"])
        except KeyError as exc:
            raise ValidationError(f"{path}: line {lineno}: missing field {exc}") from exc
        if not collection or not token_id:
            raise ValidationError(f"{path}: line {lineno}: empty collection or token_id")
        traits = _parse_traits_field(row.get("traits"), path, lineno)
        asset = Asset(collection=collection, token_id=token_id, traits=traits)
        existing = assets.get(asset.key)
        if existing is None:
            assets[asset.key] = asset
        elif existing.traits == traits:
            duplicates += 1
        else:
            raise ValidationError(
                f"{path}: line {lineno}: asset {asset.key} re-listed with different traits"
            )
    return assets, duplicates


def load_sales(path, fmt: str | None = None, report: IngestReport | None = None) -> list[SaleRecord]:
    """Read a sales file; rows with missing or non-positive prices are counted
    into `report` and skipped, structural problems raise."""
    fmt = _infer_format(path, fmt)
    report = report if report is not None else IngestReport()
    sales = []
    for lineno, row in _iter_rows(path, fmt):
        try:
            collection = str(row["collection"])
            token_id = str(row["token_id"])
            raw_ts = row["timestamp"]
        except KeyError as exc:
            raise ValidationError(f"{path}: line {lineno}: missing field {exc}") from exc
        if not collection or not token_id:
            raise ValidationError(f"{path}: line {lineno}: empty collection or token_id")
        ts = parse_rfc3339(raw_ts) if isinstance(raw_ts, str) else None
        if ts is None:
            raise ValidationError(f"{path}: line {lineno}: unknown timestamp format: {raw_ts!r}")
        raw_price = row.get("price_usd")
        if raw_price is None or raw_price == "":
            report.reject("missing_price")
            continue
        try:
            price = float(raw_price)
        except (TypeError, ValueError):
            report.reject("invalid_price")
            continue
        if not price > 0:
            report.reject("nonpositive_price")
            continue
        sales.append(SaleRecord(collection=collection, token_id=token_id, timestamp=ts, price_usd=price))
    return sales


def ingest(assets_path, sales_path, fmt: str | None = None) -> IngestResult:
    """Load both files, deduplicate assets, sort sales chronologically and
    attach traitless placeholder assets for sales whose asset is unknown."""
    report = IngestReport()
    assets, duplicates = load_assets(assets_path, fmt)
    report.duplicate_assets = duplicates
    sales = load_sales(sales_path, fmt, report)
    for sale in sales:
        if sale.key not in assets:
            assets[sale.key] = Asset(collection=sale.collection, token_id=sale.token_id)
            report.placeholder_assets += 1
            report.placeholder_keys.append(sale.key)
    sales.sort(key=lambda s: (s.timestamp, s.collection, s.token_id, s.price_usd))
    report.accepted_assets = len(assets)
    report.accepted_sales = len(sales)
    return IngestResult(assets=assets, sales=sales, report=report)
