import json
from datetime import date, datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nftindex.errors import ValidationError
from nftindex.market import (
    Asset,
    IngestReport,
    PeriodGrid,
    SaleRecord,
    TraitFrequencyAggregate,
    aggregate_frequencies,
    assign_periods,
    compute_aggregates,
    ingest,
    load_assets,
    load_sales,
    trait_frequency,
)

UTC = timezone.utc


def make_assets(*trait_lists, collection="c"):
    return [
        Asset(collection=collection, token_id=str(i), traits=frozenset(traits))
        for i, traits in enumerate(trait_lists)
    ]


# ---------------------------------------------------------------------------
# trait frequencies


def test_trait_frequency_toy_counts():
    assets = make_assets(
        [("hat", "cap")], [("hat", "cap"), ("eyes", "laser")], [("eyes", "laser")]
    )
    assert trait_frequency(assets, ("hat", "cap")) == 2 / 3
    assert trait_frequency(assets, ("eyes", "laser")) == 2 / 3
    assert trait_frequency(assets, ("hat", "beanie")) == 0.0


def test_trait_frequency_empty_collection_errors():
    with pytest.raises(ValidationError):
        trait_frequency([], ("hat", "cap"))


def test_trait_frequency_rejects_mixed_collections():
    a = Asset(collection="a", token_id="1")
    b = Asset(collection="b", token_id="1")
    with pytest.raises(ValidationError):
        trait_frequency([a, b], ("hat", "cap"))


def punk_collection():
    """100 tokens mirroring the published frequencies of a famous punk:
    male 60%, cigarette 10%, earring 25%, mohawk-thin 4%."""
    assets = []
    for i in range(100):
        traits = []
        if i < 60:
            traits.append(("type", "male"))
        if i < 10:
            traits.append(("accessory", "cigarette"))
        if i < 25:
            traits.append(("accessory", "earring"))
        if i < 4:
            traits.append(("hair", "mohawk thin"))
        assets.append(Asset(collection="punks", token_id=str(i), traits=frozenset(traits)))
    return assets


def test_trait_frequency_punk_fixture():
    assets = punk_collection()
    assert trait_frequency(assets, ("type", "male")) == 0.60
    assert trait_frequency(assets, ("accessory", "cigarette")) == 0.10
    assert trait_frequency(assets, ("accessory", "earring")) == 0.25
    assert trait_frequency(assets, ("hair", "mohawk thin")) == 0.04


def test_aggregate_frequencies_punk_1463():
    assets = punk_collection()
    # token 0 carries all four traits
    agg = aggregate_frequencies(assets[0], assets)
    assert agg.f_min == 0.04
    assert agg.f_avg == (60 + 10 + 25 + 4) / 400
    assert agg.f_avg == 0.2475
    assert agg.f_max == 0.60


def test_aggregate_frequencies_traitless_is_ones():
    assets = make_assets([], [("hat", "cap")])
    assert aggregate_frequencies(assets[0], assets).as_tuple() == (1.0, 1.0, 1.0)


def test_aggregate_frequencies_singleton_trait():
    assets = make_assets(*([[("hat", "cap")]] + [[] for _ in range(9)]))
    agg = aggregate_frequencies(assets[0], assets)
    assert agg.as_tuple() == (0.1, 0.1, 0.1)


def test_aggregate_requires_membership():
    assets = make_assets([("hat", "cap")])
    outsider = Asset(collection="c", token_id="99")
    with pytest.raises(ValidationError):
        aggregate_frequencies(outsider, assets)


def test_aggregate_invariant_validation():
    with pytest.raises(ValidationError):
        TraitFrequencyAggregate(0.5, 0.4, 0.6)
    with pytest.raises(ValidationError):
        TraitFrequencyAggregate(0.0, 0.5, 0.6)


@st.composite
def collections(draw):
    n_assets = draw(st.integers(min_value=1, max_value=25))
    names = ("p0", "p1", "p2")
    values = ("a", "b", "c", "d")
    out = []
    for i in range(n_assets):
        traits = draw(
            st.sets(
                st.tuples(st.sampled_from(names), st.sampled_from(values)), max_size=5
            )
        )
        out.append(Asset(collection="c", token_id=str(i), traits=frozenset(traits)))
    return out


@settings(max_examples=60, deadline=None)
@given(collections())
def test_frequency_brute_force_property(assets):
    def brute(trait):
        hits = 0
        for a in assets:
            for pv in a.traits:
                if pv == trait:
                    hits += 1
        return hits / len(assets)

    seen = {t for a in assets for t in a.traits}
    for trait in seen:
        f = trait_frequency(assets, trait)
        assert f == brute(trait)
        assert 0 < f <= 1
    aggs = compute_aggregates(assets)
    for a in assets:
        agg = aggs[a.key]
        assert agg.f_min <= agg.f_avg <= agg.f_max
        if a.traits:
            per = sorted(brute(t) for t in a.traits)
            assert agg.f_min == per[0]
            assert agg.f_max == per[-1]
            assert agg.f_avg == pytest.approx(sum(per) / len(per), abs=1e-15)
        else:
            assert agg.as_tuple() == (1.0, 1.0, 1.0)


def test_single_valued_trait_frequencies_sum_below_one():
    # every asset carries at most one value per trait name
    assets = make_assets(
        [("hat", "cap")], [("hat", "beanie")], [("hat", "cap")], [], [("hat", "fedora")]
    )
    total = sum(
        trait_frequency(assets, ("hat", v)) for v in ("cap", "beanie", "fedora")
    )
    assert total <= 1.0


# ---------------------------------------------------------------------------
# period grid


def test_assign_periods_day_boundaries():
    grid = PeriodGrid(epoch=date(2021, 7, 1), horizon=3)
    t0 = datetime(2021, 7, 1, tzinfo=UTC)

    def sale(ts):
        return SaleRecord(collection="c", token_id="1", timestamp=ts, price_usd=1.0)

    pairs = assign_periods(
        [
            sale(t0),
            sale(t0 + timedelta(hours=23, minutes=59)),
            sale(t0 + timedelta(hours=24)),
        ],
        grid,
    )
    assert [p for _, p in pairs] == [0, 0, 1]


def test_assign_periods_rejects_out_of_window():
    grid = PeriodGrid(epoch=date(2021, 7, 1), horizon=1)
    late = SaleRecord(
        collection="c",
        token_id="1",
        timestamp=datetime(2021, 7, 5, tzinfo=UTC),
        price_usd=1.0,
    )
    with pytest.raises(ValidationError, match="outside the period grid"):
        assign_periods([late], grid)


def test_grid_requires_horizon():
    with pytest.raises(ValidationError):
        PeriodGrid(epoch=date(2021, 1, 1), horizon=0)


def test_grid_from_sales():
    sales = [
        SaleRecord("c", "1", datetime(2021, 7, 3, 5, tzinfo=UTC), 1.0),
        SaleRecord("c", "2", datetime(2021, 7, 1, 22, tzinfo=UTC), 2.0),
    ]
    grid = PeriodGrid.from_sales(sales)
    assert grid.epoch == date(2021, 7, 1)
    assert grid.horizon == 2


# ---------------------------------------------------------------------------
# ingestion


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def asset_row(collection="0xb4", token="1463", traits=None):
    row = {"collection": collection, "token_id": token}
    if traits is not None:
        row["traits"] = traits
    return row


def sale_row(collection="0xb4", token="1463", price="100000.0", ts="2021-07-01T12:00:00Z"):
    return {"collection": collection, "token_id": token, "timestamp": ts, "price_usd": price}


def test_ingest_happy_path(tmp_path):
    apath, spath = tmp_path / "a.jsonl", tmp_path / "s.jsonl"
    write_jsonl(apath, [asset_row(traits=[{"trait_type": "hat", "value": "cap"}])])
    write_jsonl(spath, [sale_row()])
    result = ingest(apath, spath)
    assert result.report.accepted_assets == 1
    assert result.report.accepted_sales == 1
    sale = result.sales[0]
    assert sale.price_usd == 100000.0
    grid = PeriodGrid(epoch=date(2021, 7, 1), horizon=1)
    assert grid.period_of(sale.timestamp) == 0
    assert result.assets[("0xb4", "1463")].traits == frozenset({("hat", "cap")})


def test_ingest_rejects_nonpositive_price(tmp_path):
    apath, spath = tmp_path / "a.jsonl", tmp_path / "s.jsonl"
    write_jsonl(apath, [asset_row()])
    write_jsonl(spath, [sale_row(price="0"), sale_row(), sale_row(price="")])
    result = ingest(apath, spath)
    assert result.report.rejected["nonpositive_price"] == 1
    assert result.report.rejected["missing_price"] == 1
    assert result.report.accepted_sales == 1


def test_ingest_duplicate_asset_identical_traits(tmp_path):
    apath, spath = tmp_path / "a.jsonl", tmp_path / "s.jsonl"
    traits = [{"trait_type": "hat", "value": "cap"}]
    write_jsonl(apath, [asset_row(traits=traits), asset_row(traits=traits)])
    write_jsonl(spath, [sale_row()])
    result = ingest(apath, spath)
    assert result.report.accepted_assets == 1
    assert result.report.duplicate_assets == 1


def test_ingest_conflicting_asset_traits_error(tmp_path):
    apath = tmp_path / "a.jsonl"
    write_jsonl(
        apath,
        [
            asset_row(traits=[{"trait_type": "hat", "value": "cap"}]),
            asset_row(traits=[{"trait_type": "hat", "value": "beanie"}]),
        ],
    )
    with pytest.raises(ValidationError, match="different traits"):
        load_assets(apath)


def test_ingest_placeholder_for_unknown_asset(tmp_path):
    apath, spath = tmp_path / "a.jsonl", tmp_path / "s.jsonl"
    write_jsonl(apath, [asset_row()])
    write_jsonl(spath, [sale_row(), sale_row(token="999")])
    result = ingest(apath, spath)
    assert result.report.placeholder_assets == 1
    assert result.assets[("0xb4", "999")].traits == frozenset()


def test_ingest_malformed_row_names_line(tmp_path):
    spath = tmp_path / "s.jsonl"
    spath.write_text(json.dumps(sale_row()) + "\n{not json\n")
    with pytest.raises(ValidationError, match="line 2"):
        load_sales(spath)


def test_ingest_bad_timestamp_is_fatal(tmp_path):
    spath = tmp_path / "s.jsonl"
    write_jsonl(spath, [sale_row(ts="last tuesday")])
    with pytest.raises(ValidationError, match="timestamp"):
        load_sales(spath)


def test_ingest_idempotent(tmp_path):
    apath, spath = tmp_path / "a.jsonl", tmp_path / "s.jsonl"
    write_jsonl(apath, [asset_row(), asset_row(token="2")])
    write_jsonl(spath, [sale_row(), sale_row(token="2", ts="2021-07-02T01:00:00Z")])
    r1 = ingest(apath, spath)
    r2 = ingest(apath, spath)
    assert r1.assets == r2.assets
    assert r1.sales == r2.sales
    assert r1.report.to_json_dict() == r2.report.to_json_dict()


def test_ingest_sales_sorted(tmp_path):
    apath, spath = tmp_path / "a.jsonl", tmp_path / "s.jsonl"
    write_jsonl(apath, [asset_row()])
    write_jsonl(
        spath,
        [
            sale_row(ts="2021-07-03T00:00:00Z"),
            sale_row(ts="2021-07-01T00:00:00Z"),
            sale_row(ts="2021-07-02T00:00:00Z"),
        ],
    )
    result = ingest(apath, spath)
    stamps = [s.timestamp for s in result.sales]
    assert stamps == sorted(stamps)


def test_csv_round_trip(tmp_path):
    acsv = tmp_path / "a.csv"
    scsv = tmp_path / "s.csv"
    acsv.write_text(
        "collection,token_id,traits\n"
        "0xb4,1463,hat=cap;eyes=laser\n"
        "0xb4,1464,\n"
    )
    scsv.write_text(
        "collection,token_id,timestamp,price_usd\n"
        "0xb4,1463,2021-07-01T12:00:00Z,100.5\n"
    )
    result = ingest(acsv, scsv)
    assert result.assets[("0xb4", "1463")].traits == frozenset(
        {("hat", "cap"), ("eyes", "laser")}
    )
    assert result.assets[("0xb4", "1464")].traits == frozenset()
    assert result.sales[0].price_usd == 100.5


def test_csv_malformed_traits(tmp_path):
    acsv = tmp_path / "a.csv"
    acsv.write_text("collection,token_id,traits\nc,1,hat\n")
    with pytest.raises(ValidationError, match="name=value"):
        load_assets(acsv)


def test_report_json_shape():
    report = IngestReport()
    report.reject("nonpositive_price")
    doc = report.to_json_dict()
    assert doc["rejected"] == {"nonpositive_price": 1}
    assert doc["rejected_total"] == 1
