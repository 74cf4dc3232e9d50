"""Batch CLI: simulate, ingest, fit, index, bubbles, misprice, corr, critvals.

Every command resolves its configuration as flag > config-file section >
built-in default, echoes the resolved values into its output (JSON outputs
embed a ``config`` block; CSV outputs get a ``<name>.meta.json`` sidecar)
and writes atomically.  Exit codes: 0 ok, 2 usage/validation, 3 numerical,
4 output I/O.
"""

from __future__ import annotations

import functools
import math
import os
import sys

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import bubbles as bub
from . import hedonic, market, mispricing, priceindex, synthetic
from ._util import parse_iso_date, read_json, write_json
from .errors import NumericalError, OutputError, ValidationError


def load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"bad config {path}: {exc}") from exc


class Resolver:
    """flag > config section > [common] > default, recording what was used."""

    def __init__(self, config_path):
        self.config = load_config(config_path)
        self.resolved = {"config_file": config_path}

    def get(self, section: str, key: str, flag, default=None):
        if flag is not None:
            value = flag
        elif key in self.config.get(section, {}):
            value = self.config[section][key]
        elif key in self.config.get("common", {}):
            value = self.config["common"][key]
        else:
            value = default
        self.resolved.setdefault(section, {})[key] = value
        return value


def _require_file(path, what: str) -> str:
    if path is None:
        raise ValidationError(f"missing required input: {what}")
    if not os.path.exists(path):
        raise ValidationError(f"{what} file not found: {path}")
    return path


def _out_path(resolver, flag, default_name, out_dir_flag=None):
    out_dir = resolver.get("common", "out_dir", out_dir_flag, ".")
    if flag is not None:
        return flag
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, default_name)


def pipeline_command(fn):
    """Map package exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except NumericalError as exc:
            click.echo(f"numerical error: {exc}", err=True)
            sys.exit(3)
        except (OutputError, OSError) as exc:
            click.echo(f"output error: {exc}", err=True)
            sys.exit(4)

    return wrapper


def _write_csv_with_meta(write_fn, out_path, meta: dict) -> None:
    write_fn(out_path)
    write_json(out_path + ".meta.json", meta)


@click.group()
@click.version_option(package_name="nftindex")
def main():
    """Hedonic price indices, bubble detection and mispricing for NFT sales data."""


# ---------------------------------------------------------------------------


@main.command()
@click.option("--assets", "assets_path", help="Asset file (JSONL or CSV).")
@click.option("--sales", "sales_path", help="Sales file (JSONL or CSV).")
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default=None)
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.option("--out-dir", default=None)
@click.option("--out", "out_path", default=None, help="Report path (default ingest_report.json).")
@pipeline_command
def ingest(assets_path, sales_path, fmt, config_path, out_dir, out_path):
    """Parse market files and write an ingestion report."""
    r = Resolver(config_path)
    assets_path = _require_file(r.get("ingest", "assets", assets_path), "assets")
    sales_path = _require_file(r.get("ingest", "sales", sales_path), "sales")
    fmt = r.get("ingest", "format", fmt)
    result = market.ingest(assets_path, sales_path, fmt)
    out_path = _out_path(r, out_path, "ingest_report.json", out_dir)
    doc = {"schema": "nftindex-ingest/1", "report": result.report.to_json_dict(), "config": r.resolved}
    write_json(out_path, doc)
    click.echo(
        f"ingested {result.report.accepted_sales} sales across "
        f"{result.report.accepted_assets} assets "
        f"({result.report.rejected_total} rows rejected) -> {out_path}"
    )


def _load_filtered_market(r: Resolver, assets_path, sales_path, fmt, collections):
    result = market.ingest(assets_path, sales_path, fmt)
    if collections:
        known = {a.collection for a in result.assets.values()}
        unknown = sorted(set(collections) - known)
        if unknown:
            raise ValidationError(f"unknown collection id(s) in filter: {unknown}")
        keep = set(collections)
        result.assets = {k: a for k, a in result.assets.items() if a.collection in keep}
        result.sales = [s for s in result.sales if s.collection in keep]
    return result


@main.command()
@click.option("--assets", "assets_path")
@click.option("--sales", "sales_path")
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default=None)
@click.option("--collections", default=None, help="Comma-separated collection filter.")
@click.option("--epoch", default=None, help="Grid epoch (ISO date); default from data.")
@click.option("--horizon", type=int, default=None, help="Last period index; default from data.")
@click.option("--huber-delta", type=float, default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--coef-tolerance", type=float, default=None)
@click.option("--min-sales-per-collection", type=int, default=None)
@click.option("--min-sales-per-period", type=int, default=None)
@click.option("--config", "config_path", default=None)
@click.option("--out-dir", default=None)
@click.option("--out", "out_path", default=None, help="Model path (default model.json).")
@pipeline_command
def fit(assets_path, sales_path, fmt, collections, epoch, horizon, huber_delta,
        max_iterations, coef_tolerance, min_sales_per_collection, min_sales_per_period,
        config_path, out_dir, out_path):
    """Fit the hedonic pricing model and write the model document."""
    r = Resolver(config_path)
    assets_path = _require_file(r.get("fit", "assets", assets_path), "assets")
    sales_path = _require_file(r.get("fit", "sales", sales_path), "sales")
    fmt = r.get("fit", "format", fmt)
    raw_filter = r.get("fit", "collections", collections)
    if isinstance(raw_filter, str):
        raw_filter = [c.strip() for c in raw_filter.split(",") if c.strip()]
    config = hedonic.FitConfig(
        huber_delta=r.get("fit", "huber_delta", huber_delta, 1.345),
        max_iterations=r.get("fit", "max_iterations", max_iterations, 200),
        coef_tolerance=r.get("fit", "coef_tolerance", coef_tolerance, 1e-8),
        min_sales_per_collection=r.get(
            "fit", "min_sales_per_collection", min_sales_per_collection, 1
        ),
        min_sales_per_period=r.get("fit", "min_sales_per_period", min_sales_per_period, 1),
    )
    result = _load_filtered_market(r, assets_path, sales_path, fmt, raw_filter)
    if not result.sales:
        raise ValidationError("no sales to fit on")
    epoch = r.get("grid", "epoch", epoch)
    horizon_v = r.get("grid", "horizon", horizon)
    if epoch is not None and horizon_v is not None:
        grid = market.PeriodGrid(epoch=parse_iso_date(str(epoch)), horizon=int(horizon_v))
    else:
        grid = market.PeriodGrid.from_sales(result.sales)
    freqs = market.compute_aggregates(result.assets.values())
    with_periods = market.assign_periods(result.sales, grid)
    rows, maps, design_report = hedonic.build_design(with_periods, freqs, config)
    params, diagnostics = hedonic.fit(rows, maps, config, design_report, grid)
    out_path = _out_path(r, out_path, "model.json", out_dir)
    doc = hedonic.params_to_json_dict(params, diagnostics, config)
    doc["ingest_report"] = result.report.to_json_dict()
    doc["cli_config"] = r.resolved
    write_json(out_path, doc)
    click.echo(
        f"fitted {diagnostics.n_rows} sales, {len(params.alpha)} collections, "
        f"{len(params.gamma)} periods (converged={diagnostics.converged}) -> {out_path}"
    )


@main.command("index")
@click.option("--model", "model_path")
@click.option("--base-value", type=float, default=None)
@click.option("--ma-window", type=int, default=None)
@click.option("--config", "config_path", default=None)
@click.option("--out-dir", default=None)
@click.option("--out", "out_path", default=None, help="CSV path (default index.csv).")
@pipeline_command
def index_cmd(model_path, base_value, ma_window, config_path, out_dir, out_path):
    """Build the price index from a fitted model and write the index CSV."""
    r = Resolver(config_path)
    model_path = _require_file(r.get("index", "model", model_path), "model")
    base_value = r.get("index", "base_value", base_value, 100.0)
    ma_window = r.get("index", "ma_window", ma_window, 7)
    params = hedonic.params_from_json_dict(read_json(model_path))
    series = priceindex.build_index(params, base_value)
    out_path = _out_path(r, out_path, "index.csv", out_dir)
    _write_csv_with_meta(
        lambda p: priceindex.write_index_csv(series, p, ma_window),
        out_path,
        {"schema": "nftindex-index-meta/1", "config": r.resolved,
         "n_periods": len(series.periods), "n_gaps": len(series.gaps)},
    )
    click.echo(f"index over {len(series.periods)} periods ({len(series.gaps)} gaps) -> {out_path}")


def _bsadf_options(fn):
    for opt in reversed([
        click.option("--min-window", type=int, default=None),
        click.option("--min-duration", type=int, default=None),
        click.option("--confidence", type=float, default=None),
        click.option("--n-mc", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--lag-order", type=int, default=None),
        click.option("--eta", type=float, default=None),
        click.option("--sigma", type=float, default=None),
        click.option("--drift", type=float, default=None),
        click.option("--cv-cache", default=None, help="Directory for cached critical values."),
        click.option("--threads", type=int, default=None),
    ]):
        fn = opt(fn)
    return fn


def _resolve_bsadf(r: Resolver, min_window, min_duration, confidence, n_mc, seed,
                   lag_order, eta, sigma, drift):
    null = bub.NullParams(
        eta=r.get("bsadf", "eta", eta, 1.0),
        sigma=r.get("bsadf", "sigma", sigma, 1.0),
        drift=r.get("bsadf", "drift", drift, 1.0),
    )
    bcfg = bub.BsadfConfig(
        min_window=r.get("bsadf", "min_window", min_window, 40),
        min_duration=r.get("bsadf", "min_duration", min_duration, 5),
        confidence=r.get("bsadf", "confidence", confidence, 0.99),
        n_mc=r.get("bsadf", "n_mc", n_mc, 5000),
        seed=r.get("bsadf", "seed", seed, 20210601),
        null_params=null,
    )
    acfg = bub.AdfConfig(lag_order=r.get("bsadf", "lag_order", lag_order, 0))
    return bcfg, acfg


@main.command()
@click.option("--index", "index_path", help="Index CSV from the index command.")
@click.option("--log-levels", is_flag=True, default=False, help="Test log levels instead of raw.")
@click.option("--smooth-window", type=int, default=None, help="Opt-in MA smoothing before testing.")
@_bsadf_options
@click.option("--config", "config_path", default=None)
@click.option("--out-dir", default=None)
@click.option("--out", "out_path", default=None, help="Report path (default bubbles.json).")
@pipeline_command
def bubbles(index_path, log_levels, smooth_window, min_window, min_duration, confidence,
            n_mc, seed, lag_order, eta, sigma, drift, cv_cache, threads,
            config_path, out_dir, out_path):
    """Run BSADF bubble detection on an index CSV."""
    r = Resolver(config_path)
    index_path = _require_file(r.get("bsadf", "index", index_path), "index")
    bcfg, acfg = _resolve_bsadf(r, min_window, min_duration, confidence, n_mc, seed,
                                lag_order, eta, sigma, drift)
    cache_dir = r.get("bsadf", "cv_cache", cv_cache)
    threads = r.get("common", "threads", threads, 1)
    series = priceindex.read_index_csv(index_path)
    report = bub.analyze(
        series,
        bcfg,
        acfg,
        cache_dir=cache_dir,
        threads=int(threads),
        log_levels=bool(r.get("bsadf", "log_levels", log_levels or None, False)),
        smooth_window=r.get("bsadf", "smooth_window", smooth_window),
    )
    out_path = _out_path(r, out_path, "bubbles.json", out_dir)
    doc = report.to_json_dict()
    doc["cli_config"] = r.resolved
    write_json(out_path, doc)
    n_open = sum(1 for e in report.episodes if not e.closed)
    click.echo(
        f"{len(report.episodes)} episode(s) ({n_open} open) at confidence "
        f"{report.confidence} -> {out_path}"
    )


@main.command()
@click.option("--horizon", type=int, default=None, help="Last period index T.")
@click.option("--confidences", default=None, help="Comma-separated, e.g. 0.9,0.95,0.99.")
@_bsadf_options
@click.option("--config", "config_path", default=None)
@click.option("--out-dir", default=None)
@click.option("--out", "out_path", default=None, help="Table path (default critvals.json).")
@pipeline_command
def critvals(horizon, confidences, min_window, min_duration, confidence, n_mc, seed,
             lag_order, eta, sigma, drift, cv_cache, threads, config_path, out_dir, out_path):
    """Simulate Monte-Carlo critical-value curves and write the table."""
    r = Resolver(config_path)
    horizon = r.get("bsadf", "horizon", horizon)
    if horizon is None:
        raise ValidationError("missing required option --horizon")
    raw = r.get("bsadf", "confidences", confidences, "0.9,0.95,0.99")
    if isinstance(raw, str):
        conf_list = tuple(float(c) for c in raw.split(",") if c.strip())
    else:
        conf_list = tuple(float(c) for c in raw)
    bcfg, acfg = _resolve_bsadf(r, min_window, min_duration, confidence, n_mc, seed,
                                lag_order, eta, sigma, drift)
    cache_dir = r.get("bsadf", "cv_cache", cv_cache)
    threads = int(r.get("common", "threads", threads, 1))
    table = bub.load_or_compute_critical_values(
        cache_dir=cache_dir,
        horizon=int(horizon),
        min_window=bcfg.min_window,
        confidences=conf_list,
        n_mc=bcfg.n_mc,
        seed=bcfg.seed,
        null_params=bcfg.null_params,
        adf_config=acfg,
        threads=threads,
    )
    out_path = _out_path(r, out_path, "critvals.json", out_dir)
    doc = table.to_json_dict()
    doc["cli_config"] = r.resolved
    write_json(out_path, doc)
    tail = {c: table.value_at(c, table.horizon) for c in table.confidences}
    click.echo(
        "critical values at t=T: "
        + ", ".join(f"{int(round(c * 100))}%={v:.3f}" for c, v in tail.items())
        + f" -> {out_path}"
    )


@main.command()
@click.option("--model", "model_path")
@click.option("--assets", "assets_path", help="Asset file for trait frequencies.")
@click.option("--listings", "listings_path", help="CSV: collection, token_id, price_usd.")
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default=None)
@click.option("--period", type=int, default=None, help="Use the fitted gamma of this period.")
@click.option("--date", "date_str", default=None, help="Like --period, as an ISO date.")
@click.option("--gamma-ma", type=int, default=None,
              help="Moving-average window for current gamma (default 7).")
@click.option("--intraday", "intraday_path", default=None,
              help="Opt-in: same-day sales file for the intraday gamma estimate.")
@click.option("--config", "config_path", default=None)
@click.option("--out-dir", default=None)
@click.option("--out", "out_path", default=None, help="CSV path (default assessments.csv).")
@pipeline_command
def misprice(model_path, assets_path, listings_path, fmt, period, date_str, gamma_ma,
             intraday_path, config_path, out_dir, out_path):
    """Score listed prices as undersold/oversold under a fitted model."""
    r = Resolver(config_path)
    model_path = _require_file(r.get("misprice", "model", model_path), "model")
    assets_path = _require_file(r.get("misprice", "assets", assets_path), "assets")
    listings_path = _require_file(r.get("misprice", "listings", listings_path), "listings")
    fmt = r.get("misprice", "format", fmt)
    params = hedonic.params_from_json_dict(read_json(model_path))
    assets, _ = market.load_assets(assets_path, fmt)
    freqs = market.compute_aggregates(assets.values())
    raw_listings = mispricing.read_listings_csv(listings_path)

    period = r.get("misprice", "period", period)
    date_str = r.get("misprice", "date", date_str)
    if date_str is not None:
        if params.grid is None:
            raise ValidationError("--date needs a model fitted on a dated grid")
        period = (parse_iso_date(str(date_str)) - params.grid.epoch).days
    gamma = None
    gamma_source = "fitted"
    if period is None:
        intraday_path = r.get("misprice", "intraday", intraday_path)
        if intraday_path is not None:
            _require_file(intraday_path, "intraday sales")
            today = market.load_sales(intraday_path, fmt)
            if not today:
                raise ValidationError("intraday sales file has no usable rows")
            pairs = []
            for s in today:
                if s.key not in freqs:
                    raise ValidationError(f"intraday sale references unknown asset {s.key}")
                pairs.append((s, freqs[s.key]))
            gamma = mispricing.estimate_current_gamma(params, "intraday", intraday_sales=pairs)
            gamma_source = "intraday"
        else:
            window = int(r.get("misprice", "gamma_ma", gamma_ma, 7))
            gamma = mispricing.estimate_current_gamma(params, "moving_average", window=window)
            gamma_source = "moving_average"
    else:
        period = int(period)

    listings = []
    skipped_pre = []
    for collection, token_id, price in raw_listings:
        key = (collection, token_id)
        if key not in freqs:
            skipped_pre.append(
                mispricing.SkippedListing(collection, token_id, "asset not in asset file")
            )
            continue
        listings.append((collection, token_id, freqs[key], price))
    ranked, skipped = mispricing.rank_listings(
        params, listings, period=period, gamma=gamma, gamma_source=gamma_source
    )
    skipped = skipped_pre + skipped
    out_path = _out_path(r, out_path, "assessments.csv", out_dir)
    _write_csv_with_meta(
        lambda p: mispricing.write_assessments_csv(p, ranked),
        out_path,
        {
            "schema": "nftindex-misprice-meta/1",
            "config": r.resolved,
            "gamma_source": gamma_source,
            "skipped": [
                {"collection": s.collection, "token_id": s.token_id, "reason": s.reason}
                for s in skipped
            ],
        },
    )
    click.echo(f"assessed {len(ranked)} listing(s), skipped {len(skipped)} -> {out_path}")


@main.command()
@click.option("--series", "series_args", multiple=True,
              help="NAME=PATH; an index CSV (level column) or a close CSV (date, close).")
@click.option("--config", "config_path", default=None)
@click.option("--out-dir", default=None)
@click.option("--out", "out_path", default=None, help="Report path (default correlations.json).")
@pipeline_command
def corr(series_args, config_path, out_dir, out_path):
    """Correlate daily returns across named series and report realized returns."""
    r = Resolver(config_path)
    spec_list = list(series_args) or [
        f"{k}={v}" for k, v in r.config.get("corr", {}).get("series", {}).items()
    ]
    r.resolved.setdefault("corr", {})["series"] = spec_list
    if len(spec_list) < 2:
        raise ValidationError("need at least two --series NAME=PATH arguments")
    levels = {}
    for item in spec_list:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ValidationError(f"--series must be NAME=PATH, got {item!r}")
        _require_file(path, f"series {name}")
        with open(path) as fh:
            header = fh.readline()
        if "level" in header.split(","):
            series = priceindex.read_index_csv(path)
            if series.grid is None:
                raise ValidationError(f"series {name}: index CSV has no dates")
            levels[name] = {
                series.grid.date_of(p): series.levels[p] for p in series.periods
            }
        else:
            levels[name] = priceindex.load_close_series_csv(path)
    returns = {name: priceindex.daily_returns(vals) for name, vals in levels.items()}
    matrix = priceindex.correlation_matrix(returns)
    realized = {}
    for name, vals in levels.items():
        keys = sorted(vals)
        realized[name] = {
            "from": keys[0].isoformat(),
            "to": keys[-1].isoformat(),
            "return": priceindex.realized_return(vals, keys[0], keys[-1]),
        }
    out_path = _out_path(r, out_path, "correlations.json", out_dir)
    doc = {
        "schema": "nftindex-corr/1",
        "correlation": matrix.to_json_dict(),
        "realized_returns": realized,
        "config": r.resolved,
    }
    write_json(out_path, doc)
    click.echo(f"correlated {len(levels)} series -> {out_path}")


@main.command()
@click.option("--collections", "n_collections", type=int, default=None)
@click.option("--assets-per", type=int, default=None)
@click.option("--periods", type=int, default=None)
@click.option("--sigma", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--law", type=click.Choice(["poisson", "fixed", "full_panel"]), default=None)
@click.option("--rate", type=float, default=None)
@click.option("--beta", default=None, help="Comma-separated beta_min,beta_avg,beta_max.")
@click.option("--alpha-spread", type=float, default=None)
@click.option("--gamma-kind", type=click.Choice(["constant", "random_walk", "explosive_segment"]),
              default=None)
@click.option("--gamma-drift", type=float, default=None)
@click.option("--gamma-vol", type=float, default=None)
@click.option("--segment-start", type=int, default=None)
@click.option("--segment-length", type=int, default=None)
@click.option("--segment-rate", type=float, default=None)
@click.option("--epoch", default=None)
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default=None)
@click.option("--config", "config_path", default=None)
@click.option("--out-dir", default=None)
@pipeline_command
def simulate(n_collections, assets_per, periods, sigma, seed, law, rate, beta, alpha_spread,
             gamma_kind, gamma_drift, gamma_vol, segment_start, segment_length, segment_rate,
             epoch, fmt, config_path, out_dir):
    """Generate a synthetic market with known ground truth."""
    r = Resolver(config_path)
    raw_beta = r.get("simulate", "beta", beta, "-1.0,-0.25,-0.5")
    if isinstance(raw_beta, str):
        parts = [float(b) for b in raw_beta.split(",")]
    else:
        parts = [float(b) for b in raw_beta]
    if len(parts) != 3:
        raise ValidationError("beta needs exactly three values")
    gspec = synthetic.GammaPathSpec(
        kind=r.get("simulate", "gamma_kind", gamma_kind, "random_walk"),
        drift=r.get("simulate", "gamma_drift", gamma_drift, 0.0),
        vol=r.get("simulate", "gamma_vol", gamma_vol, 0.01),
        segment_start=r.get("simulate", "segment_start", segment_start, 0),
        segment_length=r.get("simulate", "segment_length", segment_length, 1),
        segment_rate=r.get("simulate", "segment_rate", segment_rate, 0.0),
    )
    spec = synthetic.GeneratorSpec(
        n_collections=int(r.get("simulate", "n_collections", n_collections, 5)),
        assets_per_collection=int(r.get("simulate", "assets_per", assets_per, 100)),
        n_periods=int(r.get("simulate", "periods", periods, 50)),
        gamma=gspec,
        sigma_noise=r.get("simulate", "sigma", sigma, 0.1),
        seed=int(r.get("common", "seed", seed, 0)),
        beta=tuple(parts),
        alpha_spread=r.get("simulate", "alpha_spread", alpha_spread, 1.0),
        sales_law=r.get("simulate", "law", law, "poisson"),
        sales_rate=r.get("simulate", "rate", rate, 5.0),
        epoch=parse_iso_date(str(r.get("simulate", "epoch", epoch, "2021-06-01"))),
    )
    out_dir = r.get("common", "out_dir", out_dir, ".")
    fmt = r.get("simulate", "format", fmt, "jsonl")
    marketworld = synthetic.generate(spec)
    paths = synthetic.write_market(marketworld, out_dir, fmt)
    write_json(os.path.join(out_dir, "simulate.meta.json"),
               {"schema": "nftindex-simulate-meta/1", "config": r.resolved})
    click.echo(
        f"generated {len(marketworld.assets)} assets, {len(marketworld.sales)} sales "
        f"-> {paths['assets']}, {paths['sales']}, {paths['ground_truth']}"
    )


if __name__ == "__main__":
    main()
