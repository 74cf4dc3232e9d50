"""Undersold/oversold scoring of listed prices under the fitted model.

A listed log price is compared with the model's Normal(fair log price,
sigma^2) law; the undersold probability is the upper-tail mass
``0.5 * (1 - erf((log P - log Pbar) / (sigma * sqrt(2))))``.  ``math.erf``
is the platform's correctly-rounded implementation; the test suite pins it
against a frozen high-precision reference table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from ._util import atomic_write_text
from .errors import ValidationError
from .hedonic import HedonicParams, predict_log_price
from .market import AssetKey, SaleRecord, TraitFrequencyAggregate

GAMMA_SOURCES = ("fitted", "moving_average", "intraday")


@dataclass(frozen=True)
class MispricingAssessment:
    collection: str
    token_id: str
    period: int | None
    listed_price: float
    fair_log_price: float
    p_under: float
    p_over: float
    gamma_source: str


def undersold_probability(listed_price: float, fair_log_price: float, sigma: float) -> float:
    if not (listed_price > 0):
        raise ValidationError(f"listed price must be > 0, got {listed_price}")
    if not (sigma > 0):
        raise ValidationError(f"sigma must be > 0 for probability scoring, got {sigma}")
    z = (math.log(listed_price) - fair_log_price) / (sigma * math.sqrt(2.0))
    return 0.5 * (1.0 - math.erf(z))


def assess(
    params: HedonicParams,
    collection: str,
    freqs: TraitFrequencyAggregate,
    listed_price: float,
    period: int | None = None,
    gamma: float | None = None,
    gamma_source: str = "fitted",
    token_id: str = "",
) -> MispricingAssessment:
    """Score one listing; supply either a fitted period or an explicit gamma."""
    if gamma_source not in GAMMA_SOURCES:
        raise ValidationError(f"gamma_source must be one of {GAMMA_SOURCES}")
    fair = predict_log_price(params, collection, freqs, period=period, gamma=gamma)
    p_under = undersold_probability(listed_price, fair, params.sigma)
    return MispricingAssessment(
        collection=collection,
        token_id=token_id,
        period=period,
        listed_price=float(listed_price),
        fair_log_price=fair,
        p_under=p_under,
        p_over=1.0 - p_under,
        gamma_source=gamma_source,
    )


def estimate_current_gamma(
    params: HedonicParams,
    method: str = "moving_average",
    window: int = 7,
    intraday_sales: Sequence[tuple[SaleRecord, TraitFrequencyAggregate]] | None = None,
) -> float:
    """Out-of-sample market coefficient for "today".

    ``moving_average``: mean of the last `window` fitted gamma values.
    ``intraday``: mean over today's sales of log price minus every non-gamma
    model term.
    """
    if method == "moving_average":
        if window < 1:
            raise ValidationError("window must be >= 1")
        fitted = sorted(params.gamma)
        if not fitted:
            raise ValidationError("no fitted periods")
        tail = fitted[-window:]
        return sum(params.gamma[p] for p in tail) / len(tail)
    if method == "intraday":
        if not intraday_sales:
            raise ValidationError("intraday estimation needs at least one same-day sale")
        acc = 0.0
        for sale, freqs in intraday_sales:
            if sale.collection not in params.alpha:
                raise ValidationError(
                    f"collection {sale.collection!r} has no fitted coefficient"
                )
            base = predict_log_price(params, sale.collection, freqs, gamma=0.0)
            acc += math.log(sale.price_usd) - base
        return acc / len(intraday_sales)
    raise ValidationError(f"unknown method {method!r}")


@dataclass
class SkippedListing:
    collection: str
    token_id: str
    reason: str


def rank_listings(
    params: HedonicParams,
    listings: Sequence[tuple[str, str, TraitFrequencyAggregate, float]],
    period: int | None = None,
    gamma: float | None = None,
    gamma_source: str = "fitted",
) -> tuple[list[MispricingAssessment], list[SkippedListing]]:
    """Sort (collection, token_id, freqs, price) listings by undersold
    probability, most undersold first; unassessable ones are reported, not fatal.

    Ties break deterministically on (collection, token_id).
    """
    assessed = []
    skipped = []
    for collection, token_id, freqs, price in listings:
        try:
            assessed.append(
                assess(
                    params,
                    collection,
                    freqs,
                    price,
                    period=period,
                    gamma=gamma,
                    gamma_source=gamma_source,
                    token_id=token_id,
                )
            )
        except ValidationError as exc:
            skipped.append(SkippedListing(collection=collection, token_id=token_id, reason=str(exc)))
    assessed.sort(key=lambda a: (-a.p_under, a.collection, a.token_id))
    return assessed, skipped


# ---------------------------------------------------------------------------
# CSV interfaces

LISTINGS_HEADER = ["collection", "token_id", "price_usd"]
ASSESSMENT_HEADER = LISTINGS_HEADER + ["fair_price", "p_under", "p_over", "gamma_source"]


def read_listings_csv(path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LISTINGS_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for row in reader:
            try:
                price = float(row["price_usd"])
            except (TypeError, ValueError) as exc:
                raise ValidationError(
                    f"{path}: line {reader.line_num}: bad price {row['price_usd']!r}"
                ) from exc
            out.append((row["collection"], row["token_id"], price))
    return out


def write_assessments_csv(path, assessments: Sequence[MispricingAssessment]) -> None:
    lines = [",".join(ASSESSMENT_HEADER)]
    for a in assessments:
        lines.append(
            f"{a.collection},{a.token_id},{a.listed_price!r},"
            f"{math.exp(a.fair_log_price)!r},{a.p_under!r},{a.p_over!r},{a.gamma_source}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
