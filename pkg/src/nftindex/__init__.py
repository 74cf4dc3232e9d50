"""Hedonic NFT price indices, explosive-root bubble detection and
undersold/oversold scoring of listed prices."""

from .bubbles import (
    AdfConfig,
    BsadfConfig,
    BubbleEpisode,
    BubbleReport,
    CriticalValueTable,
    NullParams,
    adf_statistic,
    analyze,
    bsadf,
    bsadf_series,
    critical_values,
    detect_bubbles,
)
from .errors import (
    DegenerateRegressionError,
    NftIndexError,
    NumericalError,
    OutputError,
    RankDeficientError,
    ValidationError,
)
from .hedonic import (
    DesignRow,
    DummyMaps,
    FitConfig,
    FitDiagnostics,
    GaugeRecord,
    HedonicIndexModel,
    HedonicParams,
    build_design,
    fit,
    params_from_json_dict,
    params_to_json_dict,
    predict_log_price,
)
from .huber import HuberIRLS
from .market import (
    Asset,
    Collection,
    PeriodGrid,
    SaleRecord,
    TraitFrequencyAggregate,
    aggregate_frequencies,
    assign_periods,
    compute_aggregates,
    ingest,
    trait_frequency,
)
from .mispricing import (
    MispricingAssessment,
    assess,
    estimate_current_gamma,
    rank_listings,
    undersold_probability,
)
from .priceindex import (
    CorrelationMatrix,
    IndexSeries,
    ReturnSeries,
    build_index,
    correlation_matrix,
    moving_average,
    realized_return,
    returns,
)
from .synthetic import GammaPathSpec, GeneratorSpec, SyntheticMarket, generate

__version__ = "0.1.0"
