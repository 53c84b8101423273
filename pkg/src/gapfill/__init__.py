"""Missing-data imputation for multivariate road-traffic time series."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    Cohort,
    RawRecord,
    RoadSegment,
    SegmentSeries,
    denormalize,
    ingest_csv,
    normalize,
    select_cohort,
    synthesize_cohort,
)
from .masking import (  # noqa: F401
    GroundTruthLedger,
    MaskSpec,
    MaskedTriplet,
    apply_mask,
    build_triplet,
)
from .mrnn import MrnnModel, TrainConfig, impute, train  # noqa: F401
from .baselines import SoftImputeConfig, soft_impute, spline_impute  # noqa: F401
from .evaluation import (  # noqa: F401
    ComparisonReport,
    FoldPlan,
    cross_validate,
    emit_figure,
    emit_plot,
    emit_report,
    eta,
    rmse,
    sweep,
    training_loss,
)
