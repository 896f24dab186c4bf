"""Component-wise partial aggregation for federated detector training."""

from .aggregation import ClientUpdate, aggregate, fed_avg, fed_median, merge
from .evaluation import BBox, Detection, EvalMatrix, average_precision, iou, map50, match_detections
from .schema import (
    AggRule,
    BlockSpec,
    CommReport,
    Component,
    ModelSchema,
    ParameterSet,
    Strategy,
    comm_report,
    component_counts,
    load_schema,
    pack,
    parse_strategy,
    unpack,
)

__version__ = "0.1.0"
