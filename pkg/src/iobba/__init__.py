"""Indoors/outdoors-aware adaptive streaming: traces, radio model, MAP detector, policies, simulator, QoE."""

from .trace import CoverageState, NetworkType, Trace, TraceSample, parse_trace, serialize_trace, synthesize_trace
from .radio import DEFAULT_PARAMS, NetworkParams, cell_throughput, per_user_throughput, throughput_series
from .detector import DetectorModel, confusion_matrix, detect_series, fit_detector, map_classify
from .policy import DEFAULT_LADDER, Ladder, SegmentMap, build_exponential_map, build_linear_map, next_quality
from .simulator import PolicyKind, SessionConfig, SessionLog, run_experiment, simulate_session
from .qoe import QoeReport, aggregate, qoe_from_log

__version__ = "0.1.0"
