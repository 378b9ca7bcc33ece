"""Sleep-apnea detection from single-lead ECG using R- and S-peak features."""

from .feature_extract import FeatureSegment, FeatureSet, build_dataset
from .metrics_eval import ConfusionCounts, MetricsReport, compare_feature_sets, compute_metrics, confusion
from .peak_detect import BeatSeries, RrBounds, correct_rr, detect_r_peaks, detect_s_peaks
from .signal_filter import FirSpec, design_bandpass, filter_zero_phase
from .wfdb_io import EcgRecord, load_record

__version__ = "0.1.0"

__all__ = [
    "BeatSeries", "ConfusionCounts", "EcgRecord", "FeatureSegment", "FeatureSet", "FirSpec",
    "MetricsReport", "RrBounds", "build_dataset", "compare_feature_sets", "compute_metrics",
    "confusion", "correct_rr", "design_bandpass", "detect_r_peaks", "detect_s_peaks",
    "filter_zero_phase", "load_record",
]
