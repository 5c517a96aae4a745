"""Multiresolution idealization of lowpass-filtered piecewise-constant
recordings, with local deconvolution of events shorter than the filter
length, plus the simulation and benchmark harness for the quantitative
studies."""

from .analysis import (Event, EventTable, EventThresholds, density_export,
                       extract_events, fit_truncated_exponential,
                       missed_event_correction, truncation_probability)
from .bench import (DetectionMetrics, PeakExperimentSpec, run_hmm_study,
                    run_isolated_peak, run_null_rate, run_robustness,
                    run_separation)
from .deconv import (Idealization, IllConditionedCovariance, SegmentClasses,
                     classify_segments, jules, local_deconvolve)
from .detect import (DetectionConfig, MultiscaleContext,
                     NoFeasibleSegmentation, estimate_sigma, fit_segmentation,
                     make_context, multiscale_quantile, multiscale_statistic,
                     penalty, postfilter)
from .filters import AnalogFilter, TruncatedFilter, bessel_filter, truncate
from .noise import (HmmSpec, NoiseModel, derived_seed, ma_coefficients,
                    simulate_hmm, simulate_trace)
from .signal import StepSignal, Trace, convolve

__version__ = "0.1.0"

__all__ = [
    "AnalogFilter", "TruncatedFilter", "bessel_filter", "truncate",
    "StepSignal", "Trace", "convolve",
    "NoiseModel", "HmmSpec", "ma_coefficients", "simulate_trace",
    "simulate_hmm", "derived_seed",
    "DetectionConfig", "MultiscaleContext", "NoFeasibleSegmentation",
    "estimate_sigma", "penalty", "make_context", "multiscale_statistic",
    "multiscale_quantile", "fit_segmentation", "postfilter",
    "SegmentClasses", "Idealization", "IllConditionedCovariance",
    "classify_segments", "local_deconvolve", "jules",
    "Event", "EventTable", "EventThresholds", "extract_events",
    "fit_truncated_exponential", "truncation_probability",
    "missed_event_correction", "density_export",
    "PeakExperimentSpec", "DetectionMetrics", "run_isolated_peak",
    "run_separation", "run_hmm_study", "run_robustness", "run_null_rate",
]
