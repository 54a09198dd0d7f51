"""ecgpipe: desk-scale ECG telemetry over an emulated cellular MQTT link.

A paced 256 Hz single-lead stream is framed into 16-sample batches,
published through an emulated 3G/4G/5G channel to a broker, classified by a
from-scratch 1-D CNN, and analysed retrospectively for per-sample latency,
corruption, and end-to-end timing budget.
"""

from .analysis import (
    AlignmentResult,
    BudgetReport,
    CorruptionReport,
    DurationReport,
    EmptyReportError,
    Histogram,
    LatencyReport,
    align_and_diff,
    analyze_session,
    corruption_report,
    detect_modes,
    end_to_end_budget,
    inference_duration_histogram,
    interpolate_sample_timestamps,
    latency_report,
    load_log,
)
from .channel import ChannelEmulator, ChannelProfile, LatencyComponent, load_profile
from .cnn import (
    ClassProbs,
    InferenceLogEntry,
    Model,
    classify_stream,
    default_model,
    forward,
    load_model,
    save_model,
    segment_stream,
    softmax,
)
from .ecg import (
    BATCH_INTERVAL_MS,
    BATCH_SAMPLES,
    SAMPLE_RATE_HZ,
    SampleBatch,
    SampleSeries,
    batchify,
    generate_synthetic_ecg,
    load_series,
    save_series,
)
from .experiment import ExperimentConfig, emit_report, run_experiment

__version__ = "0.1.0"
