"""Retrospective log analysis: alignment, latency, corruption, timing budget.

Works purely on the JSONL telemetry logs.  Batch timestamps are spread onto
individual samples by linear interpolation between consecutive batch stamps
(the final batch extends at the nominal 1000/256 ms spacing).  The *same*
interpolation is applied to send and receive logs, so a constant-latency
link yields exactly constant per-sample delays.

Sent and received streams are aligned either by sequence number (exact) or,
when either side lacks sequence provenance, by a value-based sliding-window
walk that re-locks after dropped batches.  Every sent sample ends up in
exactly one bucket: matched, corrupted, or missing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ecg import BATCH_SAMPLES, SAMPLE_INTERVAL_MS
from .transport.wire import read_log

MATCHED, CORRUPTED, MISSING = 0, 1, 2

DEFAULT_BIN_WIDTH_MS = 2.0
DEFAULT_SMOOTHING_BINS = 3
DEFAULT_MODE_SEPARATION_MS = 20.0
DEFAULT_MODE_MIN_FRAC = 0.05
DEFAULT_CLAMP_MS = 250.0
DEFAULT_BLE_ALLOWANCE_MS = 50.0
DEFAULT_BUDGET_MS = 300.0

_WINDOW_LEN = 64
_MAX_SHIFT = 64
_LOCK_SCORE = 0.75
_LOOKAHEAD = 8
_MAX_BUDGET_PAIRS = 20_000_000


class EmptyReportError(ValueError):
    """No data to aggregate (no matched samples, empty inputs, ...)."""


def load_log(path):
    """Tolerant JSONL reader: returns ``(entries, skipped_line_count)``."""
    return read_log(path)


def split_sessions(entries) -> dict:
    """Group log entries by their ``session`` field, preserving order."""
    out = {}
    for entry in entries:
        out.setdefault(entry.get("session", ""), []).append(entry)
    return out


def interpolate_sample_timestamps(batch_times, batch_size: int = BATCH_SAMPLES) -> np.ndarray:
    """Spread batch timestamps onto per-sample timestamps.

    Accepts either a sequence of batch timestamps or receive-log entries
    (their ``recv_ts_ms`` is used).  Sample ``i`` of batch ``b`` lands at
    ``T_b + i * (T_{b+1} - T_b) / batch_size``; the final batch uses the
    nominal sample interval.
    """
    batch_times = [t["recv_ts_ms"] if isinstance(t, dict) else t for t in batch_times]
    times = np.asarray(batch_times, dtype=np.float64)
    if times.size == 0:
        return np.empty(0)
    frac = np.arange(batch_size, dtype=np.float64) / batch_size
    gaps = np.empty_like(times)
    if times.size > 1:
        gaps[:-1] = np.diff(times)
    gaps[-1] = SAMPLE_INTERVAL_MS * batch_size
    return (times[:, None] + frac[None, :] * gaps[:, None]).reshape(-1)


@dataclass
class SampleStream:
    """Per-sample view of one session's log: values plus optional provenance."""

    values: np.ndarray
    seq: Optional[np.ndarray] = None       # per-sample batch sequence number
    ts_ms: Optional[np.ndarray] = None     # per-sample interpolated timestamp

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.seq is not None:
            self.seq = np.asarray(self.seq, dtype=np.int64)
        if self.ts_ms is not None:
            self.ts_ms = np.asarray(self.ts_ms, dtype=np.float64)

    def __len__(self):
        return int(self.values.size)


def stream_from_send_log(entries) -> SampleStream:
    """Build the sent-sample stream from send log entries (single session)."""
    return _stream_from_entries(entries, ts_key="send_ts_ms")


def stream_from_receive_log(entries) -> SampleStream:
    """Build the received stream; entries flagged corrupt carry no samples
    and are skipped (their batches simply never arrive for alignment)."""
    usable = [e for e in entries if not e.get("corrupt") and "samples" in e]
    return _stream_from_entries(usable, ts_key="recv_ts_ms")


def _stream_from_entries(entries, ts_key) -> SampleStream:
    values, seqs, times = [], [], []
    have_seq = True
    have_ts = True
    for entry in entries:
        samples = entry["samples"]
        values.extend(samples)
        seq = entry.get("seq_no")
        if seq is None:
            have_seq = False
        else:
            seqs.extend([seq] * len(samples))
        ts = entry.get(ts_key)
        if ts is None:
            have_ts = False
        else:
            times.append(ts)
    stream = SampleStream(values=np.array(values, dtype=np.int64))
    if entries and have_seq:
        stream.seq = np.array(seqs, dtype=np.int64)
    if entries and have_ts:
        stream.ts_ms = interpolate_sample_timestamps(times)
    return stream


@dataclass
class AlignmentResult:
    """Per-sent-sample verdicts; the three counts always sum to total_sent."""

    statuses: np.ndarray            # uint8 codes: MATCHED / CORRUPTED / MISSING
    delays_ms: np.ndarray           # per-sample delay, NaN where unknown
    total_sent: int

    @property
    def matched_count(self) -> int:
        return int(np.count_nonzero(self.statuses == MATCHED))

    @property
    def corrupted_count(self) -> int:
        return int(np.count_nonzero(self.statuses == CORRUPTED))

    @property
    def missing_count(self) -> int:
        return int(np.count_nonzero(self.statuses == MISSING))

    def matched_delays(self) -> np.ndarray:
        mask = (self.statuses == MATCHED) & np.isfinite(self.delays_ms)
        return self.delays_ms[mask]


def align_and_diff(sent: SampleStream, received: SampleStream,
                   window_len: int = _WINDOW_LEN,
                   max_shift: int = _MAX_SHIFT) -> AlignmentResult:
    """Pair every sent sample with its received counterpart, if any.

    With sequence numbers on both sides the pairing is exact.  Otherwise a
    pointer walk compares values directly: a one-off mismatch whose
    neighbourhood still agrees is corruption in place; a seam where the
    neighbourhood disagrees triggers a sliding-window search that skips up
    to ``max_shift`` sent samples (lost batches) to re-lock.
    """
    if sent.seq is not None and received.seq is not None:
        return _align_by_seq(sent, received)
    return _align_by_value(sent, received, window_len, max_shift)


def _align_by_seq(sent: SampleStream, received: SampleStream) -> AlignmentResult:
    n = len(sent)
    statuses = np.full(n, MISSING, dtype=np.uint8)
    delays = np.full(n, np.nan)

    recv_index = {}
    for start in range(0, len(received), BATCH_SAMPLES):
        seq = int(received.seq[start])
        if seq not in recv_index:
            recv_index[seq] = start

    for start in range(0, n, BATCH_SAMPLES):
        seq = int(sent.seq[start])
        rstart = recv_index.get(seq)
        if rstart is None:
            continue
        width = min(BATCH_SAMPLES, n - start, len(received) - rstart)
        s_vals = sent.values[start:start + width]
        r_vals = received.values[rstart:rstart + width]
        equal = s_vals == r_vals
        block = statuses[start:start + width]
        block[equal] = MATCHED
        block[~equal] = CORRUPTED
        if sent.ts_ms is not None and received.ts_ms is not None:
            span = delays[start:start + width]
            span[equal] = (received.ts_ms[rstart:rstart + width]
                           - sent.ts_ms[start:start + width])[equal]
    return AlignmentResult(statuses=statuses, delays_ms=delays, total_sent=n)


def _window_score(a: np.ndarray, b: np.ndarray, width: int) -> float:
    width = min(width, a.size, b.size)
    if width <= 0:
        return 0.0
    return float(np.count_nonzero(a[:width] == b[:width])) / width


def _align_by_value(sent: SampleStream, received: SampleStream,
                    window_len: int, max_shift: int) -> AlignmentResult:
    s_vals, r_vals = sent.values, received.values
    n, m = s_vals.size, r_vals.size
    statuses = np.full(n, MISSING, dtype=np.uint8)
    delays = np.full(n, np.nan)
    have_ts = sent.ts_ms is not None and received.ts_ms is not None

    i = j = 0
    while i < n and j < m:
        if s_vals[i] == r_vals[j]:
            statuses[i] = MATCHED
            if have_ts:
                delays[i] = received.ts_ms[j] - sent.ts_ms[i]
            i += 1
            j += 1
            continue
        # Mismatch: still locked if the immediate lookahead agrees.
        ahead = _window_score(s_vals[i + 1:], r_vals[j + 1:], _LOOKAHEAD)
        if ahead >= _LOCK_SCORE or (i + 1 >= n or j + 1 >= m):
            statuses[i] = CORRUPTED
            i += 1
            j += 1
            continue
        # Seam: find the smallest forward shift of the sent stream that
        # re-locks against the received stream (batches lost on the link).
        shift = None
        for s in range(1, min(max_shift, n - i - 1) + 1):
            if _window_score(s_vals[i + s:], r_vals[j:], window_len) >= _LOCK_SCORE:
                shift = s
                break
        if shift is not None:
            statuses[i:i + shift] = MISSING
            i += shift
            continue
        # No realignment found; count it as corruption and keep walking.
        statuses[i] = CORRUPTED
        i += 1
        j += 1
    return AlignmentResult(statuses=statuses, delays_ms=delays, total_sent=n)


@dataclass(frozen=True)
class Histogram:
    """Fixed-width bins anchored at integer multiples of the width."""

    bin_width_ms: float
    start_ms: float
    counts: tuple

    @property
    def bin_starts(self) -> list:
        return [self.start_ms + k * self.bin_width_ms for k in range(len(self.counts))]

    def to_dict(self) -> dict:
        return {
            "bin_width_ms": self.bin_width_ms,
            "start_ms": self.start_ms,
            "counts": list(self.counts),
        }


def build_histogram(values, bin_width_ms: float = DEFAULT_BIN_WIDTH_MS) -> Histogram:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return Histogram(bin_width_ms=bin_width_ms, start_ms=0.0, counts=())
    idx = np.floor(arr / bin_width_ms).astype(np.int64)
    lo = int(idx.min())
    counts = np.bincount(idx - lo)
    return Histogram(
        bin_width_ms=bin_width_ms,
        start_ms=lo * bin_width_ms,
        counts=tuple(int(c) for c in counts),
    )


def write_histogram_csv(histogram: Histogram, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("bin_start_ms,count\n")
        for start, count in zip(histogram.bin_starts, histogram.counts):
            fh.write(f"{start:g},{count}\n")


def detect_modes(histogram: Histogram,
                 smoothing_bins: int = DEFAULT_SMOOTHING_BINS,
                 separation_ms: float = DEFAULT_MODE_SEPARATION_MS,
                 min_frac: float = DEFAULT_MODE_MIN_FRAC) -> list:
    """Find dominant peaks of a histogram.

    Counts are smoothed with a centred moving average, then a bin is a mode
    when it is the maximum over a +/- ``separation_ms`` window (leftmost on
    plateaus) and holds at least ``min_frac`` of the tallest smoothed bin.
    Returned values are bin centres, ascending.
    """
    counts = np.asarray(histogram.counts, dtype=np.float64)
    if counts.size == 0 or counts.sum() == 0:
        return []
    kernel = np.ones(smoothing_bins) / smoothing_bins
    smooth = np.convolve(counts, kernel, mode="same")
    peak = smooth.max()
    if peak <= 0:
        return []
    w = max(1, int(round(separation_ms / histogram.bin_width_ms)))
    modes = []
    for k in range(counts.size):
        lo, hi = max(0, k - w), min(counts.size, k + w + 1)
        window = smooth[lo:hi]
        if smooth[k] < peak * min_frac or smooth[k] < window.max():
            continue
        if k > lo and smooth[k] <= smooth[lo:k].max():
            continue  # keep only the leftmost bin of a plateau
        modes.append(histogram.start_ms + k * histogram.bin_width_ms
                     + histogram.bin_width_ms / 2.0)
    return modes


@dataclass(frozen=True)
class LatencyReport:
    mean_ms: float
    std_ms: float
    modes_ms: tuple
    histogram: Histogram
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "modes_ms": list(self.modes_ms),
            "histogram": self.histogram.to_dict(),
            "sample_count": self.sample_count,
        }


def latency_report(alignment: AlignmentResult,
                   bin_width_ms: float = DEFAULT_BIN_WIDTH_MS,
                   smoothing_bins: int = DEFAULT_SMOOTHING_BINS,
                   mode_separation_ms: float = DEFAULT_MODE_SEPARATION_MS,
                   mode_min_frac: float = DEFAULT_MODE_MIN_FRAC) -> LatencyReport:
    delays = alignment.matched_delays()
    if delays.size == 0:
        raise EmptyReportError("no matched samples with timestamps")
    histogram = build_histogram(delays, bin_width_ms)
    modes = detect_modes(histogram, smoothing_bins, mode_separation_ms, mode_min_frac)
    return LatencyReport(
        mean_ms=float(delays.mean()),
        std_ms=float(delays.std()),
        modes_ms=tuple(modes),
        histogram=histogram,
        sample_count=int(delays.size),
    )


@dataclass(frozen=True)
class CorruptionReport:
    total_sent: int
    matched: int
    corrupted: int
    missing: int

    @property
    def pct_missing_or_unequal(self) -> float:
        return 100.0 * (self.corrupted + self.missing) / self.total_sent

    def to_dict(self) -> dict:
        return {
            "total_sent": self.total_sent,
            "matched": self.matched,
            "corrupted": self.corrupted,
            "missing": self.missing,
            "pct_missing_or_unequal": self.pct_missing_or_unequal,
        }


def corruption_report(alignment: AlignmentResult) -> CorruptionReport:
    if alignment.total_sent == 0:
        raise EmptyReportError("no sent samples")
    return CorruptionReport(
        total_sent=alignment.total_sent,
        matched=alignment.matched_count,
        corrupted=alignment.corrupted_count,
        missing=alignment.missing_count,
    )


@dataclass(frozen=True)
class DurationReport:
    histogram: Histogram
    total: int
    clamped_count: int
    mean_ms: float

    @property
    def clamped_fraction(self) -> float:
        return self.clamped_count / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "histogram": self.histogram.to_dict(),
            "total": self.total,
            "clamped_count": self.clamped_count,
            "clamped_fraction": self.clamped_fraction,
            "mean_ms": self.mean_ms,
        }


def _durations_from(inference_log) -> np.ndarray:
    """Accept raw duration values, log entry dicts, or log entry objects."""
    values = []
    for item in inference_log:
        if isinstance(item, dict):
            values.append(item["duration_ms"])
        elif hasattr(item, "duration_ms"):
            values.append(item.duration_ms)
        else:
            values.append(item)
    return np.asarray(values, dtype=np.float64)


def inference_duration_histogram(inference_log,
                                 clamp_ms: float = DEFAULT_CLAMP_MS,
                                 bin_width_ms: float = DEFAULT_BIN_WIDTH_MS) -> DurationReport:
    """Histogram of inference durations with a ceiling.

    Durations above ``clamp_ms`` land in the final bin (the one starting at
    the clamp value); how many were clamped is reported separately.  An
    empty log yields an empty histogram, not an error.
    """
    arr = _durations_from(inference_log)
    if arr.size == 0:
        return DurationReport(
            histogram=Histogram(bin_width_ms=bin_width_ms, start_ms=0.0, counts=()),
            total=0, clamped_count=0, mean_ms=0.0,
        )
    clamped = np.minimum(arr, clamp_ms)
    return DurationReport(
        histogram=build_histogram(clamped, bin_width_ms),
        total=int(arr.size),
        clamped_count=int(np.count_nonzero(arr > clamp_ms)),
        mean_ms=float(arr.mean()),
    )


@dataclass(frozen=True)
class BudgetReport:
    mean_ms: float
    p99_ms: float
    ble_allowance_ms: float
    budget_ms: float
    pair_count: int

    @property
    def within_budget(self) -> bool:
        return self.p99_ms <= self.budget_ms

    def to_dict(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "p99_ms": self.p99_ms,
            "ble_allowance_ms": self.ble_allowance_ms,
            "budget_ms": self.budget_ms,
            "pair_count": self.pair_count,
            "within_budget": self.within_budget,
        }


def end_to_end_budget(alignment, inference_log,
                      ble_allowance_ms: float = DEFAULT_BLE_ALLOWANCE_MS,
                      budget_ms: float = DEFAULT_BUDGET_MS) -> BudgetReport:
    """Pair every transmission delay with every inference duration.

    ``alignment`` may be an :class:`AlignmentResult` (its matched delays are
    used) or a plain delay sequence; ``inference_log`` may hold entries or
    raw durations.  The mean is the exact sum of the component means plus
    the fixed capture allowance; the p99 is the empirical percentile of the
    pairwise sums (stride-thinned deterministically only past ~2e7 pairs).
    """
    if isinstance(alignment, AlignmentResult):
        delays = alignment.matched_delays()
    else:
        delays = np.asarray(alignment, dtype=np.float64)
    durations = _durations_from(inference_log)
    if delays.size == 0 or durations.size == 0:
        raise EmptyReportError("need both delays and inference durations")
    stride = 1
    while (delays.size // stride + 1) * durations.size > _MAX_BUDGET_PAIRS:
        stride += 1
    thinned = delays[::stride]
    sums = np.add.outer(thinned, durations + ble_allowance_ms).ravel()
    return BudgetReport(
        mean_ms=float(delays.mean() + durations.mean() + ble_allowance_ms),
        p99_ms=float(np.percentile(sums, 99)),
        ble_allowance_ms=float(ble_allowance_ms),
        budget_ms=float(budget_ms),
        pair_count=int(thinned.size * durations.size),
    )


@dataclass
class SessionAnalysis:
    """Everything the report carries for one session of one run."""

    alignment: AlignmentResult
    latency: LatencyReport
    corruption: CorruptionReport
    inference: DurationReport
    budget: Optional[BudgetReport]

    def to_dict(self) -> dict:
        doc = {
            "latency": self.latency.to_dict(),
            "corruption": self.corruption.to_dict(),
            "inference": self.inference.to_dict(),
        }
        if self.budget is not None:
            doc["budget"] = self.budget.to_dict()
        return doc


def analyze_session(send_entries, recv_entries, durations_ms=(),
                    bin_width_ms: float = DEFAULT_BIN_WIDTH_MS,
                    clamp_ms: float = DEFAULT_CLAMP_MS,
                    ble_allowance_ms: float = DEFAULT_BLE_ALLOWANCE_MS,
                    budget_ms: float = DEFAULT_BUDGET_MS) -> SessionAnalysis:
    """Full per-session pipeline: align, then latency/corruption/budget."""
    sent = stream_from_send_log(send_entries)
    received = stream_from_receive_log(recv_entries)
    alignment = align_and_diff(sent, received)
    latency = latency_report(alignment, bin_width_ms=bin_width_ms)
    corruption = corruption_report(alignment)
    inference = inference_duration_histogram(durations_ms, clamp_ms=clamp_ms,
                                             bin_width_ms=bin_width_ms)
    budget = None
    if inference.total:
        budget = end_to_end_budget(alignment.matched_delays(), durations_ms,
                                   ble_allowance_ms=ble_allowance_ms,
                                   budget_ms=budget_ms)
    return SessionAnalysis(alignment=alignment, latency=latency,
                           corruption=corruption, inference=inference,
                           budget=budget)
