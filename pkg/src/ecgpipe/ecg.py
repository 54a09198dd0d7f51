"""Synthetic single-lead ECG generation, CSV persistence and batch framing.

Amplitudes are integer microvolts (int32 on the wire).  The stream is paced at
a fixed 256 Hz; publishers frame it into 16-sample batches, one every 62.5 ms
of virtual time.  Virtual timestamps always advance at real scale -- the
``pace`` factor only accelerates the wall-clock schedule used when replaying a
recording against a live broker, so recorded latencies keep their real-world
meaning at any playback speed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE_HZ = 256
BATCH_SAMPLES = 16
BATCH_INTERVAL_MS = 1000.0 * BATCH_SAMPLES / SAMPLE_RATE_HZ  # 62.5
SAMPLE_INTERVAL_MS = 1000.0 / SAMPLE_RATE_HZ

_INT32_MIN = -(2 ** 31)
_INT32_MAX = 2 ** 31 - 1

# One beat template as Gaussian bumps in normalised phase [0, 1):
# (phase center, phase width, amplitude in microvolts).  The R spike dominates
# so a simple threshold detector finds exactly one peak per beat.
PQRST_WAVES = (
    (0.18, 0.040, 150.0),   # P
    (0.37, 0.010, -220.0),  # Q
    (0.40, 0.012, 1100.0),  # R
    (0.43, 0.010, -280.0),  # S
    (0.62, 0.045, 320.0),   # T
)


class ParseError(ValueError):
    """Raised when a series file is malformed; message names the line."""


class StreamError(ValueError):
    """Raised for invalid generation or framing arguments."""


@dataclass(eq=False)
class SampleSeries:
    """A contiguous run of ECG samples at a fixed rate.

    ``values`` is an int32 array of microvolt amplitudes; ``start_time_ms`` is
    the virtual timestamp of the first sample.
    """

    values: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ
    start_time_ms: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise StreamError("series must be a non-empty 1-D sample array")
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise StreamError(
                f"unsupported sample rate {self.sample_rate_hz}, expected {SAMPLE_RATE_HZ}"
            )
        if self.start_time_ms < 0:
            raise StreamError("start_time_ms must be >= 0")
        if self.values.min() < _INT32_MIN or self.values.max() > _INT32_MAX:
            raise StreamError("sample amplitude out of int32 range")
        self.values = self.values.astype(np.int32)

    def __len__(self) -> int:
        return int(self.values.size)

    def duration_s(self) -> float:
        return self.values.size / self.sample_rate_hz

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleSeries):
            return NotImplemented
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.start_time_ms == other.start_time_ms
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class SampleBatch:
    """16 consecutive samples with their sequence number and release stamp."""

    seq_no: int
    samples: tuple
    send_ts_ms: int

    def __post_init__(self):
        if len(self.samples) != BATCH_SAMPLES:
            raise StreamError(f"batch needs {BATCH_SAMPLES} samples, got {len(self.samples)}")


def generate_synthetic_ecg(duration_s, heart_rate_bpm=72.0, noise_std_uv=0.0, seed=0):
    """Build a deterministic synthetic single-lead ECG recording.

    Parameters
    ----------
    duration_s : float
        Length of the recording in seconds (> 0).
    heart_rate_bpm : float
        Steady heart rate, 20..240 bpm.  The beat period is rounded to a
        whole number of samples so the waveform is exactly periodic.
    noise_std_uv : float
        Standard deviation of additive Gaussian noise in microvolts.
    seed : int
        Noise RNG seed; the same arguments always produce the same series.
    """
    if not (duration_s > 0):
        raise StreamError("duration_s must be > 0")
    if not (20.0 <= heart_rate_bpm <= 240.0):
        raise StreamError("heart_rate_bpm must be within 20..240")
    if noise_std_uv < 0:
        raise StreamError("noise_std_uv must be >= 0")
    n = int(round(duration_s * SAMPLE_RATE_HZ))
    if n < 1:
        raise StreamError("duration too short for a single sample")

    period = int(round(SAMPLE_RATE_HZ * 60.0 / heart_rate_bpm))
    phase = np.arange(period) / period
    template = np.zeros(period)
    for center, width, amp_uv in PQRST_WAVES:
        template += amp_uv * np.exp(-0.5 * ((phase - center) / width) ** 2)

    reps = -(-n // period)  # ceil
    wave = np.tile(template, reps)[:n]
    if noise_std_uv > 0:
        rng = np.random.default_rng(seed)
        wave = wave + rng.normal(0.0, noise_std_uv, n)
    values = np.clip(np.rint(wave), _INT32_MIN, _INT32_MAX).astype(np.int32)
    return SampleSeries(values=values)


_HEADER_RE = re.compile(r"^rate=(\d+),start=(\d+)$")


def save_series(series: SampleSeries, path) -> None:
    """Write a series as CSV: a `rate=...,start=...` header then one value per line."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"rate={series.sample_rate_hz},start={series.start_time_ms}\n")
        fh.write("\n".join(str(int(v)) for v in series.values))
        fh.write("\n")


def load_series(path) -> SampleSeries:
    """Read a series CSV written by :func:`save_series`.

    Raises :class:`ParseError` naming the offending line on malformed input.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    m = _HEADER_RE.match(lines[0].strip())
    if not m:
        raise ParseError(f"{path}: line 1: expected 'rate=<hz>,start=<ms>' header")
    rate, start = int(m.group(1)), int(m.group(2))
    if rate != SAMPLE_RATE_HZ:
        raise ParseError(f"{path}: line 1: unsupported rate {rate}")
    values = []
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text:
            continue
        try:
            values.append(int(text))
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: not an integer amplitude: {text!r}") from None
    if not values:
        raise ParseError(f"{path}: no samples after header")
    try:
        return SampleSeries(values=np.array(values, dtype=np.int64), start_time_ms=start)
    except StreamError as exc:
        raise ParseError(f"{path}: {exc}") from None


def batchify(series: SampleSeries, pace: float = 1.0):
    """Frame a series into 16-sample batches with virtual release stamps.

    Batch ``k`` carries ``send_ts_ms = start + floor(k * 62.5)`` -- virtual
    stamps stay at real scale regardless of ``pace``.  ``pace`` (>= 1) is the
    wall-clock acceleration contract honoured by the paced publisher: batch
    ``k`` leaves the process ``k * 62.5 / pace`` wall-ms after the first.
    A trailing partial batch is dropped.
    """
    if pace < 1.0:
        raise StreamError("pace must be >= 1")
    n_batches = len(series) // BATCH_SAMPLES
    batches = []
    vals = series.values
    for k in range(n_batches):
        chunk = vals[k * BATCH_SAMPLES:(k + 1) * BATCH_SAMPLES]
        batches.append(
            SampleBatch(
                seq_no=k,
                samples=tuple(int(v) for v in chunk),
                send_ts_ms=series.start_time_ms + int(k * BATCH_INTERVAL_MS),
            )
        )
    return batches


def count_r_peaks(values, threshold_uv=550) -> int:
    """Count upward threshold crossings; one per beat on the clean template."""
    arr = np.asarray(values)
    above = arr > threshold_uv
    return int(np.count_nonzero(above[1:] & ~above[:-1]) + (1 if above[0] else 0))
