"""Batch payload framing and the append-only JSONL telemetry logs.

Publish payload layout (76 bytes, all little-endian):

    0..7    send_ts_ms   u64   virtual release time of the batch
    8..11   seq_no       u32   batch counter per session
    12..75  samples      16 x i32 microvolt amplitudes

Send, receive and inference logs are JSON-lines files with one object per
record; readers skip lines that fail to parse and report the skip count
instead of aborting a whole analysis over one bad write.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass
from typing import Optional, Tuple

from ..ecg import BATCH_SAMPLES, SampleBatch

PAYLOAD_LEN = 76
_STRUCT = struct.Struct("<QI16i")

TOPIC_PREFIX = "ecg/"


def topic_for(client_id: str) -> str:
    return TOPIC_PREFIX + client_id


def encode_batch_payload(batch: SampleBatch) -> bytes:
    if not (0 <= batch.send_ts_ms < 2 ** 64):
        raise ValueError("send_ts_ms outside u64 range")
    if not (0 <= batch.seq_no < 2 ** 32):
        raise ValueError("seq_no outside u32 range")
    try:
        return _STRUCT.pack(batch.send_ts_ms, batch.seq_no, *batch.samples)
    except struct.error as exc:
        raise ValueError(f"sample outside i32 range: {exc}") from None


@dataclass(frozen=True)
class DecodedBatch:
    send_ts_ms: int
    seq_no: int
    samples: tuple


def decode_batch_payload(data: bytes) -> DecodedBatch:
    if len(data) != PAYLOAD_LEN:
        raise ValueError(f"batch payload must be {PAYLOAD_LEN} bytes, got {len(data)}")
    fields = _STRUCT.unpack(data)
    return DecodedBatch(send_ts_ms=fields[0], seq_no=fields[1], samples=tuple(fields[2:]))


def payload_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def send_log_record(session: str, batch: SampleBatch, payload: bytes) -> dict:
    return {
        "session": session,
        "seq_no": batch.seq_no,
        "send_ts_ms": batch.send_ts_ms,
        "digest": payload_digest(payload),
        "samples": list(batch.samples),
    }


def receive_log_record(session: str, recv_ts_ms: float, payload: bytes) -> dict:
    """Build a receive record; an unparseable payload is kept, flagged corrupt."""
    record = {
        "session": session,
        "recv_ts_ms": recv_ts_ms,
        "digest": payload_digest(payload),
    }
    try:
        decoded = decode_batch_payload(payload)
    except ValueError:
        record["corrupt"] = True
        return record
    record["seq_no"] = decoded.seq_no
    record["send_ts_ms"] = decoded.send_ts_ms
    record["samples"] = list(decoded.samples)
    return record


def inference_log_record(session: str, entry) -> dict:
    return {
        "session": session,
        "segment_index": entry.segment_index,
        "start_sample": entry.start_sample,
        "p_mi": entry.p_mi,
        "p_normal": entry.p_normal,
        "duration_ms": entry.duration_ms,
    }


class LogWriter:
    """Serialized JSONL appender, flushed after every record."""

    def __init__(self, path, mode: str = "a"):
        if mode not in ("a", "w"):
            raise ValueError("mode must be 'a' or 'w'")
        self.path = path
        self._lock = threading.Lock()
        self._fh = open(path, mode, encoding="utf-8")

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> Tuple[list, int]:
    """Read a JSONL log; returns ``(records, skipped_line_count)``."""
    records, skipped = [], 0
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError:
                skipped += 1
                continue
            if isinstance(obj, dict):
                records.append(obj)
            else:
                skipped += 1
    return records, skipped
