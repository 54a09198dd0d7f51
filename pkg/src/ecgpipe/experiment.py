"""Experiment runner: the whole pipeline under a deterministic virtual clock.

One *run* streams a synthetic recording per subject session through its own
emulated link into a shared in-process broker, classifies each received
stream, and analyses the logs.  The default schedule mirrors the desk
campaign this tool exists for: two parts (3G-vs-5G, then 4G-vs-5G), three
7-minute runs each, two subjects in parallel -- 126 minutes of stream data.

Virtual mode never sleeps: event delivery is driven by scheduled timestamps,
so a run finishes as fast as the host computes regardless of ``pace`` (the
``pace`` setting matters when replaying against a live broker over sockets).
All randomness derives from ``seed``, and with ``timing_mode="seeded"``
(default) inference durations are drawn from a seeded distribution instead
of the wall clock, making the emitted ``report.json`` byte-stable across
invocations; ``timing_mode="wall"`` keeps real measured durations.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
import string
from dataclasses import dataclass, field
from pathlib import Path

from . import mqtt
from .analysis import Histogram, analyze_session, write_histogram_csv
from .channel import ChannelEmulator, load_profile
from .cnn import classify_stream, default_model, load_model, segment_stream
from .ecg import BATCH_INTERVAL_MS, batchify, generate_synthetic_ecg
from .figures import save_duration_figure, save_latency_figure
from .transport.broker import BrokerCore
from .transport.wire import (
    LogWriter,
    encode_batch_payload,
    inference_log_record,
    send_log_record,
    topic_for,
)


class ConfigError(ValueError):
    pass


_TIMING_MODES = ("seeded", "wall")


@dataclass
class ExperimentConfig:
    """Declarative description of a full experiment schedule.

    ``parts`` is a list of profile-name lists; each inner list spawns one
    parallel subject session per profile (sessions are labelled a, b, ...).
    """

    parts: list = field(default_factory=lambda: [["3g", "5g"], ["4g", "5g"]])
    runs_per_part: int = 3
    run_duration_s: float = 420.0
    pace: float = 256.0
    seed: int = 7
    heart_rates_bpm: list = field(default_factory=lambda: [72.0, 64.0])
    noise_std_uv: float = 25.0
    model_path: str = ""
    workers: int = 2
    timing_mode: str = "seeded"
    seeded_duration_mean_ms: float = 165.0
    seeded_duration_std_ms: float = 6.0
    ble_allowance_ms: float = 50.0
    budget_ms: float = 300.0
    out_dir: str = "ecgpipe-out"

    def __post_init__(self):
        if not self.parts or not all(part for part in self.parts):
            raise ConfigError("parts must be a non-empty list of non-empty profile lists")
        self.parts = [[str(p) for p in part] for part in self.parts]
        if self.runs_per_part < 1:
            raise ConfigError("runs_per_part must be >= 1")
        if self.run_duration_s <= 0:
            raise ConfigError("run_duration_s must be > 0")
        if self.pace < 1.0:
            raise ConfigError("pace must be >= 1")
        if self.timing_mode not in _TIMING_MODES:
            raise ConfigError(f"timing_mode must be one of {_TIMING_MODES}")
        if not self.heart_rates_bpm:
            raise ConfigError("heart_rates_bpm must not be empty")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.seeded_duration_std_ms < 0 or self.seeded_duration_mean_ms <= 0:
            raise ConfigError("seeded duration parameters must be positive")
        for part in self.parts:
            for name in part:
                load_profile(name)  # fail fast on unknown profiles

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)


def _derive_int(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _session_labels(count: int) -> list:
    return list(string.ascii_lowercase[:count])


def resolve_model(config: ExperimentConfig):
    if config.model_path:
        return load_model(config.model_path)
    return default_model()


def run_experiment(config: ExperimentConfig, model=None) -> dict:
    """Execute the whole schedule; failed runs are recorded, not fatal."""
    if model is None:
        model = resolve_model(config)
    out_dir = Path(config.out_dir)
    log_dir = out_dir / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)

    runs = []
    for part_index, profiles in enumerate(config.parts, start=1):
        for run_index in range(1, config.runs_per_part + 1):
            try:
                runs.append(_run_once(config, model, part_index, run_index,
                                      profiles, log_dir))
            except Exception as exc:  # noqa: BLE001 - isolate per run
                runs.append({
                    "part": part_index,
                    "run": run_index,
                    "error": f"{type(exc).__name__}: {exc}",
                })

    failed = [r for r in runs if "error" in r]
    report = {
        "config": config.to_dict(),
        "runs": runs,
        "completed": not failed,
        "totals": _totals(config, runs),
    }
    emit_report(report, out_dir)
    return report


def _run_once(config, model, part_index, run_index, profiles, log_dir) -> dict:
    labels = _session_labels(len(profiles))
    tag = f"p{part_index}_r{run_index}"
    send_writer = LogWriter(log_dir / f"{tag}_send.jsonl", mode="w")
    recv_writer = LogWriter(log_dir / f"{tag}_recv.jsonl", mode="w")
    infer_writer = LogWriter(log_dir / f"{tag}_infer.jsonl", mode="w")

    recv_records = {label: [] for label in labels}

    def on_batch(client_id, record):
        recv_records[client_id].append(record)

    core = BrokerCore(recv_log=recv_writer, on_batch=on_batch)

    try:
        events = []
        order = 0
        send_entries = {}
        batches_sent = {}
        for idx, (label, profile_name) in enumerate(zip(labels, profiles)):
            profile = load_profile(profile_name).with_seed(config.seed)
            hr = config.heart_rates_bpm[idx % len(config.heart_rates_bpm)]
            series = generate_synthetic_ecg(
                config.run_duration_s,
                heart_rate_bpm=hr,
                noise_std_uv=config.noise_std_uv,
                seed=_derive_int(config.seed, "ecg", part_index, run_index, label),
            )
            batches = batchify(series, pace=config.pace)
            emulator = ChannelEmulator(
                profile, connection_id=f"p{part_index}.r{run_index}.{label}"
            )
            entries = []
            connect = mqtt.encode_packet(mqtt.Connect(client_id=label))
            delivery = emulator.pass_through(connect, 0.0)
            events.append((delivery.deliver_at_ms, order, label, delivery.payload))
            order += 1
            for batch in batches:
                payload = encode_batch_payload(batch)
                record = send_log_record(label, batch, payload)
                send_writer.append(record)
                entries.append(record)
                delivery = emulator.transmit(payload, float(batch.send_ts_ms))
                if delivery is None:
                    continue  # lost on the link
                frame = mqtt.encode_packet(
                    mqtt.Publish(topic_for(label), delivery.payload)
                )
                events.append((delivery.deliver_at_ms, order, label, frame))
                order += 1
            end_ms = (batches[-1].send_ts_ms + BATCH_INTERVAL_MS) if batches else 0.0
            delivery = emulator.pass_through(
                mqtt.encode_packet(mqtt.Disconnect()), end_ms
            )
            events.append((delivery.deliver_at_ms, order, label, delivery.payload))
            order += 1
            send_entries[label] = entries
            batches_sent[label] = len(batches)

        # Deliver everything in global virtual-time order (FIFO per session
        # is preserved: each emulator's delivery times are non-decreasing).
        events.sort(key=lambda e: (e[0], e[1]))
        conns = {label: core.connection() for label in labels}
        for deliver_at_ms, _, label, frame in events:
            conns[label].receive_bytes(frame, now_ms=deliver_at_ms)

        sessions = {}
        for idx, (label, profile_name) in enumerate(zip(labels, profiles)):
            received = recv_records[label]
            samples = [v for record in received for v in record["samples"]]
            segments = segment_stream(samples)
            log_entries = classify_stream(model, segments, workers=config.workers)
            if config.timing_mode == "seeded":
                rng = random.Random(
                    f"{config.seed}:timing:p{part_index}.r{run_index}.{label}"
                )
                log_entries = [
                    dataclasses.replace(
                        entry,
                        duration_ms=max(
                            rng.gauss(config.seeded_duration_mean_ms,
                                      config.seeded_duration_std_ms),
                            0.1,
                        ),
                    )
                    for entry in log_entries
                ]
            for entry in log_entries:
                infer_writer.append(inference_log_record(label, entry))
            durations = [entry.duration_ms for entry in log_entries]

            result = analyze_session(
                send_entries[label], received, durations,
                ble_allowance_ms=config.ble_allowance_ms,
                budget_ms=config.budget_ms,
            )
            doc = result.to_dict()
            doc["profile"] = profile_name
            doc["counts"] = {
                "batches_sent": batches_sent[label],
                "batches_delivered": len(received),
                "samples_sent": batches_sent[label] * 16,
                "segments": len(segments),
            }
            sessions[label] = doc

        return {"part": part_index, "run": run_index, "sessions": sessions}
    finally:
        send_writer.close()
        recv_writer.close()
        infer_writer.close()


def _totals(config: ExperimentConfig, runs) -> dict:
    completed = [r for r in runs if "error" not in r]
    by_profile = {}
    stream_s = 0.0
    for run in completed:
        for doc in run["sessions"].values():
            stream_s += config.run_duration_s
            agg = by_profile.setdefault(doc["profile"], {
                "delay_weighted_sum": 0.0,
                "delay_samples": 0,
                "bad_samples": 0,
                "total_sent": 0,
            })
            lat, cor = doc["latency"], doc["corruption"]
            agg["delay_weighted_sum"] += lat["mean_ms"] * lat["sample_count"]
            agg["delay_samples"] += lat["sample_count"]
            agg["bad_samples"] += cor["corrupted"] + cor["missing"]
            agg["total_sent"] += cor["total_sent"]
    profiles = {}
    for name, agg in sorted(by_profile.items()):
        profiles[name] = {
            "mean_delay_ms": (agg["delay_weighted_sum"] / agg["delay_samples"]
                              if agg["delay_samples"] else 0.0),
            "pct_missing_or_unequal": (100.0 * agg["bad_samples"] / agg["total_sent"]
                                       if agg["total_sent"] else 0.0),
            "total_sent": agg["total_sent"],
        }
    return {
        "runs_attempted": len(runs),
        "runs_completed": len(completed),
        "runs_failed": len(runs) - len(completed),
        "stream_virtual_s": stream_s,
        "by_profile": profiles,
    }


def emit_report(report: dict, out_dir) -> list:
    """Write ``report.json`` plus per-session histogram CSVs and figures.

    Returns the list of paths written.  The JSON is canonical (sorted keys)
    and contains no wall-clock state, so identical experiments emit
    byte-identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    report_path = out / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    paths.append(str(report_path))

    for run in report.get("runs", ()):
        if "error" in run:
            continue
        for label, doc in sorted(run["sessions"].items()):
            tag = f"{run['part']}_{run['run']}_{label}"
            title = f"part {run['part']} run {run['run']} session {label} ({doc['profile']})"

            lat_csv = out / f"{tag}_latency.csv"
            write_histogram_csv(_hist_from_dict(doc["latency"]["histogram"]), lat_csv)
            paths.append(str(lat_csv))
            paths.append(save_latency_figure(doc["latency"], out / f"{tag}_latency.png",
                                             f"transmission delay -- {title}"))

            inf_csv = out / f"{tag}_inference.csv"
            write_histogram_csv(_hist_from_dict(doc["inference"]["histogram"]), inf_csv)
            paths.append(str(inf_csv))
            paths.append(save_duration_figure(doc["inference"], out / f"{tag}_inference.png",
                                              f"inference duration -- {title}"))
    return paths


def _hist_from_dict(raw: dict) -> Histogram:
    return Histogram(bin_width_ms=raw["bin_width_ms"], start_ms=raw["start_ms"],
                     counts=tuple(raw["counts"]))
