"""Command-line front end.

Subcommands cover the desk workflow end to end: generate a recording
(``gen``), serve a broker (``broker``), replay a recording against it
(``publish``), optionally impair traffic between real endpoints (``proxy``),
classify received streams (``infer``), analyse logs (``analyze``), and run
the whole virtual experiment schedule in one go (``run``).
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
import threading
from pathlib import Path

from . import mqtt
from .analysis import (
    EmptyReportError,
    analyze_session,
    load_log,
    split_sessions,
    write_histogram_csv,
)
from .channel import ChannelEmulator, load_profile
from .cnn import classify_stream, default_model, load_model, save_model, segment_stream
from .ecg import batchify, generate_synthetic_ecg, load_series, save_series
from .experiment import ExperimentConfig, run_experiment
from .figures import save_duration_figure, save_latency_figure
from .transport.broker import TcpBroker
from .transport.client import DelayedSender, PublisherClient, StreamAborted, TransportError
from .transport.wire import LogWriter, inference_log_record
from .vtime import VirtualClock


def _host_port(text: str):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def cmd_gen(args) -> int:
    series = generate_synthetic_ecg(
        args.duration_s,
        heart_rate_bpm=args.heart_rate,
        noise_std_uv=args.noise_uv,
        seed=args.seed,
    )
    save_series(series, args.out)
    print(f"wrote {len(series)} samples ({series.duration_s():.1f} s) to {args.out}")
    return 0


def cmd_model(args) -> int:
    model = default_model(seed=args.seed)
    save_model(model, args.out)
    print(f"wrote model to {args.out}")
    return 0


def cmd_broker(args) -> int:
    host, port = args.listen
    broker = TcpBroker(host=host, port=port, recv_log_path=args.recv_log,
                       pace=args.pace)
    with broker:
        print(f"broker listening on {host}:{broker.port}, logging to {args.recv_log}")
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            print("shutting down")
    return 0


def cmd_publish(args) -> int:
    series = load_series(args.infile)
    batches = batchify(series, pace=args.pace)
    channel = None
    if args.profile:
        profile = load_profile(args.profile)
        channel = ChannelEmulator(profile, connection_id=args.client_id)
    host, port = args.broker
    client = PublisherClient(host, port, args.client_id, pace=args.pace,
                             channel=channel, send_log_path=args.send_log)
    try:
        client.connect()
        entries = client.publish_batches(batches)
    except StreamAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        client.disconnect()
    print(f"published {len(entries)} batches as {args.client_id!r}; "
          f"send log: {args.send_log}")
    return 0


def cmd_proxy(args) -> int:
    listen_host, listen_port = args.listen
    upstream_host, upstream_port = args.upstream
    profile = load_profile(args.profile)
    clock = VirtualClock(args.pace)
    listener = socket.create_server((listen_host, listen_port))
    print(f"proxy {listen_host}:{listener.getsockname()[1]} "
          f"-> {upstream_host}:{upstream_port} via profile {profile.name!r}")
    conn_counter = 0

    def serve(client_sock, conn_id):
        emulator = ChannelEmulator(profile, connection_id=conn_id)
        try:
            upstream = socket.create_connection((upstream_host, upstream_port), 5.0)
        except OSError as exc:
            print(f"upstream unreachable: {exc}", file=sys.stderr)
            client_sock.close()
            return
        sender = DelayedSender(upstream, clock)
        sender.start()

        def pump_back():
            try:
                while True:
                    data = upstream.recv(4096)
                    if not data:
                        break
                    client_sock.sendall(data)
            except OSError:
                pass
            finally:
                client_sock.close()

        threading.Thread(target=pump_back, daemon=True).start()
        decoder = mqtt.StreamDecoder()
        try:
            while True:
                data = client_sock.recv(4096)
                if not data:
                    break
                for packet in decoder.feed(data):
                    frame = mqtt.encode_packet(packet)
                    now = clock.now_ms()
                    if isinstance(packet, mqtt.Publish) and len(packet.payload) == 76:
                        delivery = emulator.transmit(packet.payload, now)
                        if delivery is None:
                            continue  # dropped on the emulated link
                        frame = mqtt.encode_packet(
                            mqtt.Publish(packet.topic, delivery.payload))
                        sender.send_at(delivery.deliver_at_ms, frame)
                    else:
                        sender.send_at(emulator.pass_through(frame, now).deliver_at_ms,
                                       frame)
        except (OSError, mqtt.ProtocolError):
            pass
        finally:
            sender.finish()
            upstream.close()
            client_sock.close()

    try:
        while True:
            sock, _addr = listener.accept()
            conn_counter += 1
            threading.Thread(target=serve, args=(sock, f"proxy-{conn_counter}"),
                             daemon=True).start()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        listener.close()
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.model) if args.model else default_model()
    entries, skipped = load_log(args.infile)
    if skipped:
        print(f"note: skipped {skipped} unparseable log lines", file=sys.stderr)
    sessions = split_sessions(entries)
    if args.session:
        if args.session not in sessions:
            print(f"error: no session {args.session!r} in {args.infile}", file=sys.stderr)
            return 1
        sessions = {args.session: sessions[args.session]}
    writer = LogWriter(args.out, mode="w")
    total = 0
    with writer:
        for session in sorted(sessions):
            samples = [v for e in sessions[session]
                       if not e.get("corrupt") and "samples" in e
                       for v in e["samples"]]
            segments = segment_stream(samples)
            for entry in classify_stream(model, segments, workers=args.workers):
                writer.append(inference_log_record(session, entry))
                total += 1
            print(f"session {session}: {len(segments)} segments classified")
    print(f"wrote {total} inference records to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    send_entries, s_skip = load_log(args.send_log)
    recv_entries, r_skip = load_log(args.recv_log)
    infer_entries = []
    if args.infer_log:
        infer_entries, _ = load_log(args.infer_log)
    skipped = s_skip + r_skip
    if skipped:
        print(f"note: skipped {skipped} unparseable log lines", file=sys.stderr)

    send_by_session = split_sessions(send_entries)
    recv_by_session = split_sessions(recv_entries)
    infer_by_session = split_sessions(infer_entries)
    targets = [args.session] if args.session else sorted(send_by_session)
    if not targets:
        print("error: send log holds no sessions", file=sys.stderr)
        return 1

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    failures = 0
    for session in targets:
        if session not in send_by_session:
            print(f"error: no session {session!r} in send log", file=sys.stderr)
            failures += 1
            continue
        durations = [e["duration_ms"] for e in infer_by_session.get(session, ())]
        try:
            result = analyze_session(
                send_by_session[session],
                recv_by_session.get(session, []),
                durations,
                ble_allowance_ms=args.ble_allowance_ms,
                budget_ms=args.budget_ms,
            )
        except EmptyReportError as exc:
            print(f"session {session}: cannot analyse: {exc}", file=sys.stderr)
            failures += 1
            continue
        doc = result.to_dict()
        summary[session] = doc
        write_histogram_csv(result.latency.histogram, out / f"{session}_latency.csv")
        save_latency_figure(doc["latency"], out / f"{session}_latency.png",
                            f"transmission delay -- session {session}")
        if result.inference.total:
            write_histogram_csv(result.inference.histogram,
                                out / f"{session}_inference.csv")
            save_duration_figure(doc["inference"], out / f"{session}_inference.png",
                                 f"inference duration -- session {session}")
        lat, cor = doc["latency"], doc["corruption"]
        modes = ", ".join(f"{m:.0f}" for m in lat["modes_ms"]) or "-"
        print(f"session {session}: delay mean {lat['mean_ms']:.1f} ms "
              f"(modes: {modes} ms), "
              f"{cor['pct_missing_or_unequal']:.2f}% missing-or-unequal "
              f"over {cor['total_sent']} samples")
        if "budget" in doc:
            b = doc["budget"]
            verdict = "within" if b["within_budget"] else "OVER"
            print(f"  end-to-end: mean {b['mean_ms']:.1f} ms, "
                  f"p99 {b['p99_ms']:.1f} ms -- {verdict} {b['budget_ms']:.0f} ms budget")

    with open(out / "analysis.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {out / 'analysis.json'}")
    return 1 if failures else 0


def cmd_run(args) -> int:
    if args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig()
    if args.out_dir:
        config.out_dir = args.out_dir
    if args.seed is not None:
        config.seed = args.seed
    if args.pace is not None:
        config.pace = args.pace

    report = run_experiment(config)
    for run in report["runs"]:
        if "error" in run:
            print(f"part {run['part']} run {run['run']}: FAILED ({run['error']})")
            continue
        bits = []
        for label, doc in sorted(run["sessions"].items()):
            lat = doc["latency"]
            cor = doc["corruption"]
            bits.append(f"{label}/{doc['profile']}: {lat['mean_ms']:.1f} ms, "
                        f"{cor['pct_missing_or_unequal']:.2f}% bad")
        print(f"part {run['part']} run {run['run']}: " + "; ".join(bits))
    totals = report["totals"]
    print(f"{totals['runs_completed']}/{totals['runs_attempted']} runs completed, "
          f"{totals['stream_virtual_s']:.0f} virtual stream seconds")
    print(f"report: {Path(config.out_dir) / 'report.json'}")
    return 0 if report["completed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecgpipe",
        description="Desk-scale ECG telemetry pipeline: stream, emulate, classify, analyse.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic ECG recording (CSV)")
    p.add_argument("--out", required=True)
    p.add_argument("--duration-s", type=float, default=60.0)
    p.add_argument("--hr-bpm", dest="heart_rate", type=float, default=72.0)
    p.add_argument("--noise-uv", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("model", help="write the default classifier model (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=20240)
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("broker", help="serve a broker and log received batches")
    p.add_argument("--listen", type=_host_port, default=("127.0.0.1", 1883),
                   metavar="HOST:PORT")
    p.add_argument("--recv-log", default="recv.jsonl")
    p.add_argument("--pace", type=float, default=1.0)
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("publish", help="replay a recording to a broker")
    p.add_argument("--broker", type=_host_port, required=True, metavar="HOST:PORT")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--client-id", required=True)
    p.add_argument("--send-log", default="send.jsonl")
    p.add_argument("--profile", default="",
                   help="impair traffic in-process (3g/4g/5g or profile JSON)")
    p.add_argument("--pace", type=float, default=1.0)
    p.set_defaults(func=cmd_publish)

    p = sub.add_parser("proxy", help="impair traffic between real endpoints")
    p.add_argument("--listen", type=_host_port, required=True, metavar="HOST:PORT")
    p.add_argument("--upstream", type=_host_port, required=True, metavar="HOST:PORT")
    p.add_argument("--profile", required=True)
    p.add_argument("--pace", type=float, default=1.0)
    p.set_defaults(func=cmd_proxy)

    p = sub.add_parser("infer", help="classify received streams from a receive log")
    p.add_argument("--model", default="", help="model JSON (default: built-in)")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--session", default="")
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="latency/corruption/budget reports from logs")
    p.add_argument("--send-log", required=True)
    p.add_argument("--recv-log", required=True)
    p.add_argument("--infer-log", default="")
    p.add_argument("--session", default="")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ble-allowance-ms", type=float, default=50.0)
    p.add_argument("--budget-ms", type=float, default=300.0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run the full virtual experiment schedule")
    p.add_argument("--config", default="", help="config JSON (default: built-in schedule)")
    p.add_argument("--out-dir", default="")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pace", type=float, default=None)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
