"""End-to-end tests of the ``ecgpipe`` command-line interface."""

import json
import socket
from pathlib import Path

import pytest

from ecgpipe.cli import main
from ecgpipe.cnn import load_model
from ecgpipe.ecg import count_r_peaks, load_series
from ecgpipe.transport import read_log


def write_echo_logs(tmp_path, n_batches=30, sessions=("a",), delay_ms=50.0,
                    duration_ms=165.0, segments_per_session=1):
    """Synthesise send/recv/infer JSONL logs for a constant-latency link."""
    import numpy as np
    send_path = tmp_path / "send.jsonl"
    recv_path = tmp_path / "recv.jsonl"
    infer_path = tmp_path / "infer.jsonl"
    rng = np.random.default_rng(23)
    with open(send_path, "w") as sf, open(recv_path, "w") as rf, \
            open(infer_path, "w") as inf:
        for session in sessions:
            for k in range(n_batches):
                samples = rng.integers(-5000, 5000, 16).tolist()
                send = {"session": session, "seq_no": k,
                        "send_ts_ms": int(k * 62.5), "samples": samples}
                recv = dict(send, recv_ts_ms=send["send_ts_ms"] + delay_ms)
                sf.write(json.dumps(send) + "\n")
                rf.write(json.dumps(recv) + "\n")
            for s in range(segments_per_session):
                inf.write(json.dumps({
                    "session": session, "segment_index": s,
                    "start_sample": s * 2560, "p_mi": 0.4, "p_normal": 0.6,
                    "duration_ms": duration_ms}) + "\n")
    return send_path, recv_path, infer_path


class TestGen:
    def test_writes_loadable_series(self, tmp_path):
        out = tmp_path / "trace.csv"
        assert main(["gen", "--out", str(out), "--duration-s", "2",
                     "--hr-bpm", "80", "--noise-uv", "0", "--seed", "3"]) == 0
        series = load_series(out)
        assert len(series) == 512
        assert count_r_peaks(series.values) == 3  # 80 bpm for 2 s

    def test_deterministic_per_seed(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            main(["gen", "--out", str(out), "--duration-s", "1",
                  "--seed", "9"])
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_duration_exits_2(self, tmp_path, capsys):
        code = main(["gen", "--out", str(tmp_path / "x.csv"),
                     "--duration-s", "0"])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


class TestModel:
    def test_writes_loadable_model(self, tmp_path):
        out = tmp_path / "model.json"
        assert main(["model", "--out", str(out), "--seed", "5"]) == 0
        model = load_model(out)
        assert model.input_length == 2560


class TestInfer:
    def test_classifies_each_session(self, tmp_path):
        recv = tmp_path / "recv.jsonl"
        import numpy as np
        rng = np.random.default_rng(7)
        with open(recv, "w") as fh:
            for session, batches in (("a", 320), ("b", 160)):
                for k in range(batches):
                    fh.write(json.dumps({
                        "session": session, "seq_no": k,
                        "send_ts_ms": int(k * 62.5),
                        "recv_ts_ms": int(k * 62.5) + 50,
                        "samples": rng.integers(-5000, 5000, 16).tolist(),
                    }) + "\n")
        out = tmp_path / "infer.jsonl"
        assert main(["infer", "--in", str(recv), "--out", str(out),
                     "--workers", "1"]) == 0
        records, skipped = read_log(out)
        assert skipped == 0
        # 320 batches = 5120 samples = 2 segments; 160 batches = 1 segment
        assert [(r["session"], r["segment_index"]) for r in records] == [
            ("a", 0), ("a", 1), ("b", 0)]
        for r in records:
            assert abs(r["p_mi"] + r["p_normal"] - 1.0) < 1e-9
            assert r["duration_ms"] > 0

    def test_session_filter(self, tmp_path):
        recv = tmp_path / "recv.jsonl"
        import numpy as np
        rng = np.random.default_rng(7)
        with open(recv, "w") as fh:
            for session in ("a", "b"):
                for k in range(160):
                    fh.write(json.dumps({
                        "session": session, "seq_no": k,
                        "samples": rng.integers(-100, 100, 16).tolist(),
                    }) + "\n")
        out = tmp_path / "infer.jsonl"
        assert main(["infer", "--in", str(recv), "--out", str(out),
                     "--session", "b", "--workers", "1"]) == 0
        records, _ = read_log(out)
        assert {r["session"] for r in records} == {"b"}

    def test_unknown_session_exits_1(self, tmp_path, capsys):
        recv = tmp_path / "recv.jsonl"
        recv.write_text(json.dumps({"session": "a", "samples": [0] * 16}) + "\n")
        code = main(["infer", "--in", str(recv),
                     "--out", str(tmp_path / "o.jsonl"), "--session", "zz"])
        assert code == 1
        assert "zz" in capsys.readouterr().err


class TestAnalyze:
    def test_full_report_with_budget(self, tmp_path, capsys):
        send, recv, infer = write_echo_logs(tmp_path)
        out_dir = tmp_path / "report"
        code = main(["analyze", "--send-log", str(send), "--recv-log", str(recv),
                     "--infer-log", str(infer), "--out-dir", str(out_dir)])
        assert code == 0
        for name in ("a_latency.csv", "a_latency.png",
                     "a_inference.csv", "a_inference.png", "analysis.json"):
            assert (out_dir / name).is_file(), name
        doc = json.loads((out_dir / "analysis.json").read_text())["a"]
        assert doc["latency"]["mean_ms"] == 50.0
        assert doc["corruption"]["pct_missing_or_unequal"] == 0.0
        # mean budget = delay + inference + capture allowance, exactly
        assert doc["budget"]["mean_ms"] == pytest.approx(50 + 165 + 50)
        stdout = capsys.readouterr().out
        assert "session a" in stdout
        assert "end-to-end" in stdout

    def test_without_inference_log(self, tmp_path):
        send, recv, _ = write_echo_logs(tmp_path)
        out_dir = tmp_path / "report"
        assert main(["analyze", "--send-log", str(send), "--recv-log", str(recv),
                     "--out-dir", str(out_dir)]) == 0
        doc = json.loads((out_dir / "analysis.json").read_text())["a"]
        assert "budget" not in doc
        assert not (out_dir / "a_inference.csv").exists()

    def test_unknown_session_exits_1(self, tmp_path, capsys):
        send, recv, _ = write_echo_logs(tmp_path)
        code = main(["analyze", "--send-log", str(send), "--recv-log", str(recv),
                     "--out-dir", str(tmp_path / "r"), "--session", "nope"])
        assert code == 1
        assert "nope" in capsys.readouterr().err

    def test_empty_receive_log_reported(self, tmp_path, capsys):
        send, recv, _ = write_echo_logs(tmp_path)
        recv.write_text("")
        code = main(["analyze", "--send-log", str(send), "--recv-log", str(recv),
                     "--out-dir", str(tmp_path / "r")])
        assert code == 1
        assert "cannot analyse" in capsys.readouterr().err


class TestRun:
    def run_config(self, tmp_path, **overrides):
        cfg = dict(parts=[["5g"]], runs_per_part=1, run_duration_s=10.0,
                   heart_rates_bpm=[72.0], seed=11,
                   out_dir=str(tmp_path / "out"))
        cfg.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_exit_zero_and_report(self, tmp_path, capsys):
        config = self.run_config(tmp_path)
        assert main(["run", "--config", str(config)]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["completed"] is True
        stdout = capsys.readouterr().out
        assert "1/1 runs completed" in stdout
        assert "report.json" in stdout

    def test_overrides_win(self, tmp_path):
        config = self.run_config(tmp_path)
        override_dir = tmp_path / "elsewhere"
        assert main(["run", "--config", str(config),
                     "--out-dir", str(override_dir), "--seed", "99",
                     "--pace", "300"]) == 0
        report = json.loads((override_dir / "report.json").read_text())
        assert report["config"]["seed"] == 99
        assert report["config"]["pace"] == 300.0

    def test_bad_config_key_exits_2(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"parts": [["5g"]], "bogus_knob": 1}))
        assert main(["run", "--config", str(path)]) == 2
        assert "bogus_knob" in capsys.readouterr().err

    def test_missing_profile_is_a_config_error(self, tmp_path, capsys):
        config = self.run_config(tmp_path, parts=[[str(tmp_path / "gone.json")]])
        assert main(["run", "--config", str(config)]) == 2
        assert "gone.json" in capsys.readouterr().err

    def test_failed_runs_exit_1(self, tmp_path, capsys):
        # an impossible heart rate passes config checks but fails in the run
        config = self.run_config(tmp_path, heart_rates_bpm=[500.0])
        assert main(["run", "--config", str(config)]) == 1
        stdout = capsys.readouterr().out
        assert "FAILED" in stdout
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["completed"] is False
        assert "heart_rate" in report["runs"][0]["error"]


class TestPublish:
    def test_unreachable_broker_exits_1(self, tmp_path, capsys):
        trace = tmp_path / "trace.csv"
        main(["gen", "--out", str(trace), "--duration-s", "1"])
        probe = socket.create_server(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        code = main(["publish", "--broker", f"127.0.0.1:{port}",
                     "--in", str(trace), "--client-id", "dev",
                     "--send-log", str(tmp_path / "send.jsonl")])
        assert code == 1
        assert "unreachable" in capsys.readouterr().err

    def test_bad_endpoint_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["publish", "--broker", "nonsense", "--in", "x",
                  "--client-id", "dev"])
        assert exc.value.code == 2
