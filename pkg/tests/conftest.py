"""Shared pytest config: prints one pass/fail line per acceptance criterion."""

CRITERIA = {
    "test_criterion_01_5g_full_run": (
        1, "5G full run: delay mean 114+/-2 ms, one mode, corruption "
           "0.07+/-0.03%, wall <= 10 s"),
    "test_criterion_02_4g_full_run": (
        2, "4G full run: delay mean 134+/-2 ms, corruption 0.85+/-0.10%"),
    "test_criterion_03_3g_full_run": (
        3, "3G full run: modes 137+/-5 and 210+/-5 ms, corruption 2.98+/-0.20%"),
    "test_criterion_04_injected_faults_recovered_exactly": (
        4, "seeded fault injection over 1e5 samples recovered with zero tolerance"),
    "test_criterion_05_cnn_matches_naive_oracle": (
        5, "CNN matches the naive oracle to 1e-6 over 100 (model, segment) pairs"),
    "test_criterion_06_codec_round_trip": (
        6, "codec: 1e4 packet round-trips, adversarial chunking, varint vectors"),
    "test_criterion_07_duration_clamp": (
        7, "duration histogram clamps into the final bin with exact fraction"),
    "test_criterion_08_zero_impairment_constant_delay": (
        8, "zero-impairment constant channel: no loss, delays exactly constant"),
    "test_criterion_09_byte_identical_reports": (
        9, "ecgpipe run twice: byte-identical report.json"),
    "test_criterion_10_budget_arithmetic": (
        10, "5G end-to-end budget: mean/p99 vs 300 ms, arithmetically consistent"),
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(outcome, ""):
            nodeid = getattr(report, "nodeid", "")
            name = nodeid.split("::")[-1]
            if "test_acceptance.py" in nodeid and name in CRITERIA:
                number, description = CRITERIA[name]
                verdict = "PASS" if outcome == "passed" else "FAIL"
                # setup/teardown reports must never mask a call failure
                if number not in results or verdict == "FAIL":
                    results[number] = (verdict, description)
    if results:
        terminalreporter.write_sep("-", "acceptance criteria")
        for number in sorted(results):
            verdict, description = results[number]
            terminalreporter.write_line(f"criterion {number:02d}: {verdict} - {description}")
