import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fitgate.config import GatewayConfig  # noqa: E402
from fitgate.ingest import encode_wav  # noqa: E402


def tone(freq, duration_s, fs=44100, amp=0.5):
    t = np.arange(int(round(duration_s * fs))) / fs
    return amp * np.sin(2 * np.pi * freq * t)


def noise_wav(duration_s=0.5, fs=44100, seed=0, amp=0.3):
    rng = np.random.default_rng(seed)
    return encode_wav(np.clip(rng.normal(0, amp / 3, int(duration_s * fs)), -1, 1), fs)


@pytest.fixture
def gw_config(tmp_path):
    return GatewayConfig(
        inbox_dir=str(tmp_path / "inbox"),
        data_dir=str(tmp_path / "data"),
        sync_interval_s=0.2,
        poll_interval_ms=50,
        admin_bind="127.0.0.1:0",
    )


_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and (report.when == "call" or report.failed or report.skipped):
        name = report.nodeid.split("::")[-1]
        prev = _acceptance.get(name)
        if prev in ("FAIL",):
            return
        _acceptance[name] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_acceptance.items()):
        terminalreporter.write_line(f"[{outcome}] {name}")


def make_record(rid, minutes=0, with_series=False, **kw):
    from datetime import datetime, timedelta, timezone

    from fitgate.dsp import FeatureSeries, FeatureSummary
    from fitgate.store import FeatureRecord

    ts = datetime(2026, 1, 1, tzinfo=timezone.utc) + timedelta(minutes=minutes)
    series = None
    if with_series:
        a = np.array([0.1, 0.2])
        series = FeatureSeries(a, a, a, a, a, a, np.array([False, True]))
    fields = dict(
        record_id=rid,
        source_name=f"{rid}.wav",
        captured_at=ts,
        processed_at=ts,
        duration_s=1.0,
        size_bytes=88244,
        processing_time_s=0.01,
        config_snapshot={"frame": {"window_ms": 25.0}},
        summary=FeatureSummary(0.1, 1000.0, 0.01, 60.0, 98, 1.0),
        series=series,
    )
    fields.update(kw)
    return FeatureRecord(**fields)
