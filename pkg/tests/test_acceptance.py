"""Exit criteria for the gateway. One test per criterion; the terminal summary
prints a PASS/FAIL line for each (see conftest.py)."""

import json
import math
import random
import threading
import time
import urllib.request
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import noise_wav
from fitgate import bench
from fitgate.cloud import MockCloud
from fitgate.dsp import (
    AudioClip,
    FrameConfig,
    LoudnessParams,
    SpectrumFrame,
    bark_band_energies,
    calibrate_loudness,
    extract_features,
    hz_to_bark,
    loudness_level_phon,
    magnitude_spectrum,
    short_time_energy,
    specific_loudness,
    spectral_centroid,
    total_loudness_sone,
    zero_crossing_rate,
)
from fitgate.fixtures import BENCH_DURATIONS_S, BENCH_SIZES_KB, speech_like, write_bench_fixtures
from fitgate.gateway import Gateway, analyze, make_admin_server
from fitgate.ingest import compute_file_id, encode_wav
from fitgate.store import PENDING, SYNCED, RecordStore
from fitgate.sync import HttpTransport


@pytest.fixture(scope="module")
def bench_fixtures(tmp_path_factory):
    t0 = time.perf_counter()
    paths = write_bench_fixtures(tmp_path_factory.mktemp("bench_fixtures"))
    return paths, time.perf_counter() - t0


def test_ac1_bench_table_format(bench_fixtures, gw_config, tmp_path):
    paths, gen_time = bench_fixtures
    t0 = time.perf_counter()
    rows = bench.cmd_bench(paths, gw_config, repeats=3)
    text = bench.format_table(rows)
    doc = bench.bench_document(rows, 3)
    elapsed = gen_time + time.perf_counter() - t0

    header = [c.strip() for c in text.splitlines()[0].split("  ") if c.strip()]
    assert header == ["Speech Tasks", "Processing Time(s)", "File Duration(s)", "Size (kB)"]
    assert doc["columns"] == header + ["realtime_factor"]
    assert [r.task_label for r in rows] == ["S1", "S2", "S3", "S4", "S5"]
    for row in rows:
        assert row.file_duration_s == pytest.approx(BENCH_DURATIONS_S[row.task_label], abs=1 / 44100)
        assert abs(row.size_kb - BENCH_SIZES_KB[row.task_label]) <= 1.0
        # byte-rate law: 88.2 kB/s of PCM plus the 44-byte header
        assert row.size_bytes == round(row.file_duration_s * 88200) + 44
    assert elapsed < 30.0


def test_ac2_realtime_factor(bench_fixtures, gw_config):
    paths, _ = bench_fixtures
    rows = bench.cmd_bench(paths, gw_config, repeats=3)
    for row in rows:
        assert row.realtime_factor < 0.5, (row.task_label, row.realtime_factor)


def test_ac3_dsp_oracles():
    rng = np.random.default_rng(7)
    fs, k = 16000, 64
    cfg = FrameConfig(fft_size=k)
    for _ in range(100):
        n = int(rng.integers(2, k + 1))
        x = rng.uniform(-1, 1, n)
        xs = x.tolist()
        assert zero_crossing_rate(x) == pytest.approx(oracles.zcr(xs), rel=1e-9, abs=0)
        assert short_time_energy(x) == pytest.approx(oracles.ste(xs), rel=1e-9)
        expected = oracles.centroid(oracles.dft_magnitudes(xs, k, oracles.hann(n)), fs / k)
        assert spectral_centroid(magnitude_spectrum(x, cfg, fs)) == pytest.approx(expected, rel=1e-6)

    fs = 44100
    cfg = FrameConfig()
    for f in (200.0, 1000.0, 3150.0):
        for amp in (0.1, 0.9):
            n = cfg.window_samples(fs)
            # whole number of periods for the closed-form mean square
            periods = max(1, int(n * f / fs))
            frame = amp * np.sin(2 * np.pi * periods * np.arange(n) / n)
            f_exact = periods * fs / n
            assert zero_crossing_rate(frame) == pytest.approx(2 * f_exact / fs, abs=1 / (n - 1))
            assert short_time_energy(frame) == pytest.approx(amp**2 / 2, rel=1e-6)
            spec = magnitude_spectrum(frame, cfg, fs)
            assert abs(spectral_centroid(spec) - f_exact) <= spec.bin_hz


def test_ac4_loudness_properties():
    params = LoudnessParams(reference_energy=0.37)
    e = np.array([0.0, 0.37, 1.5, 42.0])
    ratio = specific_loudness(e * 10, params)[1:] / specific_loudness(e, params)[1:]
    np.testing.assert_allclose(ratio, 10**0.23, atol=1e-6)

    for n in (1 / 64, 0.3, 1.0, 7.5, 1000.0):
        assert loudness_level_phon(2 * n) - loudness_level_phon(n) == pytest.approx(10.0, abs=1e-12)

    rnd = random.Random(11)
    for _ in range(500):
        bands = np.array([rnd.uniform(0, 5) for _ in range(24)])
        bumped = bands.copy()
        bumped[rnd.randrange(24)] += rnd.uniform(0, 5)
        assert total_loudness_sone(specific_loudness(bumped, params)) >= total_loudness_sone(
            specific_loudness(bands, params)
        )

    fs = 22050
    cfg = FrameConfig(silence_floor=0.0)
    params = calibrate_loudness(LoudnessParams(), cfg, fs)
    clip = AudioClip(np.random.default_rng(3).uniform(-1, 1, fs // 2), fs)
    base = extract_features(clip, cfg, params)
    for g in (0.9, 0.5, 0.1, 0.013):
        scaled = extract_features(clip.scaled(g), cfg, params)
        ok = (base.loudness_sone >= 1 / 64) & (scaled.loudness_sone >= 1 / 64)
        assert ok.any()
        np.testing.assert_allclose(
            scaled.loudness_phon[ok] - base.loudness_phon[ok], 4.6 * math.log2(g), atol=1e-6
        )


def test_ac5_spectral_correctness():
    rng = np.random.default_rng(5)
    k = 256
    cfg = FrameConfig(fft_size=k, window="rect")
    for _ in range(100):
        x = rng.normal(0, 0.3, int(rng.integers(1, k + 1)))
        mags = magnitude_spectrum(x, cfg, 8000).magnitudes
        full_power = mags[0] ** 2 + mags[-1] ** 2 + 2 * np.sum(mags[1:-1] ** 2)
        assert np.sum(x * x) == pytest.approx(full_power / k, rel=1e-6)

    params = LoudnessParams()
    for _ in range(100):
        bin_hz = float(rng.uniform(1, 20))
        n_bins = int(rng.integers(2, 700))
        mags = rng.integers(0, 2000, n_bins).astype(float)
        spec = SpectrumFrame(mags, bin_hz)
        assert hz_to_bark(spec.frequencies[-1]) < params.n_bark_bands
        assert np.sum(bark_band_energies(spec, params)) == np.sum(mags**2)


class SimulatedCrash(Exception):
    pass


class CrashingTransport:
    """Crashes the client after the server has (maybe) committed the batch."""

    def __init__(self, inner, rng, rate):
        self.inner, self.rng, self.rate = inner, rng, rate

    def post(self, body):
        result = self.inner.post(body)
        if self.rng.random() < self.rate:
            raise SimulatedCrash("crash before applying ack")
        return result


def test_ac6_pipeline_exactly_once(gw_config):
    rng = random.Random(1234)
    cfg = replace(gw_config, max_batch=3)
    inbox = Path(cfg.inbox_dir)
    inbox.mkdir(parents=True)
    expected = set()
    for i in range(40):
        data = noise_wav(0.2, seed=i)
        (inbox / f"f{i:02d}.wav").write_bytes(data)
        expected.add(compute_file_id(data))

    stages = ["analyzed", "persisted", "ledgered"]
    seen_synced = set()

    def check_monotone():
        store = RecordStore(cfg.data_dir)
        for rid in seen_synced:
            assert store.state_of(rid) == SYNCED
        seen_synced.update(r.record_id for r in store.all_records() if store.state_of(r.record_id) == SYNCED)

    with MockCloud(drop_rate=0.25, lost_ack_rate=0.2, ack_delay_s=0.3, delay_rate=0.2, seed=99) as cloud:
        restarts = 0
        for session in range(60):
            faulty = session < 40
            crash_stage = rng.choice(stages + [None]) if faulty else None
            crash_after = rng.randrange(4)

            def fault(stage, _s=crash_stage, _n=[crash_after]):
                if stage == _s:
                    if _n[0] == 0:
                        raise SimulatedCrash(stage)
                    _n[0] -= 1

            transport = HttpTransport(cloud.url, timeout=0.15)
            if faulty:
                transport = CrashingTransport(transport, rng, 0.15)
            gw = Gateway(cfg, transport=transport, fault=fault, sync_sleep=lambda d: None)
            if faulty and rng.random() < 0.2:
                # torn write: half a line reaches disk, then the process dies
                def torn(line, _store=gw.store):
                    with open(_store.records_path, "a") as fh:
                        fh.write(line[: len(line) // 2])
                    raise SimulatedCrash("torn write")

                gw.store.write_hook = torn
            try:
                gw.run_once()
                gw.sync_worker.drain(max_attempts=8)
            except SimulatedCrash:
                restarts += 1
            check_monotone()
            store = RecordStore(cfg.data_dir)
            if not faulty and not store.load_pending() and {r.record_id for r in store.all_records()} == expected:
                break

    store = RecordStore(cfg.data_dir)
    lines = [json.loads(l) for l in store.records_path.read_text().splitlines()]
    ids = [l["record_id"] for l in lines]
    assert restarts > 0
    assert sorted(ids) == sorted(expected)  # one record per inbox file, no duplicates
    assert all(store.state_of(rid) == SYNCED for rid in expected)
    assert set(cloud.records) == expected
    # the faults really happened: some records crossed the wire more than once
    assert sum(cloud.deliveries.values()) > len(expected)
    print(f"restarts={restarts} deliveries={sum(cloud.deliveries.values())} requests={cloud.requests}"
          f" quarantined={store.quarantine_path.exists()}")
    assert store.counts()[PENDING] == 0


def _http(method, url, body=None):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method)
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_ac7_remote_configurability(gw_config):
    gw = Gateway(gw_config)
    server = make_admin_server(gw)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base = "http://%s:%d" % server.server_address[:2]
    inbox = Path(gw_config.inbox_dir)
    try:
        (inbox / "a.wav").write_bytes(noise_wav(0.4, seed=1))
        (first,) = gw.run_once()

        status, body = _http("PUT", base + "/config", {"frame": {"window_ms": 30}})
        assert status == 200 and body["accepted"]

        (inbox / "b.wav").write_bytes(noise_wav(0.4, seed=2))
        (second,) = gw.run_once()
        assert first.config_snapshot["frame"]["window_ms"] == 25.0
        assert second.config_snapshot["frame"]["window_ms"] == 30.0
        fs = 44100
        assert second.summary.frame_count == (int(0.4 * fs) - round(0.030 * fs)) // round(0.010 * fs) + 1

        before = _http("GET", base + "/config")[1]
        status, body = _http("PUT", base + "/config", {"frame": {"hop_ms": 40}})
        assert status == 422 and body["accepted"] is False and "hop_ms" in body["reason"]
        assert _http("GET", base + "/config")[1] == before
    finally:
        server.shutdown()
        server.server_close()


def test_ac8_export_fidelity(bench_fixtures, gw_config):
    inbox = Path(gw_config.inbox_dir)
    inbox.mkdir(parents=True)
    six = inbox / "six.wav"
    six.write_bytes(encode_wav(speech_like(6.0, seed=42), 44100))
    gw = Gateway(gw_config)
    (rec,) = gw.run_once()

    text = bench.cmd_export_plot_data([rec.record_id], "series", gw_config, RecordStore(gw_config.data_dir))
    lines = text.splitlines()
    assert lines[0].split(",") == ["time_s", "loudness_phon", "sc_hz", "zcr", "ste"]
    rows = [tuple(float(v) for v in line.split(",")) for line in lines[1:]]
    assert len(rows) == 598

    _, series, _, _ = analyze(six.read_bytes(), gw_config)
    assert rows == bench.series_rows(series)  # bit-identical round trip

    paths, _ = bench_fixtures
    for p in paths:
        (inbox / p.name).write_bytes(p.read_bytes())
    records = {r.task_label: r for r in gw.run_once()}
    ids = [records[label].record_id for label in ("S1", "S2", "S3", "S4", "S5")]
    summary_text = bench.cmd_export_plot_data(ids, "summary", gw_config, gw.store)
    header, *body = summary_text.splitlines()
    assert header.split(",") == list(bench.SUMMARY_COLUMNS)
    assert len(body) == 5
    for line, label in zip(body, ("S1", "S2", "S3", "S4", "S5")):
        cells = line.split(",")
        s = records[label].summary
        assert cells[0] == label
        assert float(cells[1]) == s.mean_zcr and float(cells[2]) == s.mean_sc_hz
        assert float(cells[3]) == s.mean_ste and float(cells[4]) == s.mean_loudness_phon
    from_files = bench.cmd_export_plot_data(paths, "summary", gw_config)
    assert from_files == summary_text
