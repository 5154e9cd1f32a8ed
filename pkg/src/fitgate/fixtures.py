"""Synthetic recordings with the durations of the five benchmark speech tasks.

The signal is a crude source-filter model: a jittered glottal pulse train
mixed with breath noise, shaped by three formant resonators and gated by a
syllable-rate envelope with short pauses. It is not speech, but it has the
spectral tilt, voiced/unvoiced alternation and silences the features react to.
"""

from __future__ import annotations

import zlib
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy.signal import lfilter

from .ingest import encode_wav

SAMPLE_RATE_HZ = 44100
BENCH_DURATIONS_S: Dict[str, float] = {
    "S1": 6.24,
    "S2": 6.18,
    "S3": 5.62,
    "S4": 6.08,
    "S5": 4.96,
}
BENCH_SIZES_KB: Dict[str, int] = {"S1": 551, "S2": 545, "S3": 496, "S4": 537, "S5": 438}

_FORMANTS_HZ = ((700.0, 110.0), (1220.0, 120.0), (2600.0, 160.0))


def _resonator(x: np.ndarray, freq: float, bw: float, fs: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / fs)
    a = [1.0, -2.0 * r * np.cos(2.0 * np.pi * freq / fs), r * r]
    return lfilter([1.0 - r], a, x)


def speech_like(duration_s: float, fs: int = SAMPLE_RATE_HZ, seed: int = 0, level: float = 0.5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs

    f0 = 120.0 + 25.0 * np.sin(2.0 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi))
    phase = np.cumsum(f0 / fs)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    voiced = lfilter([1.0], [1.0, -0.95], pulses)
    noise = rng.standard_normal(n) * 0.05

    syllable = 0.5 - 0.5 * np.cos(2.0 * np.pi * 4.0 * t)
    # every ~0.8 s a 150 ms pause
    pause = (t % 0.8) > 0.65
    envelope = syllable * ~pause
    x = (voiced + noise) * envelope

    y = sum(_resonator(x, f, bw, fs) for f, bw in _FORMANTS_HZ)
    y += 0.0005 * rng.standard_normal(n)  # room noise keeps pauses from being digital silence
    peak = np.max(np.abs(y)) or 1.0
    return y / peak * level


def write_bench_fixtures(out_dir, fs: int = SAMPLE_RATE_HZ) -> List[Path]:
    """Write S1.wav .. S5.wav; deterministic for a given label."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for label, duration in BENCH_DURATIONS_S.items():
        samples = speech_like(duration, fs, seed=zlib.crc32(label.encode()))
        path = out / f"{label}.wav"
        path.write_bytes(encode_wav(samples, fs))
        paths.append(path)
    return paths
