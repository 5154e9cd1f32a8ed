"""Short-time speech features and a simplified Bark-band loudness model.

Everything here is a pure function over immutable inputs. Per-frame helpers
(``zero_crossing_rate``, ``magnitude_spectrum`` ...) operate on one frame;
``extract_features`` runs the same arithmetic over a whole clip at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

DEFAULT_WINDOW_MS = 25.0
DEFAULT_HOP_MS = 10.0
DEFAULT_FFT_SIZE = 2048
DEFAULT_SILENCE_FLOOR = 1e-6

CALIBRATION_TONE_HZ = 1000.0
# 1 sone is the loudness of a 1 kHz tone at 40 dB SPL.
ONE_SONE_DB_SPL = 40.0
MIN_SONE = 1.0 / 64.0
MIN_PHON = 40.0 + 10.0 * math.log2(MIN_SONE)


class DspError(ValueError):
    pass


class ConfigurationError(DspError):
    pass


class DegenerateInputError(DspError):
    pass


class EmptySummaryError(DspError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DegenerateInputError("AudioClip expects mono samples")
        if self.sample_rate_hz <= 0:
            raise DegenerateInputError("sample_rate_hz must be positive")
        if samples.size and (samples.max() > 1.0 or samples.min() < -1.0):
            raise DegenerateInputError("samples must lie in [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def scaled(self, gain: float) -> "AudioClip":
        return AudioClip(self.samples * gain, self.sample_rate_hz)


@dataclass(frozen=True)
class FrameConfig:
    window_ms: float = DEFAULT_WINDOW_MS
    hop_ms: float = DEFAULT_HOP_MS
    fft_size: int = DEFAULT_FFT_SIZE
    silence_floor: float = DEFAULT_SILENCE_FLOOR
    # "hann" for analysis; "rect" exists for spectral identity checks.
    window: str = "hann"

    def validate(self, sample_rate_hz: Optional[int] = None) -> None:
        """Raise ConfigurationError if the config is unusable.

        With a sample rate, also checks that the window fits in the FFT.
        """
        if not (self.window_ms > 0 and self.hop_ms > 0):
            raise ConfigurationError("window_ms and hop_ms must be > 0")
        if self.hop_ms > self.window_ms:
            raise ConfigurationError(
                f"hop_ms ({self.hop_ms}) must not exceed window_ms ({self.window_ms})"
            )
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ConfigurationError(f"fft_size ({self.fft_size}) must be a power of two")
        if self.silence_floor < 0:
            raise ConfigurationError("silence_floor must be >= 0")
        if self.window not in ("hann", "rect"):
            raise ConfigurationError(f"unknown window function {self.window!r}")
        if sample_rate_hz is not None:
            n = self.window_samples(sample_rate_hz)
            if self.fft_size < n:
                raise ConfigurationError(
                    f"fft_size ({self.fft_size}) is shorter than the window ({n} samples)"
                )
            if self.hop_samples(sample_rate_hz) < 1:
                raise ConfigurationError("hop is shorter than one sample")

    def window_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.window_ms * sample_rate_hz / 1000.0))

    def hop_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.hop_ms * sample_rate_hz / 1000.0))


@dataclass(frozen=True)
class SpectrumFrame:
    magnitudes: np.ndarray
    bin_hz: float

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.magnitudes.size) * self.bin_hz


@dataclass(frozen=True)
class LoudnessParams:
    calibration_db_spl: float = 94.0
    n_bark_bands: int = 24
    compress_exponent: float = 0.23
    # None means "derive from the calibration anchor", see calibrate_loudness.
    reference_energy: Optional[float] = None

    def validate(self) -> None:
        if not 0.0 < self.compress_exponent < 1.0:
            raise ConfigurationError("compress_exponent must lie in (0, 1)")
        if self.n_bark_bands < 1:
            raise ConfigurationError("n_bark_bands must be >= 1")
        if self.reference_energy is not None and not self.reference_energy > 0:
            raise ConfigurationError("reference_energy must be > 0")


@dataclass
class FeatureSeries:
    frame_times_s: np.ndarray
    zcr: np.ndarray
    ste: np.ndarray
    sc_hz: np.ndarray
    loudness_sone: np.ndarray
    loudness_phon: np.ndarray
    silent_flags: np.ndarray

    def __len__(self) -> int:
        return int(self.frame_times_s.size)

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSeries":
        kwargs = {
            name: np.asarray(data[name], dtype=np.float64)
            for name in ("frame_times_s", "zcr", "ste", "sc_hz", "loudness_sone", "loudness_phon")
        }
        kwargs["silent_flags"] = np.asarray(data["silent_flags"], dtype=bool)
        return cls(**kwargs)


@dataclass(frozen=True)
class FeatureSummary:
    mean_zcr: float
    mean_sc_hz: float
    mean_ste: float
    mean_loudness_phon: float
    frame_count: int
    duration_s: float
    # True when every frame was silent and the means cover all frames.
    all_silent: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSummary":
        return cls(**data)


def frame_signal(clip: AudioClip, cfg: FrameConfig) -> List[np.ndarray]:
    """Split a clip into overlapping frames of N samples advancing by H.

    Clips shorter than one window produce no frames.
    """
    starts = frame_starts(clip.samples.size, clip.sample_rate_hz, cfg)
    n = cfg.window_samples(clip.sample_rate_hz)
    return [clip.samples[s : s + n] for s in starts]


def frame_starts(n_samples: int, sample_rate_hz: int, cfg: FrameConfig) -> np.ndarray:
    cfg.validate(sample_rate_hz)
    n = cfg.window_samples(sample_rate_hz)
    h = cfg.hop_samples(sample_rate_hz)
    if n_samples < n or n == 0:
        return np.zeros(0, dtype=np.int64)
    count = (n_samples - n) // h + 1
    return np.arange(count, dtype=np.int64) * h


def zero_crossing_rate(frame: Sequence[float]) -> float:
    x = np.asarray(frame, dtype=np.float64)
    if x.size < 2:
        raise DegenerateInputError("zero-crossing rate needs at least two samples")
    crossings = np.count_nonzero(x[:-1] * x[1:] < 0)
    return crossings / (x.size - 1)


def short_time_energy(frame: Sequence[float]) -> float:
    """Mean-square amplitude of the frame."""
    x = np.asarray(frame, dtype=np.float64)
    if x.size == 0:
        raise DegenerateInputError("short-time energy of an empty frame")
    return float(np.mean(x * x))


def analysis_window(n: int, kind: str = "hann") -> np.ndarray:
    if kind == "rect":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def magnitude_spectrum(
    frame: Sequence[float], cfg: FrameConfig, sample_rate_hz: int
) -> SpectrumFrame:
    x = np.asarray(frame, dtype=np.float64)
    if x.size > cfg.fft_size:
        raise ConfigurationError(
            f"frame of {x.size} samples does not fit fft_size {cfg.fft_size}"
        )
    mags = np.abs(np.fft.rfft(x * analysis_window(x.size, cfg.window), n=cfg.fft_size))
    return SpectrumFrame(mags, sample_rate_hz / cfg.fft_size)


def spectral_centroid(spec: SpectrumFrame) -> float:
    """Magnitude-weighted mean frequency; 0.0 for an all-zero spectrum."""
    total = float(np.sum(spec.magnitudes))
    if total <= 0.0:
        return 0.0
    return float(np.dot(spec.frequencies, spec.magnitudes) / total)


def hz_to_bark(f):
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr < 0):
        raise DspError("frequency must be >= 0 Hz")
    z = 13.0 * np.arctan(0.00076 * f_arr) + 3.5 * np.arctan((f_arr / 7500.0) ** 2)
    return float(z) if np.ndim(f) == 0 else z


def bark_band_index(frequencies: np.ndarray, n_bands: int) -> np.ndarray:
    """Band number per bin, or -1 for bins at or above the Bark ceiling."""
    idx = np.floor(hz_to_bark(np.asarray(frequencies, dtype=np.float64))).astype(np.int64)
    idx[idx >= n_bands] = -1
    return idx


def bark_band_energies(spec: SpectrumFrame, params: LoudnessParams) -> np.ndarray:
    idx = bark_band_index(spec.frequencies, params.n_bark_bands)
    keep = idx >= 0
    power = spec.magnitudes[keep] ** 2
    return np.bincount(idx[keep], weights=power, minlength=params.n_bark_bands)


def specific_loudness(band_energies, params: LoudnessParams) -> np.ndarray:
    if params.reference_energy is None:
        raise ConfigurationError("reference_energy is unset; call calibrate_loudness first")
    e = np.asarray(band_energies, dtype=np.float64)
    if np.any(e < 0):
        raise DspError("band energies must be >= 0")
    out = np.zeros_like(e)
    pos = e > 0
    out[pos] = (e[pos] / params.reference_energy) ** params.compress_exponent
    return out


def total_loudness_sone(specific) -> float:
    # unit-width Bark bands, rectangle rule
    return float(np.sum(np.asarray(specific, dtype=np.float64)))


def loudness_level_phon(n_sone):
    n = np.maximum(np.asarray(n_sone, dtype=np.float64), MIN_SONE)
    phon = 40.0 + 10.0 * np.log2(n)
    return float(phon) if np.ndim(n_sone) == 0 else phon


def calibrate_loudness(
    params: LoudnessParams, cfg: FrameConfig, sample_rate_hz: int
) -> LoudnessParams:
    """Fill in reference_energy from the full-scale-sine calibration anchor.

    A full-scale 1 kHz sine is taken to be ``calibration_db_spl``. The
    reference is chosen so that the same tone attenuated to 40 dB SPL
    measures exactly 1 sone (40 phon) through the whole chain, leakage into
    neighbouring bands included.
    """
    params.validate()
    if params.reference_energy is not None:
        return params
    cfg.validate(sample_rate_hz)
    n = cfg.window_samples(sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    tone = np.sin(2.0 * np.pi * CALIBRATION_TONE_HZ * t)
    bands = bark_band_energies(magnitude_spectrum(tone, cfg, sample_rate_hz), params)
    bands = bands * 10.0 ** (-(params.calibration_db_spl - ONE_SONE_DB_SPL) / 10.0)
    a = params.compress_exponent
    # sum_b (E_b / ref)^a == 1  =>  ref = (sum_b E_b^a)^(1/a)
    reference = float(np.sum(bands[bands > 0] ** a) ** (1.0 / a))
    return replace(params, reference_energy=reference)


def extract_features(
    clip: AudioClip, cfg: FrameConfig, params: LoudnessParams = LoudnessParams()
) -> FeatureSeries:
    fs = clip.sample_rate_hz
    starts = frame_starts(clip.samples.size, fs, cfg)
    params = calibrate_loudness(params, cfg, fs)
    n = cfg.window_samples(fs)
    h = cfg.hop_samples(fs)
    m = starts.size
    if m == 0:
        empty = np.zeros(0)
        return FeatureSeries(empty, empty, empty, empty, empty, empty, np.zeros(0, dtype=bool))

    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, n)[::h][:m]

    zcr = np.count_nonzero(frames[:, :-1] * frames[:, 1:] < 0, axis=1) / (n - 1) if n > 1 else np.zeros(m)
    ste = np.mean(frames * frames, axis=1)

    mags = np.abs(np.fft.rfft(frames * analysis_window(n, cfg.window), n=cfg.fft_size, axis=1))
    bin_hz = fs / cfg.fft_size
    freqs = np.arange(mags.shape[1]) * bin_hz
    mag_sum = mags.sum(axis=1)
    sc = np.zeros(m)
    nz = mag_sum > 0
    sc[nz] = (mags[nz] @ freqs) / mag_sum[nz]

    idx = bark_band_index(freqs, params.n_bark_bands)
    membership = np.zeros((freqs.size, params.n_bark_bands))
    keep = idx >= 0
    membership[np.flatnonzero(keep), idx[keep]] = 1.0
    bands = (mags * mags) @ membership
    sone = specific_loudness(bands, params).sum(axis=1)
    phon = loudness_level_phon(sone)

    times = (starts + n / 2.0) / fs
    silent = (ste < cfg.silence_floor) | ~nz
    return FeatureSeries(times, zcr.astype(np.float64), ste, sc, sone, np.asarray(phon), silent)


def summarize_features(series: FeatureSeries, duration_s: Optional[float] = None) -> FeatureSummary:
    m = len(series)
    if m == 0:
        raise EmptySummaryError("cannot summarize an empty feature series")
    active = ~series.silent_flags
    all_silent = not bool(active.any())
    if all_silent:
        active = np.ones(m, dtype=bool)
    if duration_s is None:
        # end of the last frame: last center plus half a window (= first center)
        duration_s = float(series.frame_times_s[-1] + series.frame_times_s[0])
    return FeatureSummary(
        mean_zcr=float(np.mean(series.zcr[active])),
        mean_sc_hz=float(np.mean(series.sc_hz[active])),
        mean_ste=float(np.mean(series.ste[active])),
        mean_loudness_phon=float(np.mean(series.loudness_phon[active])),
        frame_count=m,
        duration_s=float(duration_s),
        all_silent=all_silent,
    )
