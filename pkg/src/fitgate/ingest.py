"""WAV decoding and the inbox folder the upstream device drops recordings into."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Container, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .dsp import AudioClip

log = logging.getLogger(__name__)

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
# GUID tail shared by all KSDATAFORMAT_SUBTYPE_* values
_KSDATAFORMAT_TAIL = b"\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"


class IngestError(Exception):
    pass


class WavDecodeError(IngestError):
    pass


class UnsupportedFormatError(WavDecodeError):
    def __init__(self, field: str, value, expected):
        self.field = field
        self.value = value
        super().__init__(f"unsupported {field}: {value} (expected {expected})")


@dataclass(frozen=True)
class PcmFormat:
    sample_rate_hz: int
    bits_per_sample: int = 16
    channels: int = 1

    @property
    def byte_rate(self) -> int:
        return self.sample_rate_hz * self.channels * self.bits_per_sample // 8

    @property
    def block_align(self) -> int:
        return self.channels * self.bits_per_sample // 8


@dataclass(frozen=True)
class InboxEvent:
    path: Path
    file_id: str
    observed_at: datetime
    size_bytes: int


def utcnow() -> datetime:
    now = datetime.now(timezone.utc)
    return now.replace(microsecond=now.microsecond // 1000 * 1000)


def compute_file_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _iter_chunks(data: bytes) -> Iterator[Tuple[bytes, int, int]]:
    """Yield (chunk_id, payload_offset, declared_size) for every RIFF sub-chunk."""
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        yield cid, pos + 8, size
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> Tuple[AudioClip, PcmFormat]:
    """Decode a 16-bit mono linear-PCM RIFF/WAVE byte string.

    Samples are scaled by 1/32768, so -32768 maps to exactly -1.0.
    Raises WavDecodeError on a malformed or truncated file and
    UnsupportedFormatError (naming the field) on anything but 16-bit mono PCM.
    """
    if len(data) < 12:
        raise WavDecodeError("file too short for a RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavDecodeError("not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, offset, size in _iter_chunks(data):
        if cid == b"fmt ":
            if size < 16 or offset + size > len(data):
                raise WavDecodeError("truncated fmt chunk")
            fmt = _parse_fmt(data[offset : offset + size])
        elif cid == b"data":
            if fmt is None:
                raise WavDecodeError("data chunk precedes fmt chunk")
            if offset + size > len(data):
                raise WavDecodeError(
                    f"data chunk declares {size} bytes but only {len(data) - offset} present"
                )
            payload = data[offset : offset + size]
            break
    if fmt is None:
        raise WavDecodeError("missing fmt chunk")
    if payload is None:
        raise WavDecodeError("missing data chunk")
    if len(payload) % fmt.block_align:
        raise WavDecodeError("data chunk is not a whole number of sample frames")

    samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, fmt.sample_rate_hz), fmt


def _parse_fmt(chunk: bytes) -> PcmFormat:
    tag, channels, rate, byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", chunk, 0)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(chunk) < 40 or chunk[26:40] != _KSDATAFORMAT_TAIL:
            raise UnsupportedFormatError("format_tag", hex(tag), "linear PCM")
        tag = struct.unpack_from("<H", chunk, 24)[0]
    if tag != WAVE_FORMAT_PCM:
        raise UnsupportedFormatError("format_tag", hex(tag), "linear PCM (0x1)")
    if channels != 1:
        raise UnsupportedFormatError("channels", channels, 1)
    if bits != 16:
        raise UnsupportedFormatError("bits_per_sample", bits, 16)
    if rate == 0:
        raise WavDecodeError("sample rate of 0 Hz")
    fmt = PcmFormat(rate, bits, channels)
    if byte_rate != fmt.byte_rate or block_align != fmt.block_align:
        raise WavDecodeError(
            f"inconsistent header: byte_rate {byte_rate} / block_align {block_align} "
            f"for {rate} Hz {bits}-bit mono"
        )
    return fmt


def encode_wav(samples, sample_rate_hz: int) -> bytes:
    """Encode float samples in [-1, 1] as a canonical 44-byte-header 16-bit mono WAV."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    fmt = PcmFormat(sample_rate_hz)
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, 1, sample_rate_hz, fmt.byte_rate, fmt.block_align, 16,
        b"data", len(pcm),
    )
    return header + pcm


class ProcessedLedger:
    """Durable set of file ids whose records have been persisted.

    One hex id per line, appended and fsynced. Only the gateway writes it.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._ids = set()
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                line = line.strip()
                # a torn final write leaves a short id; it is simply re-processed
                if len(line) == 64:
                    self._ids.add(line)

    def __contains__(self, file_id) -> bool:
        return file_id in self._ids

    def __len__(self) -> int:
        return len(self._ids)

    def add(self, file_id: str) -> None:
        with self._lock:
            if file_id in self._ids:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(file_id + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._ids.add(file_id)


def _wav_entries(inbox: Path) -> List[os.DirEntry]:
    try:
        entries = list(os.scandir(inbox))
    except OSError as exc:
        raise IngestError(f"cannot read inbox {inbox}: {exc}") from exc
    wavs = [e for e in entries if e.name.lower().endswith(".wav") and e.is_file()]
    return sorted(wavs, key=lambda e: e.name)


def scan_inbox(inbox, processed: Container[str] = frozenset()) -> List[InboxEvent]:
    """One pass over the inbox: unprocessed ``.wav`` files in filename order."""
    events = []
    for entry in _wav_entries(Path(inbox)):
        try:
            data = Path(entry.path).read_bytes()
        except FileNotFoundError:
            continue
        file_id = compute_file_id(data)
        if file_id in processed:
            continue
        events.append(InboxEvent(Path(entry.path), file_id, utcnow(), len(data)))
    return events


class InboxWatcher:
    """Polling watcher with a settle rule.

    A file is emitted once its size is unchanged across two consecutive
    polls, and never twice for the same content within one watcher.
    """

    def __init__(self, inbox, processed: Container[str] = frozenset()):
        self.inbox = Path(inbox)
        self.processed = processed
        self._sizes: Dict[str, int] = {}
        self._emitted = set()

    def poll(self) -> List[InboxEvent]:
        if not self.inbox.is_dir():
            raise IngestError(f"inbox {self.inbox} disappeared")
        current = {}
        events = []
        for entry in _wav_entries(self.inbox):
            try:
                size = entry.stat().st_size
            except FileNotFoundError:
                continue
            current[entry.name] = size
            if self._sizes.get(entry.name) != size:
                continue
            try:
                data = Path(entry.path).read_bytes()
            except FileNotFoundError:
                continue
            if len(data) != size:
                continue
            file_id = compute_file_id(data)
            if file_id in self._emitted or file_id in self.processed:
                continue
            self._emitted.add(file_id)
            events.append(InboxEvent(Path(entry.path), file_id, utcnow(), size))
        self._sizes = current
        return events


def watch_inbox(
    inbox,
    poll_interval: float = 1.0,
    processed: Container[str] = frozenset(),
    stop: Optional[threading.Event] = None,
) -> Iterator[InboxEvent]:
    """Yield settled inbox files until ``stop`` is set.

    Raises IngestError if the inbox directory vanishes.
    """
    watcher = InboxWatcher(inbox, processed)
    stop = stop or threading.Event()
    while not stop.is_set():
        yield from watcher.poll()
        stop.wait(poll_interval)
