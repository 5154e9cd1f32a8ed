"""Append-only feature-record store with a separate sync-state index.

Layout under the data directory::

    records.jsonl      one FeatureRecord per line, append-only except when
                       a corrupt line is cut out (atomic replace)
    state.jsonl        one {"id", "state", "at"} transition per line
    quarantine.jsonl   unparseable lines removed from either file

A record's state is the last transition in ``state.jsonl`` (pending if none).
Transitions out of ``synced`` or ``dead`` are ignored, so replaying the index
can never move a record backwards.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from .dsp import FeatureSeries, FeatureSummary

log = logging.getLogger(__name__)

PENDING = "pending"
SYNCED = "synced"
DEAD = "dead"
STATES = (PENDING, SYNCED, DEAD)


class PersistenceError(Exception):
    pass


def format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def parse_ts(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class FeatureRecord:
    record_id: str
    source_name: str
    captured_at: datetime
    processed_at: datetime
    duration_s: float
    size_bytes: int
    processing_time_s: float
    config_snapshot: dict
    summary: FeatureSummary
    task_label: Optional[str] = None
    series: Optional[FeatureSeries] = field(default=None, compare=False)
    sync_state: str = PENDING

    def __post_init__(self):
        if self.processing_time_s < 0:
            raise ValueError("processing_time_s must be >= 0")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be > 0")
        if self.sync_state not in STATES:
            raise ValueError(f"unknown sync_state {self.sync_state!r}")

    @property
    def series_included(self) -> bool:
        return self.series is not None

    def to_dict(self, include_series: bool = True) -> dict:
        out = {
            "record_id": self.record_id,
            "source_name": self.source_name,
            "task_label": self.task_label,
            "captured_at": format_ts(self.captured_at),
            "processed_at": format_ts(self.processed_at),
            "duration_s": self.duration_s,
            "size_bytes": self.size_bytes,
            "processing_time_s": self.processing_time_s,
            "config_snapshot": self.config_snapshot,
            "summary": self.summary.to_dict(),
            "series_included": include_series and self.series is not None,
            "sync_state": self.sync_state,
        }
        if out["series_included"]:
            out["series"] = self.series.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureRecord":
        series = data.get("series")
        return cls(
            record_id=data["record_id"],
            source_name=data["source_name"],
            task_label=data.get("task_label"),
            captured_at=parse_ts(data["captured_at"]),
            processed_at=parse_ts(data["processed_at"]),
            duration_s=float(data["duration_s"]),
            size_bytes=int(data["size_bytes"]),
            processing_time_s=float(data["processing_time_s"]),
            config_snapshot=data["config_snapshot"],
            summary=FeatureSummary.from_dict(data["summary"]),
            series=FeatureSeries.from_dict(series) if series is not None else None,
            sync_state=data.get("sync_state", PENDING),
        )


@dataclass
class MarkResult:
    applied: List[str] = field(default_factory=list)
    unchanged: List[str] = field(default_factory=list)
    unknown: List[str] = field(default_factory=list)


def _fsync_append(path: Path, line: str) -> None:
    """Append one line durably; on failure the file is cut back to its old length."""
    with open(path, "ab") as fh:
        start = fh.tell()
        try:
            fh.write(line.encode("utf-8"))
            fh.flush()
            os.fsync(fh.fileno())
        except BaseException:
            fh.truncate(start)
            raise


class RecordStore:
    """Single-writer durable store of FeatureRecords.

    All mutation goes through one lock; reads take a snapshot under the same
    lock and are safe to call from other threads.
    """

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.records_path = self.data_dir / "records.jsonl"
        self.state_path = self.data_dir / "state.jsonl"
        self.quarantine_path = self.data_dir / "quarantine.jsonl"
        self._lock = threading.RLock()
        self._records: Dict[str, FeatureRecord] = {}
        self._order: Dict[str, int] = {}
        self._state: Dict[str, str] = {}
        # test hook: called with the serialized line before each append
        self.write_hook = None
        self._load()

    # -- loading -------------------------------------------------------

    def _read_lines(self, path: Path, kind: str) -> List[dict]:
        if not path.exists():
            return []
        raw = path.read_bytes()
        good, bad, kept = [], [], []
        for chunk in raw.split(b"\n"):
            if not chunk.strip():
                continue
            try:
                good.append(json.loads(chunk))
                kept.append(chunk)
            except (ValueError, UnicodeDecodeError):
                bad.append(chunk)
        if bad:
            self._quarantine(kind, bad)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(b"".join(c + b"\n" for c in kept))
            os.replace(tmp, path)
        return good

    def _quarantine(self, kind: str, chunks: Iterable[bytes]) -> None:
        with open(self.quarantine_path, "a") as fh:
            for chunk in chunks:
                log.warning("quarantining corrupt %s entry (%d bytes)", kind, len(chunk))
                fh.write(json.dumps({"source": kind, "raw": chunk.decode("utf-8", "replace")}) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _load(self) -> None:
        for i, data in enumerate(self._read_lines(self.records_path, "records")):
            try:
                rec = FeatureRecord.from_dict(data)
            except (KeyError, TypeError, ValueError):
                self._quarantine("records", [json.dumps(data).encode()])
                continue
            if rec.record_id in self._records:
                continue
            self._records[rec.record_id] = replace(rec, sync_state=PENDING)
            self._order[rec.record_id] = i
            self._state[rec.record_id] = PENDING
        for entry in self._read_lines(self.state_path, "state"):
            rid, state = entry.get("id"), entry.get("state")
            if rid in self._state and state in STATES:
                self._advance(rid, state)

    def _advance(self, rid: str, state: str) -> bool:
        current = self._state[rid]
        if current == state or current != PENDING:
            return False
        self._state[rid] = state
        return True

    # -- queries -------------------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, record_id) -> bool:
        return record_id in self._records

    def get(self, record_id: str) -> FeatureRecord:
        with self._lock:
            return replace(self._records[record_id], sync_state=self._state[record_id])

    def state_of(self, record_id: str) -> str:
        return self._state[record_id]

    def all_records(self) -> List[FeatureRecord]:
        with self._lock:
            ids = sorted(self._records, key=self._order.__getitem__)
            return [self.get(rid) for rid in ids]

    def counts(self) -> Dict[str, int]:
        with self._lock:
            out = {s: 0 for s in STATES}
            for s in self._state.values():
                out[s] += 1
            return out

    def load_pending(self, limit: Optional[int] = None) -> List[FeatureRecord]:
        """Pending records, oldest ``processed_at`` first."""
        with self._lock:
            ids = [rid for rid, s in self._state.items() if s == PENDING]
            ids.sort(key=lambda rid: (self._records[rid].processed_at, self._order[rid]))
            if limit is not None:
                ids = ids[:limit]
            return [self.get(rid) for rid in ids]

    # -- mutation ------------------------------------------------------

    def persist_record(self, record: FeatureRecord) -> FeatureRecord:
        """Durably append a record; a second call with the same id is a no-op."""
        with self._lock:
            if record.record_id in self._records:
                return self.get(record.record_id)
            record = replace(record, sync_state=PENDING)
            try:
                line = json.dumps(record.to_dict(), allow_nan=False) + "\n"
                if self.write_hook is not None:
                    self.write_hook(line)
                _fsync_append(self.records_path, line)
            except (OSError, ValueError) as exc:
                raise PersistenceError(f"could not persist {record.record_id}: {exc}") from exc
            self._order[record.record_id] = len(self._order)
            self._records[record.record_id] = record
            self._state[record.record_id] = PENDING
            return record

    def _transition(self, record_ids: Iterable[str], state: str) -> MarkResult:
        result = MarkResult()
        with self._lock:
            for rid in record_ids:
                if rid not in self._state:
                    result.unknown.append(rid)
                    continue
                if self._state[rid] != PENDING:
                    result.unchanged.append(rid)
                    continue
                entry = {"id": rid, "state": state, "at": format_ts(datetime.now(timezone.utc))}
                _fsync_append(self.state_path, json.dumps(entry) + "\n")
                self._advance(rid, state)
                result.applied.append(rid)
        return result

    def mark_synced(self, record_ids: Iterable[str]) -> MarkResult:
        return self._transition(record_ids, SYNCED)

    def mark_dead(self, record_ids: Iterable[str]) -> MarkResult:
        return self._transition(record_ids, DEAD)
