"""Batch upload of pending records to the cloud endpoint.

Delivery is at-least-once: a batch is retried until the endpoint
acknowledges it, and the endpoint dedupes on ``record_id``.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, List, Optional, Sequence, Tuple

from .store import PENDING, FeatureRecord, RecordStore, format_ts

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
# statuses that mean "this payload will never be accepted"
PERMANENT_REJECT_STATUSES = frozenset({400, 409, 415, 422})


class SyncError(Exception):
    pass


@dataclass
class SyncEnvelope:
    gateway_id: str
    records: Sequence[FeatureRecord]
    include_series: bool = False
    schema_version: int = SCHEMA_VERSION
    sent_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def validate(self, max_batch: int) -> None:
        if not 1 <= len(self.records) <= max_batch:
            raise SyncError(f"batch size {len(self.records)} outside [1, {max_batch}]")
        for rec in self.records:
            if rec.sync_state != PENDING:
                raise SyncError(f"record {rec.record_id} is {rec.sync_state}, not pending")

    def to_json(self) -> bytes:
        body = {
            "gateway_id": self.gateway_id,
            "schema_version": self.schema_version,
            "sent_at": format_ts(self.sent_at),
            "records": [r.to_dict(include_series=self.include_series) for r in self.records],
        }
        return json.dumps(body, allow_nan=False).encode("utf-8")


@dataclass
class RetryPolicy:
    base_s: float = 1.0
    factor: float = 2.0
    cap_s: float = 300.0
    jitter: float = 0.2
    rng: random.Random = field(default_factory=random.Random)

    def delay(self, attempt: int) -> float:
        """Backoff before retry number ``attempt`` (1-based), jittered by +/-20%."""
        raw = min(self.cap_s, self.base_s * self.factor ** (attempt - 1))
        return raw * self.rng.uniform(1.0 - self.jitter, 1.0 + self.jitter)


class HttpTransport:
    def __init__(self, url: str, token: Optional[str] = None, timeout: float = 10.0):
        self.url = url
        self.token = token
        self.timeout = timeout

    def post(self, body: bytes) -> Tuple[int, bytes]:
        """POST the body; returns (status, response body). Network errors raise OSError."""
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read()


@dataclass
class SyncOutcome:
    synced: List[str] = field(default_factory=list)
    dead: List[str] = field(default_factory=list)
    pending: List[str] = field(default_factory=list)
    retry: bool = False
    error: Optional[str] = None


def sync_batch(envelope: SyncEnvelope, transport, store: RecordStore) -> SyncOutcome:
    """Send one envelope and apply the resulting state transitions.

    2xx with an ack marks the acknowledged ids synced; ids missing from the
    ack stay pending. Schema-level rejections park the batch in dead-letter.
    Anything else leaves the batch pending with ``retry`` set.
    """
    ids = [r.record_id for r in envelope.records]
    try:
        status, body = transport.post(envelope.to_json())
    except OSError as exc:
        return SyncOutcome(pending=ids, retry=True, error=f"transport: {exc}")

    if 200 <= status < 300:
        try:
            accepted = set(json.loads(body)["accepted"])
        except (ValueError, KeyError, TypeError):
            return SyncOutcome(pending=ids, retry=True, error="malformed ack")
        synced = [rid for rid in ids if rid in accepted]
        store.mark_synced(synced)
        rest = [rid for rid in ids if rid not in accepted]
        return SyncOutcome(synced=synced, pending=rest, retry=bool(rest))
    if status in PERMANENT_REJECT_STATUSES:
        store.mark_dead(ids)
        log.error("cloud rejected batch permanently (%s): %s", status, body[:200])
        return SyncOutcome(dead=ids, error=f"rejected with status {status}")
    return SyncOutcome(pending=ids, retry=True, error=f"status {status}")


class SyncWorker:
    """Drains the store's pending records in batches, backing off on failure."""

    def __init__(
        self,
        store: RecordStore,
        transport,
        gateway_id: str = "fit-gateway",
        max_batch: int = 16,
        include_series: bool = False,
        policy: Optional[RetryPolicy] = None,
        sleep: Callable[[float], None] = None,
    ):
        self.store = store
        self.transport = transport
        self.gateway_id = gateway_id
        self.max_batch = max_batch
        self.include_series = include_series
        self.policy = policy or RetryPolicy()
        self.failures = 0
        self.last_error: Optional[str] = None
        self.delays: List[float] = []
        self._stop = threading.Event()
        self._sleep = sleep or self._stop.wait

    def next_envelope(self) -> Optional[SyncEnvelope]:
        pending = self.store.load_pending(self.max_batch)
        if not pending:
            return None
        return SyncEnvelope(self.gateway_id, pending, include_series=self.include_series)

    def step(self) -> Optional[SyncOutcome]:
        """Send at most one batch. Returns None when nothing is pending."""
        env = self.next_envelope()
        if env is None:
            return None
        env.validate(self.max_batch)
        outcome = sync_batch(env, self.transport, self.store)
        if outcome.retry:
            self.failures += 1
            self.last_error = outcome.error
        else:
            self.failures = 0
        return outcome

    def drain(self, max_attempts: Optional[int] = None) -> int:
        """Sync until nothing is pending, sleeping with backoff between failures.

        Returns the number of batches attempted.
        """
        attempts = 0
        while not self._stop.is_set():
            if max_attempts is not None and attempts >= max_attempts:
                break
            outcome = self.step()
            if outcome is None:
                break
            attempts += 1
            if outcome.retry:
                delay = self.policy.delay(self.failures)
                self.delays.append(delay)
                log.info("sync failed (%s); retrying in %.2fs", outcome.error, delay)
                self._sleep(delay)
        return attempts

    def run(self, interval_s: float) -> None:
        while not self._stop.is_set():
            try:
                self.drain()
            except Exception as exc:  # keep the background worker alive
                self.last_error = str(exc)
                log.exception("sync worker error")
            self._stop.wait(interval_s)

    def stop(self) -> None:
        self._stop.set()
