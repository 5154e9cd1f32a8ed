"""The fog pipeline: inbox event -> decode -> features -> record -> cloud."""

from __future__ import annotations

import json
import logging
import queue
import shutil
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, List, Optional

from .config import ConfigHandle, ConfigRejected, ConfigUpdate, GatewayConfig
from .dsp import DspError, calibrate_loudness, extract_features, summarize_features
from .ingest import IngestError, InboxEvent, InboxWatcher, ProcessedLedger, decode_wav, scan_inbox
from .store import FeatureRecord, RecordStore
from .sync import HttpTransport, RetryPolicy, SyncWorker

log = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


@dataclass
class Rejection:
    path: Path
    reason: str


def analyze(data: bytes, config: GatewayConfig):
    """Decode and extract; the span timed as processing_time_s.

    Returns (clip, series, summary, resolved loudness params).
    """
    clip, _ = decode_wav(data)
    params = calibrate_loudness(config.loudness, config.frame, clip.sample_rate_hz)
    series = extract_features(clip, config.frame, params)
    summary = summarize_features(series, clip.duration_s)
    return clip, series, summary, params


def config_snapshot(config: GatewayConfig, params) -> dict:
    return {"frame": asdict(config.frame), "loudness": asdict(params)}


def reject_file(path: Path, rejects_dir: Path, reason: str) -> Path:
    """Move a file out of the inbox next to a ``.reason`` note; never deletes."""
    rejects_dir.mkdir(parents=True, exist_ok=True)
    target = rejects_dir / path.name
    n = 1
    while target.exists():
        target = rejects_dir / f"{path.stem}.{n}{path.suffix}"
        n += 1
    shutil.move(str(path), target)
    target.with_name(target.name + ".reason").write_text(reason + "\n")
    return target


def process_file(
    event: InboxEvent,
    config: GatewayConfig,
    store: RecordStore,
    ledger: Optional[ProcessedLedger] = None,
    task_label: Optional[str] = None,
    fault: Callable[[str], None] = lambda stage: None,
) -> FeatureRecord:
    """Run one inbox file through the pipeline and persist its record.

    Undecodable or empty files raise :class:`GatewayError` after being moved
    to the rejects directory. ``fault`` is called between stages so tests
    can simulate a crash at any of them.
    """
    data = event.path.read_bytes()
    t0 = time.perf_counter()
    try:
        clip, series, summary, params = analyze(data, config)
    except (IngestError, DspError) as exc:
        reason = f"{type(exc).__name__}: {exc}"
        reject_file(event.path, config.rejects_dir, reason)
        raise GatewayError(reason) from exc
    elapsed = time.perf_counter() - t0
    fault("analyzed")

    record = FeatureRecord(
        record_id=event.file_id,
        source_name=event.path.name,
        task_label=task_label or event.path.stem,
        captured_at=event.observed_at,
        processed_at=datetime.now(timezone.utc),
        duration_s=clip.duration_s,
        size_bytes=len(data),
        processing_time_s=elapsed,
        config_snapshot=config_snapshot(config, params),
        summary=summary,
        series=series if config.store_series else None,
    )
    record = store.persist_record(record)
    fault("persisted")
    if ledger is not None:
        ledger.add(event.file_id)
    fault("ledgered")
    return record


class Gateway:
    """Watcher, pipeline worker(s) and sync worker around one data directory."""

    def __init__(self, config: GatewayConfig, transport=None, fault=None, sync_sleep=None):
        self.handle = ConfigHandle(config)
        data_dir = Path(config.data_dir)
        self.store = RecordStore(data_dir)
        self.ledger = ProcessedLedger(data_dir / "processed.txt")
        Path(config.inbox_dir).mkdir(parents=True, exist_ok=True)
        self.started_at = time.monotonic()
        self.files_processed = 0
        self.files_rejected = 0
        self.last_error: Optional[str] = None
        self.rejections: List[Rejection] = []
        self.fault = fault or (lambda stage: None)
        self._counter_lock = threading.Lock()
        if transport is None and config.cloud_url:
            transport = HttpTransport(config.cloud_url, config.cloud_token or None)
        self.transport = transport
        self.sync_worker = (
            SyncWorker(
                self.store,
                transport,
                gateway_id=config.gateway_id,
                max_batch=config.max_batch,
                include_series=config.sync_series,
                policy=RetryPolicy(),
                sleep=sync_sleep,
            )
            if transport is not None
            else None
        )
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []
        self._queue: "queue.Queue[Optional[InboxEvent]]" = queue.Queue()
        self._admin: Optional[ThreadingHTTPServer] = None

    @property
    def config(self) -> GatewayConfig:
        return self.handle.current()

    def handle_event(self, event: InboxEvent) -> Optional[FeatureRecord]:
        # config is read once per file: updates land at file boundaries
        config = self.handle.current()
        try:
            if event.file_id in self.ledger:
                return None
            record = process_file(event, config, self.store, self.ledger, fault=self.fault)
        except GatewayError as exc:
            log.warning("rejected %s: %s", event.path.name, exc)
            with self._counter_lock:
                self.files_processed += 1
                self.files_rejected += 1
                self.last_error = f"{event.path.name}: {exc}"
                self.rejections.append(Rejection(event.path, str(exc)))
            return None
        except FileNotFoundError:
            return None
        with self._counter_lock:
            self.files_processed += 1
        return record

    def run_once(self) -> List[FeatureRecord]:
        """Process every unprocessed inbox file now, in filename order."""
        records = []
        for event in scan_inbox(self.config.inbox_dir, self.ledger):
            rec = self.handle_event(event)
            if rec is not None:
                records.append(rec)
        return records

    def sync_now(self) -> int:
        if self.sync_worker is None:
            raise GatewayError("no cloud endpoint configured")
        return self.sync_worker.drain()

    def health(self) -> dict:
        counts = self.store.counts()
        return {
            "uptime_s": round(time.monotonic() - self.started_at, 3),
            "processed": self.files_processed,
            "rejected": self.files_rejected,
            "records": len(self.store),
            "pending": counts["pending"],
            "synced": counts["synced"],
            "dead_letter": counts["dead"],
            "last_error": self.last_error or (self.sync_worker.last_error if self.sync_worker else None),
        }

    # -- daemon --------------------------------------------------------

    def _watch_loop(self) -> None:
        watcher = InboxWatcher(self.config.inbox_dir, self.ledger)
        while not self._stop.is_set():
            try:
                for event in watcher.poll():
                    self._queue.put(event)
            except IngestError as exc:
                self.last_error = str(exc)
                log.error("watcher stopped: %s", exc)
                break
            self._stop.wait(self.config.poll_interval_ms / 1000.0)

    def _work_loop(self) -> None:
        while True:
            event = self._queue.get()
            if event is None:
                return
            try:
                self.handle_event(event)
            except Exception as exc:
                self.last_error = f"{event.path.name}: {exc}"
                log.exception("pipeline error")

    def _sync_loop(self) -> None:
        while not self._stop.is_set():
            try:
                self.sync_worker.drain()
            except Exception as exc:
                self.last_error = str(exc)
                log.exception("sync error")
            self._stop.wait(self.config.sync_interval_s)

    def start(self, admin: bool = False) -> "Gateway":
        targets = [self._watch_loop] + [self._work_loop] * self.config.workers
        if self.sync_worker is not None:
            targets.append(self._sync_loop)
        if admin:
            self._admin = make_admin_server(self)
            targets.append(self._admin.serve_forever)
        for target in targets:
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self.sync_worker is not None:
            self.sync_worker.stop()
        for _ in range(self.config.workers):
            self._queue.put(None)
        if self._admin is not None:
            self._admin.shutdown()
            self._admin.server_close()
        for t in self._threads:
            t.join(timeout)
        self._threads.clear()

    @property
    def admin_url(self) -> str:
        host, port = self._admin.server_address[:2]
        return f"http://{host}:{port}"


def make_admin_server(gateway: Gateway, bind=None) -> ThreadingHTTPServer:
    """HTTP admin surface: GET /config, PUT /config, GET /health."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_GET(self):
            if self.path == "/config":
                self._reply(200, gateway.config.to_dict())
            elif self.path == "/health":
                self._reply(200, gateway.health())
            else:
                self._reply(404, {"error": "not found"})

        def do_PUT(self):
            if self.path != "/config":
                self._reply(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
                if not isinstance(body, dict):
                    raise ValueError("body must be a JSON object")
            except ValueError as exc:
                self._reply(400, {"accepted": False, "reason": f"malformed update: {exc}"})
                return
            if "changes" in body:
                changes = body["changes"]
            else:
                changes = {k: v for k, v in body.items() if k != "update_id"}
            kwargs = {"update_id": body["update_id"]} if "update_id" in body else {}
            update = ConfigUpdate(changes, **kwargs)
            try:
                new = gateway.handle.submit(update)
            except ConfigRejected as exc:
                self._reply(422, {"accepted": False, "update_id": update.update_id, "reason": str(exc)})
                return
            self._reply(200, {"accepted": True, "update_id": update.update_id, "config": new.to_dict()})

        def _reply(self, status, payload):
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    try:
        server = ThreadingHTTPServer(bind or gateway.config.admin_address, Handler)
    except OSError as exc:
        raise GatewayError(f"cannot bind admin endpoint {gateway.config.admin_bind}: {exc}") from exc
    server.daemon_threads = True
    return server
