"""In-process stand-in for the cloud feature store.

Accepts ``POST /records`` with a sync envelope, dedupes on ``record_id`` and
answers ``{"accepted": [...]}``. Faults can be injected to exercise the
gateway's retry path:

* ``drop_rate``      answer 503 without committing anything
* ``lost_ack_rate``  commit, then drop the connection before replying
* ``ack_delay_s``    commit, then sleep before replying (for a
                     ``delay_rate`` fraction of requests)
"""

from __future__ import annotations

import json
import random
import threading
import time
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, Optional

from .sync import SCHEMA_VERSION


class MockCloud:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        drop_rate: float = 0.0,
        lost_ack_rate: float = 0.0,
        ack_delay_s: float = 0.0,
        delay_rate: float = 1.0,
        seed: Optional[int] = None,
        token: Optional[str] = None,
    ):
        self.drop_rate = drop_rate
        self.lost_ack_rate = lost_ack_rate
        self.ack_delay_s = ack_delay_s
        self.delay_rate = delay_rate
        self.token = token
        self.rng = random.Random(seed)
        self.records: Dict[str, dict] = {}
        self.deliveries: Counter = Counter()
        self.requests = 0
        self.fail_next = 0
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, port), self._handler_class())
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/records"

    def start(self) -> "MockCloud":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _ingest(self, body: bytes):
        """Returns (status, payload, fault) where fault is None, 'lost' or 'delay'."""
        with self._lock:
            self.requests += 1
            if self.fail_next > 0:
                self.fail_next -= 1
                return 503, {"error": "injected failure"}, None
            if self.rng.random() < self.drop_rate:
                return 503, {"error": "injected drop"}, None
            try:
                env = json.loads(body)
            except ValueError:
                return 400, {"error": "malformed json"}, None
            if env.get("schema_version") != SCHEMA_VERSION:
                return 422, {"error": f"unsupported schema_version {env.get('schema_version')}"}, None
            accepted = []
            for rec in env.get("records", []):
                rid = rec.get("record_id")
                if not rid:
                    return 422, {"error": "record without record_id"}, None
                self.deliveries[rid] += 1
                self.records.setdefault(rid, rec)
                accepted.append(rid)
            fault = None
            if self.rng.random() < self.lost_ack_rate:
                fault = "lost"
            elif self.ack_delay_s and self.rng.random() < self.delay_rate:
                fault = "delay"
            return 200, {"accepted": accepted}, fault

    def _handler_class(self):
        cloud = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                if self.path != "/records":
                    self._reply(404, {"error": "not found"})
                    return
                if cloud.token and self.headers.get("Authorization") != f"Bearer {cloud.token}":
                    self._reply(401, {"error": "unauthorized"})
                    return
                length = int(self.headers.get("Content-Length") or 0)
                status, payload, fault = cloud._ingest(self.rfile.read(length))
                if fault == "lost":
                    self.close_connection = True
                    self.connection.close()
                    return
                if fault == "delay":
                    time.sleep(cloud.ack_delay_s)
                self._reply(status, payload)

            def _reply(self, status, payload):
                body = json.dumps(payload).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    # the client gave up waiting; it will retry
                    pass

        return Handler
