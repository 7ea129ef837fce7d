"""Line-delimited JSON routing daemon.

Each request line is ``{"id": ..., "tokens": [...]}`` and is answered with
``{"id": ..., "route": "edge"|"cloud", "prs": ..., "alpha": ...}``, the
same line the offline ``route`` command writes. Control lines:
``{"cmd": "stats"}`` returns the counters and ``{"cmd": "shutdown"}``
stops the server (loopback clients only). Bad lines get
``{"error": ..., "id": ...}`` and the connection stays open.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
import time
from dataclasses import dataclass, field

from .errors import PRSRouteError
from .router import Checkpoint
from .strategy import CLOUD, EDGE, RoutingDecision, RoutingPolicy, route

log = logging.getLogger(__name__)


@dataclass
class ServiceState:
    checkpoint: Checkpoint
    policy: RoutingPolicy
    hard_admission: bool = False
    requests: int = 0
    cloud: int = 0
    overrides: int = 0
    errors: int = 0
    started: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def stats(self) -> dict:
        with self.lock:
            total, cloud = self.requests, self.cloud
            return {"requests": total, "cloud": cloud, "edge": total - cloud,
                    "overrides": self.overrides, "errors": self.errors,
                    "cloud_rate": cloud / total if total else 0.0,
                    "rho": self.policy.rho, "alpha": self.policy.alpha,
                    "hard_admission": self.hard_admission,
                    "uptime_s": time.time() - self.started}


def admission_guard(state: ServiceState, decision: RoutingDecision) -> RoutingDecision:
    """Account for one decision; in hard mode, demote cloud decisions that
    would lift the running cloud rate above rho. Caller holds the lock."""
    state.requests += 1
    if decision.destination == CLOUD:
        if state.hard_admission and (state.cloud + 1) > state.policy.rho * state.requests:
            state.overrides += 1
            return RoutingDecision(decision.id, EDGE, decision.predicted_prs, decision.alpha)
        state.cloud += 1
    return decision


def handle_line(state: ServiceState, line: str, client_host: str | None = None) -> tuple[str, bool]:
    """Answer one request line. Returns ``(response, shutdown_requested)``."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        with state.lock:
            state.errors += 1
        return json.dumps({"error": f"invalid JSON: {exc.msg}", "id": None}), False
    if not isinstance(msg, dict):
        with state.lock:
            state.errors += 1
        return json.dumps({"error": "request must be a JSON object", "id": None}), False

    if "cmd" in msg:
        cmd = msg["cmd"]
        if cmd == "stats":
            return json.dumps(state.stats()), False
        if cmd == "shutdown":
            if client_host not in (None, "127.0.0.1", "::1", "localhost"):
                return json.dumps({"error": "shutdown is only accepted from loopback"}), False
            return json.dumps({"ok": True, "shutdown": True}), True
        return json.dumps({"error": f"unknown command {cmd!r}"}), False

    rid = msg.get("id")
    tokens = msg.get("tokens")
    try:
        if not isinstance(rid, str) or not rid:
            raise ValueError("id must be a non-empty string")
        if not isinstance(tokens, list) or not all(
                isinstance(t, int) and not isinstance(t, bool) for t in tokens):
            raise ValueError("tokens must be a list of integers")
        decision = route(rid, tokens, state.checkpoint, state.policy)
    except (PRSRouteError, ValueError) as exc:
        with state.lock:
            state.errors += 1
        return json.dumps({"error": str(exc), "id": rid if isinstance(rid, str) else None}), False
    with state.lock:
        decision = admission_guard(state, decision)
    return decision.to_line(), False


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        state: ServiceState = self.server.state
        host = self.client_address[0] if self.client_address else None
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            response, stop = handle_line(state, line, host)
            self.wfile.write(response.encode() + b"\n")
            self.wfile.flush()
            if stop:
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                return


class RoutingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], state: ServiceState):
        super().__init__(address, _Handler)
        self.state = state

    @property
    def port(self) -> int:
        return self.server_address[1]


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind address must look like HOST:PORT, got {bind!r}")
    return host, int(port)


def serve(bind: str, checkpoint: Checkpoint, policy: RoutingPolicy,
          hard_admission: bool = False, ready=None):
    """Run until a shutdown command arrives. ``ready(server)`` is called
    once the socket is listening."""
    server = RoutingServer(parse_bind(bind), ServiceState(checkpoint, policy, hard_admission))
    log.info("listening on %s:%d", *server.server_address[:2])
    if ready is not None:
        ready(server)
    with server:
        server.serve_forever()
    return server.state
