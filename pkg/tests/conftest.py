from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from selfadapt.domain import MetricSnapshot


def snap(
    t: float = 60.0,
    rt: float = 0.1,
    util: float = 0.5,
    rate: float = 10.0,
    dimmer: float = 1.0,
    active: int = 2,
    booting: int = 0,
    requests: int | None = None,
    late: int = 0,
    optional: int | None = None,
    window: float = 10.0,
) -> MetricSnapshot:
    n = int(rate * window) if requests is None else requests
    opt = int(round(n * dimmer)) if optional is None else optional
    return MetricSnapshot(t - window, t, rt, rt, util, rate, dimmer, active, booting, n, late, opt)


@pytest.fixture
def make_snap():
    return snap


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        server = self.server
        server.requests.append(body)
        reply = server.script[min(len(server.requests) - 1, len(server.script) - 1)]
        if callable(reply):
            reply = reply(body)
        if isinstance(reply, int):
            self.send_response(reply)
            self.end_headers()
            return
        data = (reply if isinstance(reply, str) else json.dumps(reply)).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    """Scripted reasoning endpoint; ``start(script)`` returns its URL.

    Each script entry is the reply to one request: a dict (sent as JSON), raw
    text, an HTTP status code, or a callable taking the request body.
    """
    servers = []

    def start(script):
        srv = HTTPServer(("127.0.0.1", 0), _Handler)
        srv.script = list(script)
        srv.requests = []
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return f"http://127.0.0.1:{srv.server_port}/decide", srv

    yield start
    for srv in servers:
        srv.shutdown()
        srv.server_close()
