"""Helpers: in-process service launcher and a fault-injecting proxy."""

from __future__ import annotations

import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import uvicorn

from capreward.config import EngineConfig
from capreward.service import create_app

KEEP_STEM = "Which token is shown?"
LEAKY_STEM = "Which token is obvious?"
KEEP_MCQ = {
    "id": "flt-keep", "image_id": "flt", "stem": KEEP_STEM,
    "options": ["keep-alpha", "keep-beta", "keep-gamma", "keep-delta"],
    "correct_index": 0, "provenance": "fixture",
}
LEAKY_MCQ = {
    "id": "flt-leaky", "image_id": "flt", "stem": LEAKY_STEM,
    "options": ["leak-alpha", "leak-beta", "leak-gamma", "leak-delta"],
    "correct_index": 0, "provenance": "fixture",
}


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def engine_config(**overrides) -> EngineConfig:
    raw = {
        "backends": {
            "ans": {"transport": "mock-keyword"},
            "prober": {
                "transport": "scripted",
                "vision_capable": True,
                "script": [
                    {"match": {"has_image": True, "contains": KEEP_STEM},
                     "response": {"answer_option_containing": "keep-alpha"}},
                    {"match": {"has_image": False, "contains": KEEP_STEM},
                     "response": {"answer_option_not_containing": "keep-alpha"}},
                    {"match": {"contains": LEAKY_STEM},
                     "response": {"answer_option_containing": "leak-alpha"}},
                ],
            },
        },
        "answerer": "ans",
        "prober": "prober",
        "n_rounds": 4,
        "seed": 0,
    }
    raw.update(overrides)
    return EngineConfig(raw)


def start_service(config: EngineConfig):
    port = free_port()
    server = uvicorn.Server(uvicorn.Config(
        create_app(config), host="127.0.0.1", port=port, log_level="warning"
    ))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("service did not start")
        time.sleep(0.01)
    return server, thread, f"http://127.0.0.1:{port}"


class FaultProxy:
    """Forwards requests to an upstream service, 503-ing the first N."""

    def __init__(self, upstream: str, fail_first: int = 0):
        self.upstream = upstream
        self.fail_remaining = fail_first
        self.request_count = 0
        self._lock = threading.Lock()
        proxy = self

        class Handler(BaseHTTPRequestHandler):
            def _handle(self, method: str):
                with proxy._lock:
                    proxy.request_count += 1
                    inject = proxy.fail_remaining > 0
                    if inject:
                        proxy.fail_remaining -= 1
                if inject:
                    body = json.dumps(
                        {"error": {"code": "injected", "message": "injected 503"}}
                    ).encode()
                    self.send_response(503)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                    return
                length = int(self.headers.get("Content-Length", 0))
                payload = self.rfile.read(length) if length else None
                upstream = httpx.request(
                    method, proxy.upstream + self.path, content=payload,
                    headers={"Content-Type": "application/json"},
                )
                self.send_response(upstream.status_code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(upstream.content)))
                self.end_headers()
                self.wfile.write(upstream.content)

            def do_POST(self):
                self._handle("POST")

            def do_GET(self):
                self._handle("GET")

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self._server.server_port}"
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True
        )
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._thread.join(timeout=5)
