"""Local similarity-score server for exercising the remote oracle offline.

The server answers ``POST`` requests with ``{"similarity": score}`` where the
score comes from a user function of the decoded point.  It can fail a given
number of requests first, stall to provoke timeouts and logs every request
with a monotonic timestamp.
"""

from __future__ import annotations

import argparse
import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, List, Optional

import numpy as np

from .remote import PLACEHOLDER, decode_payload, json_pointer_get

ScoreFn = Callable[[np.ndarray], float]


@dataclass
class LoggedRequest:
    t: float
    body: bytes
    status: int
    headers: dict = field(default_factory=dict)


def cosine_score(reference) -> ScoreFn:
    """Score ``100 * cos(x, reference)``, a 0-100 similarity like a face API."""
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    ref_norm = float(np.linalg.norm(ref))

    def score(x: np.ndarray) -> float:
        nx = float(np.linalg.norm(x))
        if nx == 0.0 or ref_norm == 0.0:
            return 0.0
        return 100.0 * float(x @ ref) / (nx * ref_norm)

    return score


def _find_placeholder(node, path=""):
    if isinstance(node, str) and node == PLACEHOLDER:
        return path
    items = node.items() if isinstance(node, dict) else enumerate(node) if isinstance(node, list) else ()
    for k, v in items:
        found = _find_placeholder(v, f"{path}/{k}")
        if found is not None:
            return found
    return None


class StubScoreServer:
    """Threaded stub on ``127.0.0.1``; use as a context manager.

    ``fail_first`` requests answer ``fail_status`` (503 by default); requests
    whose index is in ``stall`` sleep ``stall_s`` seconds before answering.
    ``score_fn`` may also return a raw JSON-able object to send verbatim.
    """

    def __init__(
        self,
        score_fn: ScoreFn,
        *,
        payload_pointer: str = "/image",
        encoding: str = "json-array",
        fail_first: int = 0,
        fail_status: int = 503,
        stall: frozenset = frozenset(),
        stall_s: float = 0.0,
        port: int = 0,
    ):
        self.score_fn = score_fn
        self.payload_pointer = payload_pointer
        self.encoding = encoding
        self.fail_first = fail_first
        self.fail_status = fail_status
        self.stall = frozenset(stall)
        self.stall_s = stall_s
        self.log: List[LoggedRequest] = []
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), self._handler())
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @classmethod
    def for_template(cls, score_fn: ScoreFn, template, encoding: str = "json-array", **kw) -> "StubScoreServer":
        pointer = _find_placeholder(template)
        if pointer is None:
            raise ValueError("template has no placeholder")
        return cls(score_fn, payload_pointer=pointer, encoding=encoding, **kw)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/score"

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, status: int, doc):
                data = json.dumps(doc).encode()
                self.send_response(status)
                self.send_header("content-type", "application/json")
                self.send_header("content-length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                t = time.monotonic()
                body = self.rfile.read(int(self.headers.get("content-length", 0)))
                with server._lock:
                    index = len(server.log)
                    failing = index < server.fail_first
                    entry = LoggedRequest(t, body, server.fail_status if failing else 200, {k.lower(): v for k, v in self.headers.items()})
                    server.log.append(entry)
                if index in server.stall:
                    time.sleep(server.stall_s)
                if failing:
                    self._send(server.fail_status, {"error": "injected failure"})
                    return
                try:
                    doc = json.loads(body)
                    x = decode_payload(json_pointer_get(doc, server.payload_pointer), server.encoding)
                except Exception as exc:  # malformed request
                    entry.status = 400
                    self._send(400, {"error": str(exc)})
                    return
                result = server.score_fn(x)
                self._send(200, {"similarity": result} if isinstance(result, (int, float)) else result)

        return Handler

    def start(self) -> "StubScoreServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    ap = argparse.ArgumentParser(description="serve 100*cos(x, ref) scores on localhost")
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--reference", required=True, help="point file (CSV or EVPT) holding the reference")
    ap.add_argument("--encoding", default="json-array", choices=["json-array", "base64"])
    args = ap.parse_args(argv)
    from .core import read_point_values

    server = StubScoreServer(cosine_score(read_point_values(args.reference)), encoding=args.encoding, port=args.port)
    print(f"serving on {server.url}", flush=True)
    try:
        server._httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._httpd.server_close()


if __name__ == "__main__":
    main()
