import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from prefedit.field import MLPField
from prefedit.flow import TrainConfig, train_flow
from prefedit.toy import pair_sampler, two_mode_mixture

# recipe for the two-mode base generator used by the post-training tests
PRETRAIN = TrainConfig(steps=4000, lr=0.02, momentum=0.9, batch_size=256, max_grad_norm=10.0,
                       lr_schedule="cosine", seed=0)


@pytest.fixture(scope="session")
def two_mode_flow():
    res = train_flow(MLPField.create(seed=0), pair_sampler(two_mode_mixture(4.0, 0.5)), PRETRAIN)
    return res.field


class StubScorer:
    """Local scoring backend with scripted replies and server-side counters.

    ``script`` is consumed one action per request; once empty, ``default``
    answers. Actions: ("score", s), ("hang", secs) then score 3, ("status",
    code), ("raw", bytes), ("slow", secs, s).
    """

    def __init__(self):
        self.script = []
        self.default = ("score", 4.0)
        self.score_fn = None
        self.requests = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.payloads = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                with stub._lock:
                    stub.requests += 1
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                    action = stub.script.pop(0) if stub.script else stub.default
                    stub.payloads.append(json.loads(body))
                try:
                    self._reply(action, stub.payloads[-1])
                except (BrokenPipeError, ConnectionResetError):
                    pass
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

            def _send(self, code, data: bytes):
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def _reply(self, action, payload):
                kind = action[0]
                if kind == "hang":
                    time.sleep(action[1])
                    self._send(200, b'{"score": 3}')
                elif kind == "status":
                    self._send(action[1], b"{}")
                elif kind == "raw":
                    self._send(200, action[1])
                elif kind == "slow":
                    time.sleep(action[1])
                    self._send(200, json.dumps({"score": action[2]}).encode())
                elif stub.score_fn is not None:
                    self._send(200, json.dumps({"score": stub.score_fn(payload)}).encode())
                else:
                    self._send(200, json.dumps({"score": action[1]}).encode())

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    stub = StubScorer()
    yield stub
    stub.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
