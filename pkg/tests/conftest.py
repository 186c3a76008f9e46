import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class JsonStub:
    """Tiny local HTTP server for exercising the wire contracts.

    ``routes`` maps a path to a callable(body_dict) -> payload dict; set
    ``fail_next[path]`` to make the next N requests to it return HTTP 500.
    Every accepted request is appended to ``requests``.
    """

    def __init__(self):
        self.routes = {}
        self.fail_next = {}
        self.requests = []
        self._lock = threading.Lock()

        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with stub._lock:
                    remaining = stub.fail_next.get(self.path, 0)
                    if remaining > 0:
                        stub.fail_next[self.path] = remaining - 1
                        self.send_response(500)
                        self.end_headers()
                        return
                    stub.requests.append((self.path, body))
                handler = stub.routes.get(self.path)
                if handler is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                payload = json.dumps(handler(body)).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()
        self.url = f"http://127.0.0.1:{self._server.server_port}"

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def stub_server():
    stub = JsonStub()
    yield stub
    stub.close()
