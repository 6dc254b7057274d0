import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from comcts.backends import PolicyBackend, PolicyDescriptor, SimProfile


class FakeBackend(PolicyBackend):
    """Test double with scripted continuations and per-step vote tables."""

    def __init__(self, name, continuation=None, votes=None, default_vote=1.0):
        self.descriptor = PolicyDescriptor(
            name=name,
            kind="scripted-simulator",
            profile=SimProfile(),
        )
        self.continuation = continuation or []
        self.votes = votes or {}
        self.default_vote = default_vote
        self.generate_calls = 0
        self.evaluate_calls = 0

    def generate_continuation(self, question, prefix):
        from comcts.backends import GenerationResult
        from comcts.steps import render_steps

        self.generate_calls += 1
        steps = list(self.continuation)
        return GenerationResult(steps, render_steps(steps))

    def evaluate_node(self, question, prefix, candidate):
        self.evaluate_calls += 1
        return self.votes.get(candidate, self.default_vote)


class MockChatServer:
    """Minimal chat-completions endpoint driven by a pluggable responder.

    The responder receives (payload, request_index) and returns
    (status_code, reply_text_or_body). String replies are wrapped in a
    standard completion body.
    """

    def __init__(self, responder):
        self.responder = responder
        self.requests = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with server._lock:
                    index = len(server.requests)
                    server.requests.append(
                        {"path": self.path, "payload": payload,
                         "headers": dict(self.headers)}
                    )
                status, reply = server.responder(payload, index)
                if isinstance(reply, str):
                    body = {
                        "choices": [
                            {"message": {"role": "assistant", "content": reply},
                             "finish_reason": "stop"}
                        ]
                    }
                else:
                    body = reply
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    @property
    def endpoint(self):
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def close(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture
def mock_server():
    servers = []

    def factory(responder):
        server = MockChatServer(responder)
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.close()


def user_text(payload):
    content = payload["messages"][-1]["content"]
    if isinstance(content, list):
        return next(part["text"] for part in content if part.get("type") == "text")
    return content


TOPICS = ["algebra", "charts", "geometry", "logic"]
