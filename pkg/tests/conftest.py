import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import settings

from tablefill.corpus import Passage, tokenize
from tablefill.readers import StubReader

settings.register_profile("suite", max_examples=50, deadline=None)
settings.load_profile("suite")


def make_passage(pid: str, text: str, doc_id: str = "doc") -> Passage:
    tokens = tuple(tokenize(text))
    return Passage(
        passage_id=pid, doc_id=doc_id, token_start=0, token_end=len(tokens),
        text=" ".join(tokens), tokens=tokens,
    )


class _StubServiceHandler(BaseHTTPRequestHandler):
    """Minimal wire-protocol server backed by the in-process stub reader.

    Test-only: exercises the remote client against known-good behavior.
    """

    reader: StubReader = None  # set on the server class per fixture

    def log_message(self, *args):  # silence request logging
        pass

    def _send(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/dim":
            self._send(200, {"d": self.reader.dim()})
        else:
            self._send(404, {"error": "unknown path"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length))
        items = payload["items"]
        if self.path in ("/read", "/read_backward"):
            out = []
            for item in items:
                passage = make_passage(item["passage_id"], " ".join(item["passage_tokens"]))
                span = self.reader.read(item["question"], passage)
                out.append(
                    {
                        "start": span.start_tok,
                        "end": span.end_tok,
                        "text": span.text,
                        "s_best": span.s_best,
                        "s_null": span.s_null,
                    }
                )
            self._send(200, {"items": out})
        elif self.path == "/encode":
            out = []
            for item in items:
                passage = make_passage("enc", " ".join(item["passage_tokens"]))
                enc = self.reader.encode(item["question"], passage)
                out.append(
                    {
                        "q_vecs": enc.question_vectors.tolist(),
                        "p_vecs": enc.passage_vectors.tolist(),
                        "cls": enc.cls_vector.tolist(),
                    }
                )
            self._send(200, {"items": out})
        else:
            self._send(404, {"error": "unknown path"})


@pytest.fixture
def stub_service():
    """Run the fake wire-protocol service on a free port; yields its URL."""
    handler = type("Handler", (_StubServiceHandler,), {"reader": StubReader(seed=7, d=8)})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}"
    finally:
        server.shutdown()
        thread.join(timeout=5)
