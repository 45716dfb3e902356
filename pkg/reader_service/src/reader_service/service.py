"""HTTP implementation of the reader wire protocol.

Endpoints (JSON, UTF-8): POST /read, /read_backward, /encode; GET /dim,
/healthz. Null answers are encoded as start = end = -1 with empty text.
Request handling is stateless, so the threaded server accepts concurrent
requests; batching happens within one request only, bounded by
ServiceConfig.max_batch.
"""

from __future__ import annotations

import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from tablefill.corpus import Passage
from tablefill.readers import ReaderContract, StubReader

from .config import ServiceConfig


class RequestError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def passage_from_tokens(passage_id: str, tokens: list[str]) -> Passage:
    toks = tuple(tokens)
    return Passage(
        passage_id=passage_id,
        doc_id=passage_id,
        token_start=0,
        token_end=len(toks),
        text=" ".join(toks),
        tokens=toks,
    )


def build_reader(config: ServiceConfig) -> ReaderContract:
    config.validate()
    if config.mode == "stub":
        return StubReader(seed=config.seed, d=config.d)
    from .model_backend import PretrainedReader

    return PretrainedReader(config.model_id, d=config.d)


def _parse_items(payload, max_batch: int, need_passage_id: bool) -> list[dict]:
    if not isinstance(payload, dict) or not isinstance(payload.get("items"), list):
        raise RequestError(400, "bad-request", 'body must be {"items": [...]}')
    items = payload["items"]
    if len(items) > max_batch:
        raise RequestError(
            413, "batch-too-large", f"batch of {len(items)} exceeds limit {max_batch}"
        )
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise RequestError(400, "bad-request", f"items[{i}] is not an object")
        if not isinstance(item.get("question"), str):
            raise RequestError(400, "bad-request", f"items[{i}].question must be a string")
        tokens = item.get("passage_tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise RequestError(
                400, "bad-request", f"items[{i}].passage_tokens must be a list of strings"
            )
        if need_passage_id and not isinstance(item.get("passage_id"), str):
            raise RequestError(400, "bad-request", f"items[{i}].passage_id must be a string")
    return items


class ReaderRequestHandler(BaseHTTPRequestHandler):
    """One handler class per server; reader and config are class attributes
    installed by create_server."""

    reader: ReaderContract
    config: ServiceConfig
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):
        pass

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_payload(self, exc: RequestError) -> None:
        self._send_json(exc.status, {"error": {"code": exc.code, "message": exc.message}})

    def do_GET(self):
        if self.path == "/healthz":
            self._send_json(200, {"ok": True})
        elif self.path == "/dim":
            self._send_json(200, {"d": self.reader.dim()})
        else:
            self._send_error_payload(RequestError(404, "not-found", f"unknown path {self.path}"))

    def do_POST(self):
        try:
            payload = self._read_body()
            if self.path in ("/read", "/read_backward"):
                items = _parse_items(payload, self.config.max_batch, need_passage_id=True)
                out = self._handle_read(items, backward=self.path == "/read_backward")
            elif self.path == "/encode":
                items = _parse_items(payload, self.config.max_batch, need_passage_id=False)
                out = self._handle_encode(items)
            else:
                raise RequestError(404, "not-found", f"unknown path {self.path}")
        except RequestError as exc:
            self._send_error_payload(exc)
            return
        self._send_json(200, {"items": out})

    def _read_body(self):
        try:
            length = int(self.headers.get("Content-Length", 0))
        except ValueError as exc:
            raise RequestError(400, "bad-request", "invalid Content-Length") from exc
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RequestError(400, "bad-json", f"request body is not JSON: {exc}") from exc

    def _handle_read(self, items: list[dict], backward: bool) -> list[dict]:
        pairs = [
            (item["question"], passage_from_tokens(item["passage_id"], item["passage_tokens"]))
            for item in items
        ]
        if backward:
            spans = self.reader.read_backward_batch(pairs)
        else:
            spans = self.reader.read_batch(pairs)
        return [
            {
                "start": span.start_tok,
                "end": span.end_tok,
                "text": span.text,
                "s_best": span.s_best,
                "s_null": span.s_null,
            }
            for span in spans
        ]

    def _handle_encode(self, items: list[dict]) -> list[dict]:
        pairs = [
            (item["question"], passage_from_tokens(f"enc-{i}", item["passage_tokens"]))
            for i, item in enumerate(items)
        ]
        encodings = self.reader.encode_batch(pairs)
        return [
            {
                "q_vecs": enc.question_vectors.tolist(),
                "p_vecs": enc.passage_vectors.tolist(),
                "cls": enc.cls_vector.tolist(),
            }
            for enc in encodings
        ]


def create_server(config: ServiceConfig) -> ThreadingHTTPServer:
    reader = build_reader(config)
    handler = type(
        "BoundReaderRequestHandler",
        (ReaderRequestHandler,),
        {"reader": reader, "config": config},
    )
    return ThreadingHTTPServer((config.host, config.port), handler)


def serve(config: ServiceConfig) -> None:
    server = create_server(config)
    mode = config.mode if config.mode == "stub" else f"model={config.model_id}"
    print(f"reader-service listening on {config.host}:{server.server_port} ({mode}, d={config.d})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
