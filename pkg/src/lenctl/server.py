"""Transparent length-control proxy.

Exposes an OpenAI-compatible ``/v1/chat/completions`` endpoint.  Requests may
carry the extension fields ``length_unit`` and ``length_target`` (and
optionally ``length_tolerance``); the proxy then runs the controller against
the upstream backend and streams back clean text only.  Requests without the
extension fields pass straight through.  Concurrent requests are isolated and
limited by a global parallelism cap.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .backend import Backend, BackendError, GenRequest, SamplingParams
from .config import AppConfig
from .controller import ControllerConfig, LengthConstraint, SessionStatus, run_session
from .feedback import PromptMode, build_prompt
from .units import LengthUnit


class _BadRequest(Exception):
    pass


def _chunk_payload(rid: str, model: str, delta: str, finish: str | None) -> bytes:
    body = {
        "id": rid,
        "object": "chat.completion.chunk",
        "created": int(time.time()),
        "model": model,
        "choices": [
            {
                "index": 0,
                "delta": {"content": delta} if delta else {},
                "finish_reason": finish,
            }
        ],
    }
    return f"data: {json.dumps(body, ensure_ascii=False)}\n\n".encode("utf-8")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "lenctl-proxy"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def handle(self) -> None:
        try:
            super().handle()
        except (BrokenPipeError, ConnectionResetError):
            pass  # client dropped the connection; nothing to clean up

    # ------------------------------------------------------------------

    def do_POST(self) -> None:
        if self.path.rstrip("/") not in ("/v1/chat/completions", "/chat/completions"):
            self._send_error(404, "unknown path")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            self._send_error(400, "invalid JSON body")
            return

        srv: "LengthControlProxy" = self.server.proxy  # type: ignore[attr-defined]
        if srv.api_key and self.headers.get("Authorization") != f"Bearer {srv.api_key}":
            self._send_error(401, "invalid api key")
            return

        try:
            with srv.slots:
                self._handle(payload, srv)
        except (BrokenPipeError, ConnectionResetError):
            self.close_connection = True  # client went away mid-stream
        except (_BadRequest, ValueError) as exc:
            self._send_error(400, str(exc))
        except BackendError as exc:
            self._send_error(502, f"upstream failure: {exc}")
        except Exception as exc:  # pragma: no cover - defensive
            self._send_error(500, f"internal error: {exc}")

    # ------------------------------------------------------------------

    def _handle(self, payload: dict, srv: "LengthControlProxy") -> None:
        messages = payload.get("messages")
        if not isinstance(messages, list) or not messages:
            raise _BadRequest("messages must be a nonempty list")
        stream = bool(payload.get("stream", False))
        model = payload.get("model", "lenctl")
        sampling = SamplingParams(
            temperature=float(payload.get("temperature", srv.config.temperature)),
            top_p=float(payload.get("top_p", srv.config.top_p)),
            max_new_tokens=int(payload.get("max_tokens", srv.config.max_new_tokens)),
        )

        has_ext = "length_unit" in payload or "length_target" in payload
        if has_ext:
            text = self._run_controlled(payload, srv, sampling)
        else:
            text = self._run_passthrough(payload, messages, srv, sampling)

        rid = f"chatcmpl-{uuid.uuid4().hex[:24]}"
        if stream:
            self._send_stream(rid, model, text)
        else:
            self._send_completion(rid, model, text)

    def _run_controlled(
        self, payload: dict, srv: "LengthControlProxy", sampling: SamplingParams
    ) -> str:
        try:
            unit = LengthUnit.parse(str(payload.get("length_unit", "")))
        except ValueError as exc:
            raise _BadRequest(str(exc)) from exc
        try:
            target = int(payload.get("length_target"))
            if target < 1:
                raise ValueError
        except (TypeError, ValueError):
            raise _BadRequest("length_target must be a positive integer") from None
        tolerance = payload.get("length_tolerance")
        if tolerance is not None:
            try:
                tolerance = int(tolerance)
                if tolerance < 0:
                    raise ValueError
            except (TypeError, ValueError):
                raise _BadRequest("length_tolerance must be a nonnegative integer") from None

        instruction = "\n\n".join(
            str(m.get("content", ""))
            for m in payload["messages"]
            if m.get("role") == "user"
        )
        if not instruction:
            raise _BadRequest("no user message to control")

        constraint = LengthConstraint(unit, target, tolerance)
        prompt = build_prompt(
            instruction,
            constraint,
            PromptMode.FEEDBACK,
            templates_dir=srv.config.templates_dir or None,
        )
        state = run_session(
            srv.upstream,
            prompt,
            constraint,
            config=srv.controller_config,
            tokenizer=srv.config.tokenizer(),
            sampling=sampling,
        )
        if state.status is SessionStatus.FAILED:
            raise BackendError(state.error or "session failed")
        return state.clean_text

    def _run_passthrough(
        self,
        payload: dict,
        messages: list,
        srv: "LengthControlProxy",
        sampling: SamplingParams,
    ) -> str:
        context = []
        prefix = ""
        for i, m in enumerate(messages):
            role = m.get("role")
            content = str(m.get("content", ""))
            if role == "assistant" and i == len(messages) - 1:
                prefix = content
            else:
                if role not in ("system", "user", "assistant"):
                    raise _BadRequest(f"unknown role {role!r}")
                context.append((role, content))
        stops = payload.get("stop") or []
        if isinstance(stops, str):
            stops = [stops]
        request = GenRequest(
            context=context,
            sampling=sampling,
            stop_sequences=[str(s) for s in stops],
            assistant_prefix=prefix,
        )
        parts = []
        for chunk in srv.upstream.start_stream(request):
            parts.append(chunk.text_delta)
        return "".join(parts)

    # ------------------------------------------------------------------

    def _send_stream(self, rid: str, model: str, text: str) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()
        pieces = [text[i : i + 256] for i in range(0, len(text), 256)] or [""]
        for piece in pieces:
            self._write_chunk(_chunk_payload(rid, model, piece, None))
        self._write_chunk(_chunk_payload(rid, model, "", "stop"))
        self._write_chunk(b"data: [DONE]\n\n")
        self._write_chunk(b"")

    def _write_chunk(self, data: bytes) -> None:
        self.wfile.write(f"{len(data):X}\r\n".encode("ascii") + data + b"\r\n")
        self.wfile.flush()

    def _send_completion(self, rid: str, model: str, text: str) -> None:
        body = json.dumps(
            {
                "id": rid,
                "object": "chat.completion",
                "created": int(time.time()),
                "model": model,
                "choices": [
                    {
                        "index": 0,
                        "message": {"role": "assistant", "content": text},
                        "finish_reason": "stop",
                    }
                ],
            },
            ensure_ascii=False,
        ).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, status: int, message: str) -> None:
        body = json.dumps({"error": {"message": message, "code": status}}).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class LengthControlProxy:
    """The proxy server; per-request sessions against one shared upstream."""

    def __init__(
        self,
        config: AppConfig,
        upstream: Backend | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        api_key: str = "",
        max_parallel: int | None = None,
        controller_config: ControllerConfig | None = None,
    ):
        self.config = config
        self.upstream = upstream or config.build_backend()
        self.api_key = api_key
        self.slots = threading.Semaphore(max_parallel or config.parallelism)
        self.controller_config = controller_config or ControllerConfig()
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.daemon_threads = False  # drain in-flight streams on shutdown
        self._httpd.proxy = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}/v1/chat/completions"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10)
