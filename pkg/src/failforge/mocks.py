"""Scripted backend stubs and fixtures for the offline test suite.

A script file is a JSON array of rules:

    [{"match": {"contains": "Step 5"} | {"digest": "<hex>"},
      "kind": "chat" | "image" | "embed",            # optional endpoint scope
      "responses": [...],
      "repeat": false,                                # true: cycle the list
      "delay_ms": 0}, ...]

Response entries by kind:
  chat : "text" shorthand, or {"content", "prompt_tokens", "completion_tokens"}
  image: {"b64"} or {"artifact_url"}
  embed: {"embedding": [f64, ...]} (matched per input text)
  any  : {"error": {"status": 500}} or {"error": "timeout"}

Rules must not overlap; statically decidable overlaps (duplicate digests,
nested contains patterns of the same kind) are rejected at load, and a
request matching two rules errors at dispatch. After a rule's responses are
exhausted, repeat=true cycles from the start and repeat=false holds the last
entry. Unmatched requests follow the configured default policy: "error", or
"canned" deterministic responses derived from the request digest.

The stubs implement the exact wire schemas of the backends module, so the
same script can serve in-process (ScriptedTransport) or over localhost HTTP
(MockServer) for end-to-end CLI tests.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Optional, Sequence

from .backends import (
    CHAT_ENDPOINT,
    EMBED_ENDPOINT,
    IMAGE_ENDPOINT,
    TransportFailure,
    TransportTimeout,
    cache_key,
)

DEFAULT_EMBED_DIM = 32


class ScriptError(ValueError):
    pass


class UnmatchedRequestError(ScriptError):
    pass


def default_embedding(text: str, dim: int = DEFAULT_EMBED_DIM) -> list[float]:
    """Deterministic pseudo-embedding: unit vector derived from the text hash."""
    raw = hashlib.sha256(text.encode("utf-8")).digest()
    vals = []
    for i in range(dim):
        chunk = raw[(2 * i) % len(raw)] * 256 + raw[(2 * i + 1) % len(raw)]
        vals.append(chunk / 65535.0 - 0.5)
    norm = sum(v * v for v in vals) ** 0.5 or 1.0
    return [v / norm for v in vals]


def default_image_bytes(key: str) -> bytes:
    """Deterministic artifact bytes derived from the request digest."""
    return b"MOCKIMG:" + hashlib.sha256(key.encode("ascii")).digest()


@dataclass
class Rule:
    index: int
    kind: Optional[str]
    contains: Optional[str]
    digest: Optional[str]
    responses: list[Any]
    repeat: bool = False
    delay_ms: int = 0
    _cursor: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def matches(self, kind: str, text: str, key: str) -> bool:
        if self.kind is not None and self.kind != kind:
            return False
        if self.digest is not None:
            return self.digest == key
        return self.contains is not None and self.contains in text

    def next_response(self) -> Any:
        with self._lock:
            if self._cursor >= len(self.responses):
                if self.repeat:
                    self._cursor = 0
                else:
                    return self.responses[-1]
            entry = self.responses[self._cursor]
            self._cursor += 1
            return entry


class MockScript:
    """The loaded rule set plus request counters and the in-flight gauge."""

    def __init__(self, rules: Sequence[Rule], default: str = "error", embed_dim: int = DEFAULT_EMBED_DIM):
        if default not in ("error", "canned"):
            raise ScriptError(f"default policy {default!r} not in ('error', 'canned')")
        self.rules = list(rules)
        self.default = default
        self.embed_dim = embed_dim
        self._lock = threading.Lock()
        self.network_calls = 0
        self.calls_by_kind: dict[str, int] = {"chat": 0, "image": 0, "embed": 0}
        self.in_flight = 0
        self.high_water = 0
        _check_overlaps(self.rules)

    # -- gauges ------------------------------------------------------------

    def _enter(self, kind: str) -> None:
        with self._lock:
            self.network_calls += 1
            self.calls_by_kind[kind] = self.calls_by_kind.get(kind, 0) + 1
            self.in_flight += 1
            self.high_water = max(self.high_water, self.in_flight)

    def _exit(self) -> None:
        with self._lock:
            self.in_flight -= 1

    # -- matching ----------------------------------------------------------

    def _pick(self, kind: str, text: str, key: str) -> Optional[Rule]:
        hits = [r for r in self.rules if r.matches(kind, text, key)]
        if len(hits) > 1:
            raise ScriptError(
                f"ambiguous script: rules {[r.index for r in hits]} all match one {kind} request"
            )
        return hits[0] if hits else None

    def _scripted(self, kind: str, text: str, key: str) -> Optional[Any]:
        rule = self._pick(kind, text, key)
        if rule is None:
            if self.default == "error":
                raise UnmatchedRequestError(f"no rule matches {kind} request: {text[:120]!r}")
            return None
        if rule.delay_ms:
            time.sleep(rule.delay_ms / 1000.0)
        return rule.next_response()

    # -- endpoint handlers (wire-level) -------------------------------------

    def handle(self, endpoint: str, body: dict) -> tuple[int, dict]:
        if endpoint.endswith(CHAT_ENDPOINT):
            kind, handler = "chat", self._handle_chat
        elif endpoint.endswith(IMAGE_ENDPOINT):
            kind, handler = "image", self._handle_image
        elif endpoint.endswith(EMBED_ENDPOINT):
            kind, handler = "embed", self._handle_embed
        else:
            return 404, {"error": f"unknown endpoint {endpoint}"}
        self._enter(kind)
        try:
            return handler(body)
        finally:
            self._exit()

    def _handle_chat(self, body: dict) -> tuple[int, dict]:
        text = _chat_text(body)
        key = cache_key("chat", body)
        entry = self._scripted("chat", text, key)
        if entry is None:
            entry = {"content": f"canned:{key[:12]}"}
        if isinstance(entry, str):
            entry = {"content": entry}
        err = _error_directive(entry)
        if err is not None:
            return err
        return 200, {
            "choices": [{"message": {"content": entry.get("content", "")}}],
            "usage": {
                "prompt_tokens": int(entry.get("prompt_tokens", len(text.split()))),
                "completion_tokens": int(entry.get("completion_tokens", len(str(entry.get("content", "")).split()))),
            },
        }

    def _handle_image(self, body: dict) -> tuple[int, dict]:
        key = cache_key("image", body)
        entry = self._scripted("image", str(body.get("prompt", "")), key)
        if entry is None:
            entry = {"b64": base64.b64encode(default_image_bytes(key)).decode("ascii")}
        err = _error_directive(entry)
        if err is not None:
            return err
        out = {}
        if "b64" in entry:
            out["b64"] = entry["b64"]
        if "artifact_url" in entry:
            out["artifact_url"] = entry["artifact_url"]
        return 200, out

    def _handle_embed(self, body: dict) -> tuple[int, dict]:
        texts = body.get("input", [])
        data = []
        for text in texts:
            key = cache_key("embed", {"model": body.get("model", ""), "input": text})
            entry = self._scripted("embed", text, key)
            if entry is None:
                entry = {"embedding": default_embedding(text, self.embed_dim)}
            err = _error_directive(entry)
            if err is not None:
                return err
            data.append({"embedding": list(entry["embedding"])})
        return 200, {"data": data}


def _chat_text(body: dict) -> str:
    chunks = []
    for message in body.get("messages", []):
        content = message.get("content", [])
        if isinstance(content, str):
            chunks.append(content)
            continue
        for part in content:
            if part.get("type") == "text":
                chunks.append(part.get("text", ""))
    return "\n".join(chunks)


def _error_directive(entry: Any) -> Optional[tuple[int, dict]]:
    if not isinstance(entry, dict) or "error" not in entry:
        return None
    err = entry["error"]
    if err == "timeout":
        raise TransportTimeout("scripted timeout")
    if err == "connection":
        raise TransportFailure("scripted connection failure")
    status = int(err.get("status", 500)) if isinstance(err, dict) else 500
    message = err.get("message", "scripted error") if isinstance(err, dict) else str(err)
    return status, {"error": message}


def _check_overlaps(rules: Sequence[Rule]) -> None:
    for i, a in enumerate(rules):
        for b in rules[i + 1 :]:
            if a.kind is not None and b.kind is not None and a.kind != b.kind:
                continue
            if a.digest is not None and a.digest == b.digest:
                raise ScriptError(f"overlapping rules {a.index} and {b.index}: identical digest")
            if a.contains is not None and b.contains is not None:
                if a.contains in b.contains or b.contains in a.contains:
                    raise ScriptError(
                        f"overlapping rules {a.index} and {b.index}: "
                        f"{a.contains!r} and {b.contains!r} are nested"
                    )


def load_script(source: str | Path | list, default: str = "error", embed_dim: int = DEFAULT_EMBED_DIM) -> MockScript:
    """Load a script from a JSON file (or an already-parsed rule list)."""
    if isinstance(source, (str, Path)):
        raw = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        raw = source
    if not isinstance(raw, list):
        raise ScriptError("script must be a JSON array of rules")
    rules = []
    for i, row in enumerate(raw):
        match = row.get("match", {})
        contains = match.get("contains")
        digest = match.get("digest")
        if (contains is None) == (digest is None):
            raise ScriptError(f"rule {i}: match must carry exactly one of contains/digest")
        responses = row.get("responses")
        if not isinstance(responses, list) or not responses:
            raise ScriptError(f"rule {i}: responses must be a non-empty list")
        rules.append(
            Rule(
                index=i,
                kind=row.get("kind"),
                contains=contains,
                digest=digest,
                responses=responses,
                repeat=bool(row.get("repeat", False)),
                delay_ms=int(row.get("delay_ms", 0)),
            )
        )
    return MockScript(rules, default=default, embed_dim=embed_dim)


class ScriptedTransport:
    """In-process transport: same interface as HttpTransport, no sockets."""

    def __init__(self, script: MockScript):
        self.script = script

    def post(self, url: str, body: dict, headers: dict, timeout: float) -> tuple[int, dict]:
        return self.script.handle(url, body)


class MockServer:
    """The same scripted backends, served over localhost HTTP."""

    def __init__(self, script: MockScript, host: str = "127.0.0.1", port: int = 0):
        self.script = script
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    self._reply(400, {"error": "invalid JSON"})
                    return
                try:
                    status, payload = outer.script.handle(self.path, body)
                except TransportTimeout:
                    # over HTTP a scripted timeout degrades to a retryable 5xx
                    self._reply(599, {"error": "timeout"})
                    return
                except TransportFailure:
                    self.connection.close()
                    return
                except ScriptError as exc:
                    self._reply(500, {"error": str(exc)})
                    return
                self._reply(status, payload)

            def _reply(self, status: int, payload: dict):
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):  # keep test output quiet
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc) -> bool:
        self.stop()
        return False
