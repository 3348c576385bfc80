"""Uniform clients for the three external HTTP services.

Chat completion (baseline LMM, frontier LMM, judge), text-to-image, and text
embedding share one request path: deterministic on-disk caching keyed by the
canonical request, bounded in-flight concurrency via a per-backend semaphore,
retries with jittered exponential backoff, and a usage/cost ledger.

Wire formats (bit-exact contract; the mock backends implement the same):

  POST {base}/v1/chat/completions
    body: {"model", "messages": [{"role", "content": [{"type": "text",
          "text"} | {"type": "image", "media_type", "url"|"b64"}]}],
          "temperature", "max_tokens"}
    resp: {"choices": [{"message": {"content"}}],
          "usage": {"prompt_tokens", "completion_tokens"}}

  POST {base}/v1/images/generations
    body: {"prompt", "width", "height", "seed", "guidance_scale"}
    resp: {"artifact_url"} or {"b64"}

  POST {base}/v1/embeddings
    body: {"input": [text, ...]}
    resp: {"data": [{"embedding": [f64, ...]}, ...]}

Endpoints resolve from config plus FAILFORGE_<BACKEND>_URL (fallback when the
config omits the url) and FAILFORGE_<BACKEND>_KEY (overrides the config; keys
are secrets). Cached responses live at cache/<backend>/<first2>/<digest>.json.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import mimetypes
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .schema import canonical_bytes, digest_of

logger = logging.getLogger(__name__)

CHAT_ENDPOINT = "/v1/chat/completions"
IMAGE_ENDPOINT = "/v1/images/generations"
EMBED_ENDPOINT = "/v1/embeddings"

ROLES = ("system", "user", "assistant")


class BackendError(RuntimeError):
    """Non-retryable backend failure (bad request, protocol violation)."""


class TransportFailure(Exception):
    """Retryable transport-level failure (connection error, 5xx carrier)."""


class TransportTimeout(TransportFailure):
    pass


class TransportError(BackendError):
    """All retry attempts exhausted; carries the attempt log."""

    def __init__(self, message: str, attempts: list[dict]):
        super().__init__(message)
        self.attempts = attempts


# ---------------------------------------------------------------------------
# Request / response types (immutable; safe to share across threads)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MessagePart:
    kind: str  # "text" | "image"
    text: Optional[str] = None
    media_type: Optional[str] = None
    url: Optional[str] = None
    b64: Optional[str] = None

    def __post_init__(self):
        if self.kind == "text":
            if self.text is None:
                raise ValueError("text part requires text")
        elif self.kind == "image":
            if not self.media_type:
                raise ValueError("image part requires a media_type tag")
            if self.url is None and self.b64 is None:
                raise ValueError("image part requires url or b64")
        else:
            raise ValueError(f"unknown part kind {self.kind!r}")


def text_part(text: str) -> MessagePart:
    return MessagePart(kind="text", text=text)


def image_part(ref: str, media_type: Optional[str] = None) -> MessagePart:
    """Image part from a locator; local files may later be inlined/downsampled."""
    if media_type is None:
        guess, _ = mimetypes.guess_type(ref)
        media_type = guess if guess and guess.startswith("image/") else "image/jpeg"
    return MessagePart(kind="image", media_type=media_type, url=ref)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[MessagePart, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role {self.role!r} not in {ROLES}")


def user_message(*parts: MessagePart) -> ChatMessage:
    return ChatMessage(role="user", parts=tuple(parts))


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    image_downsample_px: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("at least one user message required")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int
    cached: bool
    attempts: int


@dataclass(frozen=True)
class ImageRequest:
    prompt: str
    width: int
    height: int
    guidance_scale: float
    seed: int


@dataclass(frozen=True)
class ImageArtifact:
    locator: str
    cached: bool
    attempts: int = 0


# ---------------------------------------------------------------------------
# Usage ledger
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriceTable:
    per_million_tokens: float = 0.0
    per_image: float = 0.0


_COUNTERS = ("requests", "cache_hits", "network_calls", "prompt_tokens", "completion_tokens", "images_generated")


class UsageLedger:
    """Thread-safe per-backend counters with a configured price table.

    Counters are per logical request item: a chat or image call is one item;
    an embedding batch ledgers one item per input text even though misses
    travel in a single POST. Conservation: requests == cache_hits +
    network_calls, per backend, always.
    """

    def __init__(self, price_table: PriceTable | None = None):
        self.price_table = price_table or PriceTable()
        self._lock = threading.Lock()
        self._by_backend: dict[str, dict[str, int]] = {}

    def _bucket(self, backend: str) -> dict[str, int]:
        if backend not in self._by_backend:
            self._by_backend[backend] = {c: 0 for c in _COUNTERS}
        return self._by_backend[backend]

    def record_hit(self, backend: str) -> None:
        with self._lock:
            b = self._bucket(backend)
            b["requests"] += 1
            b["cache_hits"] += 1

    def record_network(self, backend: str, prompt_tokens: int = 0, completion_tokens: int = 0, images: int = 0) -> None:
        with self._lock:
            b = self._bucket(backend)
            b["requests"] += 1
            b["network_calls"] += 1
            b["prompt_tokens"] += prompt_tokens
            b["completion_tokens"] += completion_tokens
            b["images_generated"] += images

    def estimated_cost(self, backend: Optional[str] = None) -> float:
        with self._lock:
            buckets = [self._bucket(backend)] if backend else list(self._by_backend.values())
            tokens = sum(b["prompt_tokens"] + b["completion_tokens"] for b in buckets)
            images = sum(b["images_generated"] for b in buckets)
        return tokens / 1e6 * self.price_table.per_million_tokens + images * self.price_table.per_image

    def snapshot(self) -> dict:
        """Consistent point-in-time copy, with estimated cost per backend and total."""
        with self._lock:
            per_backend = {name: dict(counters) for name, counters in self._by_backend.items()}
        for name, counters in per_backend.items():
            tokens = counters["prompt_tokens"] + counters["completion_tokens"]
            counters["estimated_cost"] = round(
                tokens / 1e6 * self.price_table.per_million_tokens
                + counters["images_generated"] * self.price_table.per_image,
                6,
            )
        return {
            "backends": per_backend,
            "total_estimated_cost": round(sum(c["estimated_cost"] for c in per_backend.values()), 6),
        }


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def cache_key(kind: str, body: dict) -> str:
    """Digest of the canonical (kind, wire body) pair.

    Pure function of content: key order in the body never matters; any change
    to model, temperature, message content, seed, or guidance changes the key.
    """
    return digest_of({"kind": kind, "body": body})


class ResponseCache:
    """Disk cache, cache/<backend>/<first2 hex>/<digest>.json.

    Concurrent writers on the same key are benign (identical content,
    last-writer-wins via atomic replace).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, backend: str, key: str) -> Path:
        return self.root / backend / key[:2] / f"{key}.json"

    def get(self, backend: str, key: str) -> Optional[dict]:
        path = self._path(backend, key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        except (OSError, json.JSONDecodeError, KeyError):
            return None

    def put(self, backend: str, key: str, request_body: dict, response: dict) -> None:
        path = self._path(backend, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(
            json.dumps({"request": request_body, "response": response}, sort_keys=True, ensure_ascii=False),
            encoding="utf-8",
        )
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------


class HttpTransport:
    """Real network transport on top of requests."""

    def post(self, url: str, body: dict, headers: dict, timeout: float) -> tuple[int, dict]:
        import requests

        try:
            resp = requests.post(url, json=body, headers=headers, timeout=timeout)
        except requests.Timeout as exc:
            raise TransportTimeout(str(exc)) from exc
        except requests.ConnectionError as exc:
            raise TransportFailure(str(exc)) from exc
        try:
            payload = resp.json()
        except ValueError:
            payload = {"raw": resp.text}
        return resp.status_code, payload


Transport = Any  # anything with .post(url, body, headers, timeout) -> (status, dict)


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


@dataclass
class BackendConfig:
    name: str
    base_url: str = ""
    api_key: str = ""
    model_id: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_in_flight: int = 8
    retries: int = 4
    backoff_base: float = 1.0
    image_downsample_px: Optional[int] = None
    # image service knobs
    resolution: int = 1024
    guidance_bounds: tuple[float, float] = (3.0, 13.0)

    def resolve_env(self) -> "BackendConfig":
        """Apply FAILFORGE_<NAME>_URL (fallback) and FAILFORGE_<NAME>_KEY (override)."""
        prefix = f"FAILFORGE_{self.name.upper()}"
        if not self.base_url:
            self.base_url = os.environ.get(f"{prefix}_URL", "")
        env_key = os.environ.get(f"{prefix}_KEY")
        if env_key:
            self.api_key = env_key
        return self


class _BaseClient:
    def __init__(
        self,
        config: BackendConfig,
        cache: ResponseCache,
        ledger: UsageLedger,
        transport: Transport | None = None,
        rng: random.Random | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.name = config.name
        self.cache = cache
        self.ledger = ledger
        self.transport = transport or HttpTransport()
        self._rng = rng or random.Random()
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(config.max_in_flight)

    @property
    def _headers(self) -> dict:
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        return headers

    def _url(self, endpoint: str) -> str:
        if not self.config.base_url:
            raise BackendError(f"{self.name}: no endpoint configured (set backends.{self.name}.url "
                               f"or FAILFORGE_{self.name.upper()}_URL)")
        return self.config.base_url.rstrip("/") + endpoint

    def _post_with_retry(self, endpoint: str, body: dict) -> tuple[dict, int]:
        """POST with retries; returns (payload, attempts). Raises on failure."""
        url = self._url(endpoint)
        attempts_log: list[dict] = []
        delay = self.config.backoff_base
        for attempt in range(1, self.config.retries + 1):
            try:
                with self._sem:
                    status, payload = self.transport.post(url, body, self._headers, self.config.timeout)
            except TransportFailure as exc:
                attempts_log.append({"attempt": attempt, "error": f"{type(exc).__name__}: {exc}"})
            else:
                if 200 <= status < 300:
                    return payload, attempt
                if status == 429 or status >= 500:
                    attempts_log.append({"attempt": attempt, "error": f"http {status}"})
                else:
                    raise BackendError(f"{self.name}: non-retryable http {status}: {_brief(payload)}")
            if attempt < self.config.retries:
                self._sleep(self._rng.uniform(0, delay))
                delay *= 2
        raise TransportError(f"{self.name}: {self.config.retries} attempts exhausted", attempts_log)

    def _call(self, kind: str, endpoint: str, body: dict, key: str) -> tuple[dict, bool, int]:
        """Cache-through call; returns (response payload, cached, attempts)."""
        cached = self.cache.get(self.name, key)
        if cached is not None:
            self.ledger.record_hit(self.name)
            return cached, True, 0
        payload, attempts = self._post_with_retry(endpoint, body)
        self.cache.put(self.name, key, body, payload)
        return payload, False, attempts


def _brief(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True)
    return text if len(text) <= 200 else text[:200] + "..."


class ChatClient(_BaseClient):
    """Chat-completion client for the baseline, frontier, and judge roles."""

    def request(
        self,
        messages: Sequence[ChatMessage],
        temperature: Optional[float] = None,
        max_tokens: Optional[int] = None,
    ) -> ChatRequest:
        """Build a ChatRequest filled with this backend's configured defaults."""
        return ChatRequest(
            model_id=self.config.model_id,
            messages=tuple(messages),
            temperature=self.config.temperature if temperature is None else temperature,
            max_tokens=self.config.max_tokens if max_tokens is None else max_tokens,
            image_downsample_px=self.config.image_downsample_px,
        )

    def chat(self, request: ChatRequest) -> ChatResponse:
        body = chat_wire_body(request)
        key = cache_key("chat", body)
        payload, cached, attempts = self._call("chat", CHAT_ENDPOINT, body, key)
        try:
            content = payload["choices"][0]["message"]["content"]
            usage = payload.get("usage", {})
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{self.name}: malformed chat response: {_brief(payload)}") from exc
        prompt_tokens = int(usage.get("prompt_tokens", 0))
        completion_tokens = int(usage.get("completion_tokens", 0))
        if not cached:
            self.ledger.record_network(self.name, prompt_tokens=prompt_tokens, completion_tokens=completion_tokens)
        return ChatResponse(
            content=str(content),
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            cached=cached,
            attempts=attempts,
        )


def chat_wire_body(request: ChatRequest) -> dict:
    """Serialize a ChatRequest to the wire schema (downsampling applied here)."""
    messages = []
    for message in request.messages:
        content = []
        for part in message.parts:
            if part.kind == "text":
                content.append({"type": "text", "text": part.text})
            else:
                entry: dict[str, Any] = {"type": "image", "media_type": part.media_type}
                b64 = part.b64
                url = part.url
                if url is not None and "://" not in url and Path(url).is_file():
                    data, media = _load_image_bytes(Path(url), request.image_downsample_px)
                    b64, url = base64.b64encode(data).decode("ascii"), None
                    entry["media_type"] = media or part.media_type
                if b64 is not None:
                    entry["b64"] = b64
                else:
                    entry["url"] = url
                content.append(entry)
        messages.append({"role": message.role, "content": content})
    body = {
        "model": request.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    if request.image_downsample_px is not None:
        body["image_downsample_px"] = request.image_downsample_px
    return body


def _load_image_bytes(path: Path, downsample_px: Optional[int]) -> tuple[bytes, Optional[str]]:
    """Read a local image, optionally downsampled; non-decodable files pass through."""
    raw = path.read_bytes()
    if downsample_px is None:
        return raw, None
    try:
        from PIL import Image
    except ImportError:
        return raw, None
    try:
        with Image.open(io.BytesIO(raw)) as img:
            img.thumbnail((downsample_px, downsample_px))
            buf = io.BytesIO()
            img.convert("RGB").save(buf, format="JPEG")
        return buf.getvalue(), "image/jpeg"
    except Exception:  # not an image we can decode; send as-is
        return raw, None


class ImageClient(_BaseClient):
    """Text-to-image client; artifacts are stored content-addressed."""

    def __init__(self, config: BackendConfig, cache: ResponseCache, ledger: UsageLedger,
                 images_dir: str | Path = "images", **kwargs):
        super().__init__(config, cache, ledger, **kwargs)
        self.images_dir = Path(images_dir)

    def validate_request(self, request: ImageRequest) -> None:
        if not request.prompt:
            raise ValueError("image prompt must be non-empty")
        res = self.config.resolution
        if request.width != res or request.height != res:
            raise ValueError(f"image dimensions {request.width}x{request.height} != configured {res}x{res}")
        lo, hi = self.config.guidance_bounds
        if not lo <= request.guidance_scale <= hi:
            raise ValueError(f"guidance_scale {request.guidance_scale} outside sweep bounds [{lo}, {hi}]")

    def generate(self, request: ImageRequest) -> ImageArtifact:
        self.validate_request(request)
        body = {
            "prompt": request.prompt,
            "width": request.width,
            "height": request.height,
            "seed": request.seed,
            "guidance_scale": request.guidance_scale,
        }
        key = cache_key("image", body)
        payload, cached, attempts = self._call("image", IMAGE_ENDPOINT, body, key)
        if not cached:
            self.ledger.record_network(self.name, images=1)
        if "b64" in payload:
            data = base64.b64decode(payload["b64"])
            locator = self._store(data, body)
        elif "artifact_url" in payload:
            locator = str(payload["artifact_url"])
        else:
            raise BackendError(f"{self.name}: image response carries neither b64 nor artifact_url")
        return ImageArtifact(locator=locator, cached=cached, attempts=attempts)

    def _store(self, data: bytes, request_body: dict) -> str:
        art_digest = hashlib_sha256(data)
        self.images_dir.mkdir(parents=True, exist_ok=True)
        artifact = self.images_dir / f"{art_digest}.png"
        if not artifact.exists():
            tmp = artifact.with_name(artifact.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, artifact)
        meta = self.images_dir / f"{art_digest}.json"
        if not meta.exists():
            meta.write_text(
                json.dumps(request_body, sort_keys=True, separators=(",", ":"), ensure_ascii=False),
                encoding="utf-8",
            )
        return str(artifact)


def hashlib_sha256(data: bytes) -> str:
    import hashlib

    return hashlib.sha256(data).hexdigest()


class EmbeddingClient(_BaseClient):
    """Embedding client; results are cached per text."""

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise ValueError("texts must be non-empty")
        if any(not t for t in texts):
            raise ValueError("empty strings are rejected by the embedding policy")
        keys = [cache_key("embed", {"model": self.config.model_id, "input": t}) for t in texts]
        vectors: dict[str, list[float]] = {}
        pending: list[tuple[str, str]] = []  # (key, text), deduplicated, in order
        for key, text in zip(keys, texts):
            cached = self.cache.get(self.name, key)
            if cached is not None:
                vectors[key] = cached["embedding"]
                self.ledger.record_hit(self.name)
            elif key not in {k for k, _ in pending}:
                pending.append((key, text))
        if pending:
            body = {"input": [t for _, t in pending]}
            if self.config.model_id:
                body["model"] = self.config.model_id
            payload, _ = self._post_with_retry(EMBED_ENDPOINT, body)
            data = payload.get("data")
            if not isinstance(data, list) or len(data) != len(pending):
                raise BackendError(
                    f"{self.name}: embedding response count {len(data) if isinstance(data, list) else '?'} "
                    f"!= input count {len(pending)}"
                )
            for (key, text), entry in zip(pending, data):
                vec = [float(x) for x in entry["embedding"]]
                vectors[key] = vec
                self.cache.put(self.name, key, {"model": self.config.model_id, "input": text}, {"embedding": vec})
                self.ledger.record_network(self.name)
        out = [vectors[key] for key in keys]
        dims = {len(v) for v in out}
        if len(dims) > 1:
            raise BackendError(f"{self.name}: embedding dimension mismatch across batch: {sorted(dims)}")
        return out


# ---------------------------------------------------------------------------
# Backend set construction
# ---------------------------------------------------------------------------


@dataclass
class BackendSet:
    """The five logical backends plus their shared cache and ledger."""

    baseline: ChatClient
    frontier: ChatClient
    judge: ChatClient
    image: ImageClient
    embedding: EmbeddingClient
    ledger: UsageLedger
    cache: ResponseCache

    def usage_report(self) -> dict:
        return self.ledger.snapshot()


def build_backends(
    config: dict,
    cache_dir: str | Path,
    images_dir: str | Path,
    transport: Transport | None = None,
) -> BackendSet:
    """Construct the backend set from the `backends` config section."""
    price = config.get("price_table", {})
    ledger = UsageLedger(
        PriceTable(
            per_million_tokens=float(price.get("per_million_tokens", 0.0)),
            per_image=float(price.get("per_image", 0.0)),
        )
    )
    cache = ResponseCache(cache_dir)
    shared = {k: config[k] for k in ("timeout", "max_in_flight", "retries", "backoff_base") if k in config}

    def base_config(name: str, section: dict) -> BackendConfig:
        cfg = BackendConfig(
            name=name,
            base_url=section.get("url", ""),
            api_key=section.get("key", ""),
            model_id=section.get("model", name),
        )
        if "timeout" in shared:
            cfg.timeout = float(shared["timeout"])
        if "max_in_flight" in shared:
            cfg.max_in_flight = int(shared["max_in_flight"])
        if "retries" in shared:
            cfg.retries = int(shared["retries"])
        if "backoff_base" in shared:
            cfg.backoff_base = float(shared["backoff_base"])
        return cfg.resolve_env()

    def chat_client(name: str, temperature: float, downsample: Optional[int] = None,
                    section: Optional[dict] = None) -> ChatClient:
        section = dict(config.get(name, {}) if section is None else section)
        cfg = base_config(name, section)
        cfg.temperature = float(section.get("temperature", temperature))
        cfg.max_tokens = int(section.get("max_tokens", 1024))
        cfg.image_downsample_px = section.get("image_downsample_px", downsample)
        return ChatClient(cfg, cache, ledger, transport=transport)

    # Evaluation and judging run at temperature 0 for determinism; generation
    # turns (frontier) default to 0.7 for diversity. Frontier inputs are
    # downsampled to 125 px by default to bound token cost. The judge reuses
    # the frontier service unless configured separately.
    baseline = chat_client("baseline", temperature=0.0)
    frontier = chat_client("frontier", temperature=0.7, downsample=125)
    judge_section = config.get("judge", config.get("frontier", {}))
    judge = chat_client("judge", temperature=0.0, section=judge_section)

    image_section = dict(config.get("image", {}))
    image_cfg = base_config("image", image_section)
    image_cfg.resolution = int(image_section.get("resolution", 1024))
    image_cfg.guidance_bounds = (
        float(image_section.get("guidance_lo", 3.0)),
        float(image_section.get("guidance_hi", 13.0)),
    )
    image = ImageClient(image_cfg, cache, ledger, images_dir=images_dir, transport=transport)

    embed_cfg = base_config("embedding", dict(config.get("embedding", {})))
    embed_cfg.model_id = dict(config.get("embedding", {})).get("model", "")
    embedding = EmbeddingClient(embed_cfg, cache, ledger, transport=transport)

    return BackendSet(
        baseline=baseline,
        frontier=frontier,
        judge=judge,
        image=image,
        embedding=embedding,
        ledger=ledger,
        cache=cache,
    )
