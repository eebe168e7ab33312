"""Local HTTP service that stands in for model endpoints.

The simulator speaks either the openai-compatible or the ollama chat wire,
delays each request by a seeded latency draw, optionally serializes
processing (one request at a time, like a single-worker model server),
enforces a rolling 60-second QPM quota with 429 responses, and injects
faults by request index. Every request is recorded in an append-only log
served back over GET /inspect so tests can verify client launch spacing
from the server's point of view.

With a fixed seed the full status/latency sequence is a deterministic
function of the request sequence.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import random
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

PROTOCOLS = ("openai-compatible", "ollama")
CONCURRENCY_MODES = ("unbounded", "serialized")
CHAT_PATHS = {"openai-compatible": "/v1/chat/completions", "ollama": "/api/chat"}

_REASONS = {
    200: "OK",
    400: "Bad Request",
    404: "Not Found",
    405: "Method Not Allowed",
    422: "Unprocessable Entity",
    429: "Too Many Requests",
    500: "Internal Server Error",
    502: "Bad Gateway",
    503: "Service Unavailable",
    504: "Gateway Timeout",
}


@dataclass(frozen=True)
class LatencySpec:
    """Latency distribution: fixed seconds, uniform[lo, hi], or lognormal(mu, sigma)."""

    kind: str
    a: float = 0.0
    b: float = 0.0

    def draw(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            return self.a
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b)
        return rng.lognormvariate(self.a, self.b)

    @classmethod
    def parse(cls, raw: Any) -> "LatencySpec":
        if isinstance(raw, (int, float)) and not isinstance(raw, bool):
            if raw < 0:
                raise ConfigurationError("latency must be >= 0")
            return cls("fixed", float(raw))
        if isinstance(raw, dict) and len(raw) == 1:
            kind, value = next(iter(raw.items()))
            if kind == "fixed":
                return cls.parse(value)
            if kind == "uniform":
                if (
                    not isinstance(value, list)
                    or len(value) != 2
                    or not all(isinstance(v, (int, float)) for v in value)
                    or not 0 <= value[0] <= value[1]
                ):
                    raise ConfigurationError("uniform latency needs [lo, hi] with 0 <= lo <= hi")
                return cls("uniform", float(value[0]), float(value[1]))
            if kind == "lognormal":
                if (
                    not isinstance(value, list)
                    or len(value) != 2
                    or not all(isinstance(v, (int, float)) for v in value)
                    or value[1] < 0
                ):
                    raise ConfigurationError("lognormal latency needs [mu, sigma] with sigma >= 0")
                return cls("lognormal", float(value[0]), float(value[1]))
        raise ConfigurationError(f"unrecognized latency spec: {raw!r}")


@dataclass(frozen=True)
class FaultRule:
    """Override the response status for requests matched by index.

    Exactly one selector: first (index < n), indices (explicit set),
    every (each n-th request), or rate (seeded random fraction).
    """

    status: int
    first: int | None = None
    indices: frozenset[int] | None = None
    every: int | None = None
    rate: float | None = None

    def matches(self, index: int, seed: int) -> bool:
        if self.first is not None:
            return index < self.first
        if self.indices is not None:
            return index in self.indices
        if self.every is not None:
            return (index + 1) % self.every == 0
        assert self.rate is not None
        return random.Random(f"{seed}:fault:{index}").random() < self.rate

    @classmethod
    def parse(cls, raw: Any) -> "FaultRule":
        if not isinstance(raw, dict):
            raise ConfigurationError(f"fault rule must be an object: {raw!r}")
        status = raw.get("status")
        if not isinstance(status, int) or not 100 <= status <= 599:
            raise ConfigurationError(f"fault rule needs an HTTP status: {raw!r}")
        selectors = [k for k in ("first", "indices", "every", "rate") if k in raw]
        if len(selectors) != 1:
            raise ConfigurationError(
                f"fault rule needs exactly one of first/indices/every/rate: {raw!r}"
            )
        selector = selectors[0]
        value = raw[selector]
        if selector == "first":
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError("fault 'first' must be an integer >= 1")
            return cls(status=status, first=value)
        if selector == "indices":
            if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                raise ConfigurationError("fault 'indices' must be a list of integers")
            return cls(status=status, indices=frozenset(value))
        if selector == "every":
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError("fault 'every' must be an integer >= 1")
            return cls(status=status, every=value)
        if not isinstance(value, (int, float)) or not 0 <= value <= 1:
            raise ConfigurationError("fault 'rate' must be in [0, 1]")
        return cls(status=status, rate=float(value))


@dataclass(frozen=True)
class SimulatorProfile:
    protocol: str = "openai-compatible"
    latency: LatencySpec = LatencySpec("fixed", 0.0)
    concurrency_mode: str = "unbounded"
    quota_qpm: int | None = None
    fault_schedule: tuple[FaultRule, ...] = ()
    canned_response: str = "echo"  # "echo" or the literal fixed reply text
    seed: int = 0
    model_latencies: dict[str, LatencySpec] | None = None

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigurationError(f"protocol must be one of {PROTOCOLS}")
        if self.concurrency_mode not in CONCURRENCY_MODES:
            raise ConfigurationError(f"concurrency_mode must be one of {CONCURRENCY_MODES}")
        if self.quota_qpm is not None and self.quota_qpm < 1:
            raise ConfigurationError("quota_qpm must be >= 1")

    def latency_for(self, model: str) -> LatencySpec:
        if self.model_latencies and model in self.model_latencies:
            return self.model_latencies[model]
        return self.latency

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "SimulatorProfile":
        if not isinstance(raw, dict):
            raise ConfigurationError("profile must be a JSON object")
        known = {
            "protocol",
            "latency",
            "concurrency_mode",
            "quota_qpm",
            "fault_schedule",
            "canned_response",
            "seed",
            "model_latencies",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown profile keys: {sorted(unknown)}")
        faults = raw.get("fault_schedule", [])
        if not isinstance(faults, list):
            raise ConfigurationError("fault_schedule must be a list")
        model_latencies = None
        if "model_latencies" in raw:
            if not isinstance(raw["model_latencies"], dict):
                raise ConfigurationError("model_latencies must be an object")
            model_latencies = {
                model: LatencySpec.parse(spec)
                for model, spec in raw["model_latencies"].items()
            }
        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigurationError("seed must be an integer")
        return cls(
            protocol=raw.get("protocol", "openai-compatible"),
            latency=LatencySpec.parse(raw.get("latency", 0.0)),
            concurrency_mode=raw.get("concurrency_mode", "unbounded"),
            quota_qpm=raw.get("quota_qpm"),
            fault_schedule=tuple(FaultRule.parse(r) for r in faults),
            canned_response=raw.get("canned_response", "echo"),
            seed=seed,
            model_latencies=model_latencies,
        )

    @classmethod
    def from_json_file(cls, path: Path | str) -> "SimulatorProfile":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read profile {path}: {exc}") from exc
        return cls.from_dict(raw)


@dataclass
class RequestLogEntry:
    """One chat request as seen by the simulator (monotonic clock instants)."""

    index: int
    path: str
    model: str | None
    prompt_sha: str | None
    arrival: float
    dispatch: float | None = None
    completion: float | None = None
    status: int | None = None
    latency: float | None = None


class SimulatorServer:
    """Asyncio HTTP server implementing one SimulatorProfile.

    Connections are handled one request each (Connection: close). The
    request log is safe under concurrent appends because everything runs
    on one event loop.
    """

    def __init__(self, profile: SimulatorProfile, host: str = "127.0.0.1", port: int = 0):
        self.profile = profile
        self.host = host
        self.port = port
        self.log: list[RequestLogEntry] = []
        self._counter = 0
        self._admitted: deque[float] = deque()
        self._dispatch_lock = asyncio.Lock()
        self._server: asyncio.base_events.Server | None = None

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle_connection, self.host, self.port, backlog=512
        )
        self.port = self._server.sockets[0].getsockname()[1]

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    # Request handling -----------------------------------------------

    async def _handle_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        try:
            request = await self._read_request(reader)
            if request is None:
                return
            method, path, body = request
            if method == "GET" and path == "/inspect":
                await self._respond(writer, 200, [asdict(e) for e in self.log])
            elif method == "POST" and path == CHAT_PATHS[self.profile.protocol]:
                await self._serve_chat(writer, path, body)
            else:
                await self._respond(writer, 404, {"error": "not found"})
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def _read_request(
        self, reader: asyncio.StreamReader
    ) -> tuple[str, str, bytes] | None:
        request_line = await reader.readline()
        if not request_line:
            return None
        parts = request_line.decode("latin-1").split()
        if len(parts) < 2:
            return None
        method, path = parts[0].upper(), parts[1]
        content_length = 0
        while True:
            line = await reader.readline()
            if line in (b"\r\n", b"\n", b""):
                break
            name, _, value = line.decode("latin-1").partition(":")
            if name.strip().lower() == "content-length":
                try:
                    content_length = int(value.strip())
                except ValueError:
                    content_length = 0
        body = await reader.readexactly(content_length) if content_length else b""
        return method, path, body

    async def _serve_chat(
        self, writer: asyncio.StreamWriter, path: str, body: bytes
    ) -> None:
        loop = asyncio.get_running_loop()
        index = self._counter
        self._counter += 1
        entry = RequestLogEntry(
            index=index, path=path, model=None, prompt_sha=None, arrival=loop.time()
        )
        self.log.append(entry)

        parsed = self._parse_chat_body(body)
        if parsed is None:
            entry.dispatch = entry.completion = loop.time()
            entry.status = 400
            await self._respond(writer, 400, {"error": "malformed request body"})
            return
        model, messages = parsed
        entry.model = model
        entry.prompt_sha = _prompt_sha(messages)

        for rule in self.profile.fault_schedule:
            if rule.matches(index, self.profile.seed):
                entry.dispatch = entry.completion = loop.time()
                entry.status = rule.status
                await self._respond(
                    writer, rule.status, {"error": f"injected fault ({rule.status})"}
                )
                return

        if self.profile.quota_qpm is not None:
            now = loop.time()
            while self._admitted and now - self._admitted[0] >= 60.0:
                self._admitted.popleft()
            if len(self._admitted) >= self.profile.quota_qpm:
                entry.dispatch = entry.completion = loop.time()
                entry.status = 429
                await self._respond(writer, 429, {"error": "quota exceeded"})
                return
            self._admitted.append(now)

        latency = self.profile.latency_for(model).draw(
            random.Random(f"{self.profile.seed}:latency:{index}")
        )
        entry.latency = latency
        if self.profile.concurrency_mode == "serialized":
            async with self._dispatch_lock:
                entry.dispatch = loop.time()
                await asyncio.sleep(latency)
                await self._finish_chat(writer, entry, model, messages)
        else:
            entry.dispatch = loop.time()
            await asyncio.sleep(latency)
            await self._finish_chat(writer, entry, model, messages)

    async def _finish_chat(
        self,
        writer: asyncio.StreamWriter,
        entry: RequestLogEntry,
        model: str,
        messages: list[dict[str, Any]],
    ) -> None:
        loop = asyncio.get_running_loop()
        if self.profile.canned_response == "echo":
            text = f"echo:{model}:{entry.prompt_sha}"
        else:
            text = self.profile.canned_response
        if self.profile.protocol == "openai-compatible":
            payload: dict[str, Any] = {
                "id": f"sim-{entry.index}",
                "object": "chat.completion",
                "model": model,
                "choices": [
                    {
                        "index": 0,
                        "message": {"role": "assistant", "content": text},
                        "finish_reason": "stop",
                    }
                ],
            }
        else:
            payload = {
                "model": model,
                "message": {"role": "assistant", "content": text},
                "done": True,
            }
        entry.completion = loop.time()
        entry.status = 200
        await self._respond(writer, 200, payload)

    def _parse_chat_body(self, body: bytes) -> tuple[str, list[dict[str, Any]]] | None:
        try:
            data = json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return None
        if not isinstance(data, dict):
            return None
        model = data.get("model")
        messages = data.get("messages")
        if not isinstance(model, str) or not model:
            return None
        if not isinstance(messages, list) or not messages:
            return None
        for message in messages:
            if not isinstance(message, dict):
                return None
            if not isinstance(message.get("role"), str):
                return None
            if not isinstance(message.get("content"), str):
                return None
        return model, messages

    async def _respond(
        self, writer: asyncio.StreamWriter, status: int, payload: Any
    ) -> None:
        body = json.dumps(payload).encode("utf-8")
        reason = _REASONS.get(status, "Status")
        head = (
            f"HTTP/1.1 {status} {reason}\r\n"
            "Content-Type: application/json\r\n"
            f"Content-Length: {len(body)}\r\n"
            "Connection: close\r\n"
            "\r\n"
        ).encode("latin-1")
        writer.write(head + body)
        await writer.drain()


def _prompt_sha(messages: list[dict[str, Any]]) -> str:
    blob = json.dumps(messages, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
