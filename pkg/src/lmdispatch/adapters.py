"""Adapters over model-serving HTTP protocols, plus credential loading.

Every adapter maps one api name onto one wire protocol and classifies
every possible failure as retryable or fatal -- query() never raises past
its boundary. New endpoints are added by subclassing EndpointAdapter,
implementing the async query method, and registering the instance.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import httpx

from .records import ChatHistory, PromptRecord, SingleText, UserTurnSequence
from .scheduler import AttemptOutcome

log = logging.getLogger(__name__)

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})
FATAL_STATUSES = frozenset({400, 401, 403, 404, 422})


def classify_status(status: int) -> str:
    """Map an HTTP status to "retryable" or "fatal"."""
    if status in RETRYABLE_STATUSES:
        return "retryable"
    if status in FATAL_STATUSES:
        return "fatal"
    if status >= 500:
        return "retryable"
    return "fatal"


@dataclass
class CredentialStore:
    """Env-file values merged under process-environment precedence.

    Values never appear in repr or logs; look them up explicitly.
    """

    file_values: dict[str, str] = field(default_factory=dict)
    environ: Mapping[str, str] | None = None

    def __post_init__(self) -> None:
        if self.environ is None:
            import os

            self.environ = dict(os.environ)

    def get(self, name: str, default: str | None = None) -> str | None:
        assert self.environ is not None
        if name in self.environ:
            return self.environ[name]
        return self.file_values.get(name, default)

    def provenance(self, name: str) -> str | None:
        assert self.environ is not None
        if name in self.environ:
            return "process-environment"
        if name in self.file_values:
            return "env-file"
        return None

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def __repr__(self) -> str:
        return f"CredentialStore({len(self.file_values)} file entries)"


def load_env_file(
    path: Path | str | None = None,
    environ: Mapping[str, str] | None = None,
) -> CredentialStore:
    """Parse a .env file (KEY=VALUE lines, '#' comments) into a store.

    A missing file is legal and yields a store backed only by the process
    environment. The value is everything after the first '=' -- no quoting
    or escaping semantics. Malformed lines are warned about and skipped.
    """
    file_values: dict[str, str] = {}
    env_path = Path(path) if path is not None else Path(".env")
    if env_path.is_file():
        for line_number, line in enumerate(
            env_path.read_text(encoding="utf-8").splitlines(), start=1
        ):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                log.warning("%s:%d: malformed line skipped", env_path, line_number)
                continue
            file_values[key] = value
    return CredentialStore(file_values=file_values, environ=environ)


class EndpointAdapter:
    """Base class for endpoint adapters.

    Subclasses set api_name and required_credentials and implement the
    async query method; all failures must be returned as outcomes, never
    raised.
    """

    api_name: str = ""
    required_credentials: tuple[str, ...] = ()

    async def query(self, record: PromptRecord, timeout: float) -> AttemptOutcome:
        raise NotImplementedError

    async def aclose(self) -> None:
        pass


class _CallFailed(Exception):
    def __init__(self, kind: str, reason: str):
        super().__init__(reason)
        self.kind = kind
        self.reason = reason


class HttpChatAdapter(EndpointAdapter):
    """Shared request building, transport, and outcome mapping for chat APIs."""

    default_base_url = ""
    base_url_var = ""

    def __init__(
        self,
        credentials: CredentialStore | None = None,
        base_url: str | None = None,
    ):
        self.credentials = credentials or CredentialStore()
        self.base_url = (
            base_url
            or (self.credentials.get(self.base_url_var) if self.base_url_var else None)
            or self.default_base_url
        )
        # Built eagerly: client construction (TLS context setup) costs tens of
        # milliseconds and must not land on the first request's launch slot.
        self._client: httpx.AsyncClient | None = httpx.AsyncClient(
            base_url=self.base_url,
            limits=httpx.Limits(max_connections=None),
        )

    # Protocol hooks -------------------------------------------------

    def endpoint_path(self) -> str:
        raise NotImplementedError

    def build_body(
        self, model: str, messages: list[dict[str, str]], parameters: dict[str, Any] | None
    ) -> dict[str, Any]:
        raise NotImplementedError

    def extract_text(self, data: Any) -> str:
        raise NotImplementedError

    def auth_headers(self) -> dict[str, str]:
        return {}

    # Query ----------------------------------------------------------

    async def query(self, record: PromptRecord, timeout: float) -> AttemptOutcome:
        start = time.monotonic()
        for name in self.required_credentials:
            if self.credentials.get(name) is None:
                return AttemptOutcome.fatal(f"missing credential {name}")
        try:
            response = await self._run_exchange(record, timeout)
        except _CallFailed as exc:
            latency = time.monotonic() - start
            if exc.kind == "retryable":
                return AttemptOutcome.retryable(exc.reason, latency)
            return AttemptOutcome.fatal(exc.reason, latency)
        except Exception as exc:  # totality: nothing escapes unclassified
            return AttemptOutcome.fatal(
                f"unexpected error: {exc!r}", time.monotonic() - start
            )
        return AttemptOutcome.success(response, time.monotonic() - start)

    async def _run_exchange(self, record: PromptRecord, timeout: float) -> Any:
        content = record.prompt
        if isinstance(content, SingleText):
            return await self._chat_call(
                record, [{"role": "user", "content": content.text}], timeout
            )
        if isinstance(content, ChatHistory):
            messages = [
                {"role": m.role, "content": m.content} for m in content.messages
            ]
            return [await self._chat_call(record, messages, timeout)]
        assert isinstance(content, UserTurnSequence)
        # Sequential dependent calls; the whole exchange is one rate slot.
        messages = []
        replies: list[str] = []
        for turn in content.turns:
            messages.append({"role": "user", "content": turn})
            reply = await self._chat_call(record, messages, timeout)
            replies.append(reply)
            messages.append({"role": "assistant", "content": reply})
        return replies

    async def _chat_call(
        self, record: PromptRecord, messages: list[dict[str, str]], timeout: float
    ) -> str:
        body = self.build_body(record.model_name, messages, record.parameters)
        client = self._get_client()
        try:
            response = await client.post(
                self.endpoint_path(),
                json=body,
                headers=self.auth_headers(),
                timeout=timeout,
            )
        except httpx.TimeoutException:
            raise _CallFailed("retryable", f"timeout after {timeout:g}s")
        except httpx.ConnectError as exc:
            raise _CallFailed("retryable", f"connect: {exc}")
        except httpx.TransportError as exc:
            raise _CallFailed("retryable", f"transport: {exc}")
        except httpx.HTTPError as exc:
            raise _CallFailed("fatal", f"http: {exc}")
        if response.status_code != 200:
            kind = classify_status(response.status_code)
            if response.status_code == 429:
                raise _CallFailed(kind, "rate limited (HTTP 429)")
            raise _CallFailed(kind, f"HTTP {response.status_code}")
        try:
            data = response.json()
            return self.extract_text(data)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            # Truncated or malformed success bodies are treated as transient.
            raise _CallFailed("retryable", f"malformed response: {exc!r}")

    def _get_client(self) -> httpx.AsyncClient:
        if self._client is None:
            self._client = httpx.AsyncClient(
                base_url=self.base_url,
                limits=httpx.Limits(max_connections=None),
            )
        return self._client

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()
            self._client = None


class OpenAIChatAdapter(HttpChatAdapter):
    """OpenAI-compatible chat completions endpoint."""

    api_name = "openai"
    required_credentials = ("OPENAI_API_KEY",)
    default_base_url = "https://api.openai.com"
    base_url_var = "OPENAI_BASE_URL"
    api_key_var = "OPENAI_API_KEY"

    def endpoint_path(self) -> str:
        return "/v1/chat/completions"

    def build_body(
        self, model: str, messages: list[dict[str, str]], parameters: dict[str, Any] | None
    ) -> dict[str, Any]:
        body: dict[str, Any] = {"model": model, "messages": messages}
        body.update(parameters or {})
        return body

    def extract_text(self, data: Any) -> str:
        content = data["choices"][0]["message"]["content"]
        return content if isinstance(content, str) else ""

    def auth_headers(self) -> dict[str, str]:
        key = self.credentials.get(self.api_key_var)
        return {"Authorization": f"Bearer {key}"} if key else {}


class OllamaChatAdapter(HttpChatAdapter):
    """Ollama chat endpoint with streaming disabled.

    The server queues requests for computation; long waits are normal and
    only the request timeout turns them into (retryable) failures.
    """

    api_name = "ollama"
    required_credentials = ()
    default_base_url = "http://localhost:11434"
    base_url_var = "OLLAMA_BASE_URL"

    def endpoint_path(self) -> str:
        return "/api/chat"

    def build_body(
        self, model: str, messages: list[dict[str, str]], parameters: dict[str, Any] | None
    ) -> dict[str, Any]:
        body: dict[str, Any] = {"model": model, "messages": messages, "stream": False}
        body.update(parameters or {})
        return body

    def extract_text(self, data: Any) -> str:
        content = data["message"]["content"]
        return content if isinstance(content, str) else ""


class SimulatorChatAdapter(OpenAIChatAdapter):
    """Adapter for the bundled endpoint simulator (openai-compatible wire)."""

    api_name = "simulator"
    required_credentials = ()
    default_base_url = "http://127.0.0.1:8583"
    base_url_var = "SIMULATOR_BASE_URL"

    def auth_headers(self) -> dict[str, str]:
        return {}


class AdapterRegistry:
    """Name-to-adapter lookup used by the scheduler."""

    def __init__(self) -> None:
        self._adapters: dict[str, EndpointAdapter] = {}

    def register(self, adapter: EndpointAdapter) -> None:
        if not adapter.api_name:
            raise ValueError("adapter must declare an api_name")
        self._adapters[adapter.api_name] = adapter

    def resolve(self, api_name: str) -> EndpointAdapter:
        try:
            return self._adapters[api_name]
        except KeyError:
            raise KeyError(f"unknown api: {api_name}") from None

    def names(self) -> list[str]:
        return sorted(self._adapters)

    async def aclose(self) -> None:
        await asyncio.gather(*(a.aclose() for a in self._adapters.values()))


def build_registry(credentials: CredentialStore | None = None) -> AdapterRegistry:
    """Registry with the built-in adapters: openai, ollama, simulator."""
    credentials = credentials or CredentialStore()
    registry = AdapterRegistry()
    registry.register(OpenAIChatAdapter(credentials))
    registry.register(OllamaChatAdapter(credentials))
    registry.register(SimulatorChatAdapter(credentials))
    return registry
