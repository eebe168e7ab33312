"""Shared test utilities: simulator lifecycle, record builders, file fixtures."""

from __future__ import annotations

import asyncio
import contextlib
import json
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, AsyncIterator, Iterator

import httpx

from lmdispatch import CredentialStore, PromptRecord, SimulatorProfile, SimulatorServer
from lmdispatch.records import classify_prompt_content
from lmdispatch.simulator import LatencySpec


@contextlib.asynccontextmanager
async def running_simulator(
    profile: SimulatorProfile | None = None, **profile_kwargs: Any
) -> AsyncIterator[SimulatorServer]:
    if profile is None:
        profile = SimulatorProfile(**profile_kwargs)
    server = SimulatorServer(profile)
    await server.start()
    try:
        yield server
    finally:
        await server.stop()


@contextlib.contextmanager
def threaded_simulator(
    profile: SimulatorProfile | None = None, **profile_kwargs: Any
) -> Iterator[SimulatorServer]:
    """Simulator on its own thread+loop, for code that calls asyncio.run itself."""
    if profile is None:
        profile = SimulatorProfile(**profile_kwargs)
    server = SimulatorServer(profile)
    loop = asyncio.new_event_loop()
    started = threading.Event()

    def runner() -> None:
        asyncio.set_event_loop(loop)
        loop.run_until_complete(server.start())
        started.set()
        loop.run_forever()

    thread = threading.Thread(target=runner, daemon=True)
    thread.start()
    started.wait(timeout=5)
    try:
        yield server
    finally:
        asyncio.run_coroutine_threadsafe(server.stop(), loop).result(timeout=5)
        loop.call_soon_threadsafe(loop.stop)
        thread.join(timeout=5)
        loop.close()


def fixed(seconds: float) -> LatencySpec:
    return LatencySpec("fixed", seconds)


def make_record(
    record_id: str = "1",
    prompt: Any = "hello",
    api: str = "simulator",
    model_name: str = "test-model",
    **kwargs: Any,
) -> PromptRecord:
    return PromptRecord(
        id=record_id,
        prompt=classify_prompt_content(prompt),
        api=api,
        model_name=model_name,
        raw_prompt=prompt,
        **kwargs,
    )


def write_experiment(path: Path, payloads: list[dict[str, Any] | str]) -> Path:
    """Write payloads as JSONL; plain strings are written verbatim (raw lines)."""
    lines = [
        p if isinstance(p, str) else json.dumps(p, ensure_ascii=False) for p in payloads
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def simple_payloads(
    n: int, api: str = "simulator", model_name: str = "test-model", **extra: Any
) -> list[dict[str, Any]]:
    return [
        {"prompt": f"question {i}", "api": api, "model_name": model_name, **extra}
        for i in range(n)
    ]


def write_completed_fixture(path: Path, n_responses: int, n_errors: int = 0) -> Path:
    """Synthesize a completed file with response records and error records."""
    now = datetime.now().astimezone().isoformat()
    lines = []
    for i in range(n_responses):
        lines.append(
            json.dumps(
                {
                    "id": str(i + 1),
                    "prompt": f"question {i}",
                    "api": "simulator",
                    "model_name": "test-model",
                    "response": f"answer {i}",
                    "timestamp_sent": now,
                    "timestamp_completed": now,
                    "attempts": 1,
                }
            )
        )
    for i in range(n_errors):
        lines.append(
            json.dumps(
                {
                    "id": f"err-{i}",
                    "prompt": f"failed question {i}",
                    "api": "simulator",
                    "model_name": "test-model",
                    "error": "max attempts exceeded: HTTP 503",
                    "timestamp_sent": now,
                    "timestamp_completed": now,
                    "attempts": 3,
                }
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


async def fetch_inspect(server: SimulatorServer) -> list[dict[str, Any]]:
    async with httpx.AsyncClient() as client:
        response = await client.get(f"{server.base_url}/inspect")
    response.raise_for_status()
    return response.json()


def store_for(server: SimulatorServer) -> CredentialStore:
    """Credential store pointing every built-in adapter at one simulator."""
    return CredentialStore(
        environ={
            "SIMULATOR_BASE_URL": server.base_url,
            "OPENAI_BASE_URL": server.base_url,
            "OLLAMA_BASE_URL": server.base_url,
            "OPENAI_API_KEY": "test-key-123",
        }
    )
