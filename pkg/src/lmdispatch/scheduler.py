"""Queue planning and asynchronous rate-limited dispatch.

Records are partitioned into launch queues; each queue launches requests
at a fixed interval of 60/QPM seconds without waiting for earlier
responses, and all queues run concurrently on one event loop. A
synchronous baseline mode (launch waits for the response) is kept as a
first-class mode for speedup comparisons.
"""

from __future__ import annotations

import asyncio
import logging
import random
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Literal, Protocol

from .records import CompletedRecord, PromptRecord

log = logging.getLogger(__name__)

BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 30.0


@dataclass
class ExperimentSettings:
    """Knobs for one experiment run. QPM rates are client-side launch rates."""

    data_folder: Path = Path("data")
    max_queries: int = 10
    max_attempts: int = 3
    parallel: bool = False
    per_queue_rates: dict[str, int] | None = None
    request_timeout: float = 120.0
    env_file: Path | None = None
    synchronous: bool = False

    def __post_init__(self) -> None:
        self.data_folder = Path(self.data_folder)
        if self.max_queries < 1:
            raise ValueError("max_queries must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be positive")
        for key, rate in (self.per_queue_rates or {}).items():
            if rate < 1:
                raise ValueError(f"per-queue rate for {key!r} must be >= 1")


@dataclass(frozen=True)
class AttemptOutcome:
    """Terminal classification of one adapter attempt."""

    kind: Literal["success", "retryable", "fatal"]
    response: Any | None = None
    reason: str = ""
    latency: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "success" and self.response is None:
            raise ValueError("success outcome requires a response")
        if self.kind != "success" and not self.reason:
            raise ValueError("failure outcome requires a reason")

    @classmethod
    def success(cls, response: Any, latency: float = 0.0) -> "AttemptOutcome":
        return cls("success", response=response, latency=latency)

    @classmethod
    def retryable(cls, reason: str, latency: float = 0.0) -> "AttemptOutcome":
        return cls("retryable", reason=reason, latency=latency)

    @classmethod
    def fatal(cls, reason: str, latency: float = 0.0) -> "AttemptOutcome":
        return cls("fatal", reason=reason, latency=latency)


class QueryAdapter(Protocol):
    api_name: str

    async def query(self, record: PromptRecord, timeout: float) -> AttemptOutcome: ...


class AdapterLookup(Protocol):
    def resolve(self, api_name: str) -> QueryAdapter: ...


@dataclass(frozen=True)
class DispatchQueue:
    key: str
    records: tuple[PromptRecord, ...]
    rate_qpm: int


@dataclass(frozen=True)
class QueuePlan:
    queues: tuple[DispatchQueue, ...]

    @property
    def record_count(self) -> int:
        return sum(len(q.records) for q in self.queues)


def plan_queues(records: list[PromptRecord], settings: ExperimentSettings) -> QueuePlan:
    """Partition records into launch queues.

    Non-parallel runs use a single "all" queue at the global rate. Parallel
    runs key queues by record group when present, else by api, in first
    appearance order; per-queue rates override the global rate.
    """
    rates = settings.per_queue_rates or {}
    if not settings.parallel:
        return QueuePlan(
            queues=(DispatchQueue("all", tuple(records), settings.max_queries),)
        )

    grouped: dict[str, list[PromptRecord]] = {}
    for record in records:
        key = record.group if record.group is not None else record.api
        grouped.setdefault(key, []).append(record)
    for key in rates:
        if key not in grouped:
            log.warning("per-queue rate for %r matches no record; ignored", key)
    queues = tuple(
        DispatchQueue(key, tuple(members), rates.get(key, settings.max_queries))
        for key, members in grouped.items()
    )
    return QueuePlan(queues=queues)


def launch_interval(rate_qpm: int) -> float:
    """Seconds between launches for a queue limited to rate_qpm."""
    if rate_qpm < 1:
        raise ValueError("rate_qpm must be >= 1")
    return 60.0 / rate_qpm


def backoff(attempt: int, rng: random.Random | None = None) -> float:
    """Capped exponential backoff with full jitter: uniform in [0, min(cap, base*2^(k-1))]."""
    if attempt < 1:
        raise ValueError("attempt must be >= 1")
    ceiling = min(BACKOFF_CAP_S, BACKOFF_BASE_S * 2 ** (attempt - 1))
    draw = rng.uniform if rng is not None else random.uniform
    return draw(0.0, ceiling)


class RateGate:
    """Spaces launches so consecutive launch instants are >= 60/QPM apart.

    Waiters are served in arrival order; a retry that re-enters the gate
    occupies a launch slot exactly like a fresh query.
    """

    def __init__(self, rate_qpm: int):
        self.interval = launch_interval(rate_qpm)
        self._lock = asyncio.Lock()
        self._last: float | None = None

    async def wait_turn(self, stop_event: asyncio.Event | None = None) -> bool:
        """Block until this caller's launch slot. False means stop was requested."""
        async with self._lock:
            if stop_event is not None and stop_event.is_set():
                return False
            loop = asyncio.get_running_loop()
            now = loop.time()
            if self._last is not None:
                delay = self._last + self.interval - now
                if delay > 0:
                    if stop_event is None:
                        await asyncio.sleep(delay)
                    else:
                        try:
                            await asyncio.wait_for(stop_event.wait(), timeout=delay)
                            return False
                        except asyncio.TimeoutError:
                            pass
                    now = loop.time()
            self._last = now
            return True


async def send_with_retry(
    record: PromptRecord,
    adapter: QueryAdapter,
    max_attempts: int,
    timeout: float,
    *,
    gate: RateGate | None = None,
    stop_event: asyncio.Event | None = None,
    backoff_fn: Callable[[int], float] = backoff,
    sleep_fn: Callable[[float], Any] = asyncio.sleep,
    logger: logging.Logger | None = None,
) -> CompletedRecord | None:
    """Attempt a record up to max_attempts times with backoff between tries.

    Every attempt (retries included) re-enters the rate gate when one is
    given. Returns None only when a stop request arrives before the first
    launch; a stop between retries finalizes the record as an error.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    logger = logger or log
    timestamp_sent: datetime | None = None
    last_reason = ""
    for attempt in range(1, max_attempts + 1):
        if gate is not None:
            launched = await gate.wait_turn(stop_event)
            if not launched:
                if timestamp_sent is None:
                    return None
                return CompletedRecord(
                    record=record,
                    response=None,
                    error=f"interrupted before retry; last failure: {last_reason}",
                    attempts=attempt - 1,
                    timestamp_sent=timestamp_sent,
                    timestamp_completed=_now(),
                )
        if timestamp_sent is None:
            timestamp_sent = _now()
        outcome = await adapter.query(record, timeout)
        logger.debug(
            "record %s attempt %d/%d: %s (%.3fs)%s",
            record.id,
            attempt,
            max_attempts,
            outcome.kind,
            outcome.latency,
            "" if outcome.kind == "success" else f" - {outcome.reason}",
        )
        if outcome.kind == "success":
            return CompletedRecord(
                record=record,
                response=outcome.response,
                error=None,
                attempts=attempt,
                timestamp_sent=timestamp_sent,
                timestamp_completed=_now(),
            )
        last_reason = outcome.reason
        if outcome.kind == "fatal":
            return CompletedRecord(
                record=record,
                response=None,
                error=outcome.reason,
                attempts=attempt,
                timestamp_sent=timestamp_sent,
                timestamp_completed=_now(),
            )
        if attempt < max_attempts:
            await sleep_fn(backoff_fn(attempt))
    return CompletedRecord(
        record=record,
        response=None,
        error=f"max attempts exceeded: {last_reason}",
        attempts=max_attempts,
        timestamp_sent=timestamp_sent or _now(),
        timestamp_completed=_now(),
    )


@dataclass
class RunSummary:
    total: int = 0
    succeeded: int = 0
    failed: int = 0
    dropped: int = 0
    wall_time_s: float = 0.0

    @property
    def completed(self) -> int:
        return self.succeeded + self.failed


async def run_experiment(
    plan: QueuePlan,
    registry: AdapterLookup,
    settings: ExperimentSettings,
    sink: Callable[[CompletedRecord], None],
    *,
    stop_event: asyncio.Event | None = None,
    logger: logging.Logger | None = None,
    backoff_fn: Callable[[int], float] = backoff,
    sleep_fn: Callable[[float], Any] = asyncio.sleep,
) -> RunSummary:
    """Dispatch every queue concurrently; deliver each record to sink once.

    Launch instants within a queue are spaced by the queue's rate and never
    wait on earlier responses; the sink sees records in completion order.
    In synchronous mode records run one at a time, each launch waiting for
    the previous response (the speedup baseline).
    """
    logger = logger or log
    summary = RunSummary(total=plan.record_count)
    start = time.monotonic()
    logger.info(
        "run start: %d records in %d queue(s), mode=%s",
        summary.total,
        len(plan.queues),
        "sync" if settings.synchronous else "async",
    )
    for queue in plan.queues:
        logger.info(
            "queue %r: %d records at %d QPM (interval %.3fs)",
            queue.key,
            len(queue.records),
            queue.rate_qpm,
            launch_interval(queue.rate_qpm),
        )

    def deliver(completed: CompletedRecord | None) -> None:
        if completed is None:
            summary.dropped += 1
            return
        sink(completed)
        if completed.succeeded:
            summary.succeeded += 1
        else:
            summary.failed += 1

    async def run_one(record: PromptRecord, gate: RateGate | None) -> None:
        if stop_event is not None and stop_event.is_set():
            summary.dropped += 1
            return
        try:
            adapter = registry.resolve(record.api)
        except KeyError:
            now = _now()
            deliver(
                CompletedRecord(
                    record=record,
                    response=None,
                    error=f"unknown api: {record.api}",
                    attempts=1,
                    timestamp_sent=now,
                    timestamp_completed=now,
                )
            )
            return
        completed = await send_with_retry(
            record,
            adapter,
            settings.max_attempts,
            settings.request_timeout,
            gate=gate,
            stop_event=stop_event,
            backoff_fn=backoff_fn,
            sleep_fn=sleep_fn,
            logger=logger,
        )
        deliver(completed)

    if settings.synchronous:
        for queue in plan.queues:
            for record in queue.records:
                if stop_event is not None and stop_event.is_set():
                    summary.dropped += 1
                    continue
                await run_one(record, None)
    else:
        tasks: list[asyncio.Task[None]] = []
        for queue in plan.queues:
            gate = RateGate(queue.rate_qpm)
            # Tasks reach the gate in creation order, so launches within a
            # queue preserve record order.
            tasks.extend(
                asyncio.create_task(run_one(record, gate)) for record in queue.records
            )
        try:
            await asyncio.gather(*tasks)
        except BaseException:
            for task in tasks:
                task.cancel()
            raise

    summary.wall_time_s = time.monotonic() - start
    logger.info(
        "run finished: %d succeeded, %d failed, %d dropped in %.2fs",
        summary.succeeded,
        summary.failed,
        summary.dropped,
        summary.wall_time_s,
    )
    return summary


def _now() -> datetime:
    return datetime.now().astimezone()
