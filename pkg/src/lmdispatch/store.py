"""Pipeline data folder lifecycle: layout, run artifacts, and the watcher.

Layout:

    <root>/
      input/    experiment JSONL files waiting to run
      output/   one folder per experiment name holding timestamped
                <TS>-input-<name>.jsonl / <TS>-completed-<name>.jsonl /
                <TS>-log-<name>.txt triples
      media/    input media files (created, not read)

Starting a run claims the experiment file by moving it out of input/, so
each file is processed exactly once even under a polling watcher.
"""

from __future__ import annotations

import asyncio
import logging
import os
import shutil
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Awaitable, Callable

from .errors import ConfigurationError
from .records import CompletedRecord, serialize_completed_record

log = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y%m%d-%H%M%S"
LOG_LINE_FORMAT = "%(asctime)s %(levelname)s %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%dT%H:%M:%S"


@dataclass(frozen=True)
class DataFolder:
    root: Path

    @property
    def input_dir(self) -> Path:
        return self.root / "input"

    @property
    def output_dir(self) -> Path:
        return self.root / "output"

    @property
    def media_dir(self) -> Path:
        return self.root / "media"


def init_data_folder(root: Path | str) -> DataFolder:
    """Create (idempotently) the input/output/media layout under root."""
    root = Path(root)
    if root.exists() and not root.is_dir():
        raise ConfigurationError(f"data folder path {root} exists and is not a directory")
    folder = DataFolder(root=root)
    try:
        for sub in (folder.input_dir, folder.output_dir, folder.media_dir):
            sub.mkdir(parents=True, exist_ok=True)
    except PermissionError as exc:
        raise ConfigurationError(f"cannot create data folder {root}: {exc}") from exc
    return folder


class RunArtifacts:
    """Open file set for one experiment run; one writer, serialized appends."""

    def __init__(
        self,
        experiment_name: str,
        run_timestamp: datetime,
        stamp: str,
        input_copy_path: Path,
        completed_path: Path,
        log_path: Path,
    ):
        self.experiment_name = experiment_name
        self.run_timestamp = run_timestamp
        self.stamp = stamp
        self.input_copy_path = input_copy_path
        self.completed_path = completed_path
        self.log_path = log_path
        self._write_lock = threading.Lock()
        # Binary append fd; each record is written with a single os.write so
        # a crash can never leave a torn line.
        self._completed_fd: int | None = os.open(
            completed_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644
        )
        self.appended_count = 0
        self.logger = logging.getLogger(f"lmdispatch.run.{experiment_name}.{stamp}")
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = True
        self._log_handler = logging.FileHandler(log_path, encoding="utf-8")
        self._log_handler.setFormatter(
            logging.Formatter(LOG_LINE_FORMAT, datefmt=LOG_DATE_FORMAT)
        )
        self._log_handler.setLevel(logging.DEBUG)
        self.logger.addHandler(self._log_handler)

    def append_completed(self, record: CompletedRecord) -> None:
        self.append_payload_line(serialize_completed_record(record))

    def append_payload_line(self, line: str) -> None:
        if self._completed_fd is None:
            raise RuntimeError("run artifacts already closed")
        data = (line + "\n").encode("utf-8")
        with self._write_lock:
            os.write(self._completed_fd, data)
            self.appended_count += 1

    def close(self) -> None:
        if self._completed_fd is not None:
            os.close(self._completed_fd)
            self._completed_fd = None
        self.logger.removeHandler(self._log_handler)
        self._log_handler.close()


def begin_run(
    folder: DataFolder,
    experiment_file: Path | str,
    now: datetime | None = None,
) -> RunArtifacts:
    """Claim an experiment file and open its timestamped artifact triple.

    Files inside input/ are moved (the claim that makes reprocessing
    impossible); files given by explicit path elsewhere are copied. A
    timestamp collision within the same second gets a "-2", "-3" suffix.
    """
    experiment_file = Path(experiment_file)
    if not experiment_file.is_file():
        raise FileNotFoundError(experiment_file)
    name = experiment_file.name.removesuffix(".jsonl")
    if "/" in name or os.sep in name:
        raise ConfigurationError(f"experiment name {name!r} contains path separators")
    run_timestamp = now or datetime.now()
    base_stamp = run_timestamp.strftime(TIMESTAMP_FORMAT)

    out_dir = folder.output_dir / name
    out_dir.mkdir(parents=True, exist_ok=True)

    stamp = base_stamp
    suffix = 2
    while any(out_dir.joinpath(p).exists() for p in _artifact_names(stamp, name)):
        stamp = f"{base_stamp}-{suffix}"
        suffix += 1
    input_name, completed_name, log_name = _artifact_names(stamp, name)
    input_copy_path = out_dir / input_name

    inside_input = experiment_file.resolve().parent == folder.input_dir.resolve()
    if inside_input:
        shutil.move(str(experiment_file), input_copy_path)
    else:
        shutil.copy2(experiment_file, input_copy_path)

    return RunArtifacts(
        experiment_name=name,
        run_timestamp=run_timestamp,
        stamp=stamp,
        input_copy_path=input_copy_path,
        completed_path=out_dir / completed_name,
        log_path=out_dir / log_name,
    )


def _artifact_names(stamp: str, name: str) -> tuple[str, str, str]:
    return (
        f"{stamp}-input-{name}.jsonl",
        f"{stamp}-completed-{name}.jsonl",
        f"{stamp}-log-{name}.txt",
    )


async def watch_input(
    folder: DataFolder,
    *,
    process: Callable[[Path], Awaitable[Any]],
    poll_interval: float = 10.0,
    stop_event: asyncio.Event | None = None,
    logger: logging.Logger | None = None,
) -> None:
    """Poll input/ for *.jsonl files and process them one at a time.

    Each poll's batch runs in ascending last-modified order; files dropped
    mid-batch are picked up on the next poll. A failing experiment is
    logged and does not stop the watcher. Runs until stop_event is set.
    """
    logger = logger or log
    stop_event = stop_event or asyncio.Event()
    logger.info("watching %s every %.1fs", folder.input_dir, poll_interval)
    while not stop_event.is_set():
        pending = sorted(
            folder.input_dir.glob("*.jsonl"),
            key=lambda p: (p.stat().st_mtime, p.name),
        )
        for path in pending:
            if stop_event.is_set():
                break
            try:
                await process(path)
            except Exception:
                logger.exception("experiment %s failed; continuing", path.name)
        if stop_event.is_set():
            break
        try:
            await asyncio.wait_for(stop_event.wait(), timeout=poll_interval)
        except asyncio.TimeoutError:
            pass
    logger.info("watcher stopped")
