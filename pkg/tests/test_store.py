"""Data folder lifecycle, artifact naming, append durability, and the watcher."""

from __future__ import annotations

import asyncio
import json
import os
import re
import subprocess
import sys
import time
from datetime import datetime
from pathlib import Path

import pytest

from lmdispatch import ConfigurationError, begin_run, init_data_folder, watch_input
from lmdispatch.store import _artifact_names

from helpers import make_record, write_experiment, simple_payloads
from test_records import _complete

STAMP_RE = re.compile(r"^\d{8}-\d{6}(-\d+)?$")


def _experiment(folder, name="exp_1", n=3):
    return write_experiment(folder.input_dir / f"{name}.jsonl", simple_payloads(n))


# init_data_folder -----------------------------------------------------------


def test_init_creates_three_subfolders(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    assert folder.input_dir.is_dir()
    assert folder.output_dir.is_dir()
    assert folder.media_dir.is_dir()


def test_init_is_idempotent(tmp_path):
    init_data_folder(tmp_path / "data")
    marker = tmp_path / "data" / "input" / "keep.jsonl"
    marker.write_text("{}")
    folder = init_data_folder(tmp_path / "data")
    assert marker.exists()
    assert folder.root == tmp_path / "data"


def test_init_rejects_regular_file_root(tmp_path):
    target = tmp_path / "data"
    target.write_text("i am a file")
    with pytest.raises(ConfigurationError):
        init_data_folder(target)


# begin_run -------------------------------------------------------------------


def test_begin_run_layout_and_naming(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    exp = _experiment(folder)
    artifacts = begin_run(folder, exp, now=datetime(2024, 6, 1, 12, 0, 0))
    try:
        out_dir = folder.output_dir / "exp_1"
        assert artifacts.input_copy_path == out_dir / "20240601-120000-input-exp_1.jsonl"
        assert artifacts.completed_path == out_dir / "20240601-120000-completed-exp_1.jsonl"
        assert artifacts.log_path == out_dir / "20240601-120000-log-exp_1.txt"
        assert artifacts.input_copy_path.is_file()
        assert artifacts.completed_path.is_file()
        assert artifacts.log_path.is_file()
        assert not exp.exists()  # moved out of input/
    finally:
        artifacts.close()


def test_begin_run_same_second_collision_gets_suffix(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    now = datetime(2024, 6, 1, 12, 0, 0)
    first = begin_run(folder, _experiment(folder), now=now)
    second = begin_run(folder, _experiment(folder), now=now)
    third = begin_run(folder, _experiment(folder), now=now)
    try:
        assert first.stamp == "20240601-120000"
        assert second.stamp == "20240601-120000-2"
        assert third.stamp == "20240601-120000-3"
        names = {p.name for p in (folder.output_dir / "exp_1").iterdir()}
        assert len(names) == 9
    finally:
        for artifacts in (first, second, third):
            artifacts.close()


def test_begin_run_twice_leaves_first_run_untouched(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    first = begin_run(folder, _experiment(folder))
    first.append_completed(_complete(make_record(), response="one"))
    first.close()
    before = first.completed_path.read_bytes()

    time.sleep(1.05)  # ensure a distinct timestamp second
    second = begin_run(folder, _experiment(folder))
    second.append_completed(_complete(make_record(), response="two"))
    second.close()

    assert first.completed_path.read_bytes() == before
    assert second.completed_path != first.completed_path


def test_begin_run_outside_input_dir_copies_instead_of_moving(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    outside = write_experiment(tmp_path / "elsewhere.jsonl", simple_payloads(2))
    artifacts = begin_run(folder, outside)
    try:
        assert outside.exists()  # original untouched
        assert artifacts.input_copy_path.read_text() == outside.read_text()
    finally:
        artifacts.close()


def test_begin_run_missing_file(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    with pytest.raises(FileNotFoundError):
        begin_run(folder, folder.input_dir / "ghost.jsonl")


def test_artifact_names_share_stamp_prefix():
    names = _artifact_names("20240601-120000", "exp_1")
    assert all(n.startswith("20240601-120000-") for n in names)


# append_completed ----------------------------------------------------------------


def test_append_count_and_flush(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    artifacts = begin_run(folder, _experiment(folder))
    for i in range(100):
        artifacts.append_completed(_complete(make_record(str(i)), response=f"r{i}"))
    # visible before close: appends flush immediately
    lines = artifacts.completed_path.read_text().splitlines()
    assert len(lines) == 100
    artifacts.close()
    assert all(json.loads(line)["response"].startswith("r") for line in lines)


def test_zero_record_run_leaves_empty_completed_file(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    artifacts = begin_run(folder, _experiment(folder, n=0))
    artifacts.close()
    assert artifacts.completed_path.read_text() == ""


def test_append_after_close_raises(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    artifacts = begin_run(folder, _experiment(folder))
    artifacts.close()
    with pytest.raises(RuntimeError):
        artifacts.append_completed(_complete(make_record(), response="x"))


KILL_WRITER = """
import sys, time
from datetime import datetime
from pathlib import Path
from lmdispatch import begin_run, init_data_folder
from lmdispatch.records import CompletedRecord, PromptRecord, classify_prompt_content

folder = init_data_folder(Path(sys.argv[1]))
exp = folder.input_dir / "kill.jsonl"
exp.write_text('{"prompt": "p", "api": "simulator", "model_name": "m"}\\n')
artifacts = begin_run(folder, exp)
now = datetime.now().astimezone()
record = PromptRecord(id="1", prompt=classify_prompt_content("p" * 512), api="simulator", model_name="m")
print("READY", flush=True)
while True:
    artifacts.append_completed(
        CompletedRecord(record=record, response="x" * 2048, error=None, attempts=1,
                        timestamp_sent=now, timestamp_completed=now)
    )
"""


def test_kill_mid_append_leaves_no_torn_line(tmp_path):
    # SIGKILL a writer that appends as fast as it can; every line already in
    # the file must parse as JSON.
    proc = subprocess.Popen(
        [sys.executable, "-c", KILL_WRITER, str(tmp_path / "data")],
        stdout=subprocess.PIPE,
    )
    assert proc.stdout is not None
    assert proc.stdout.readline().strip() == b"READY"
    time.sleep(0.4)
    proc.kill()
    proc.wait(timeout=10)

    completed = next((tmp_path / "data" / "output" / "kill").glob("*-completed-*.jsonl"))
    lines = completed.read_bytes().split(b"\n")
    assert lines[-1] == b""  # file ends on a record boundary
    parsed = [json.loads(line) for line in lines[:-1]]
    assert len(parsed) > 10
    assert all(p["response"] == "x" * 2048 for p in parsed)


# watcher ---------------------------------------------------------------------------


def test_watcher_processes_files_in_mtime_order(tmp_path):
    folder = init_data_folder(tmp_path / "data")
    late = write_experiment(folder.input_dir / "late.jsonl", simple_payloads(1))
    early = write_experiment(folder.input_dir / "early.jsonl", simple_payloads(1))
    now = time.time()
    os.utime(late, (now, now))
    os.utime(early, (now - 100, now - 100))  # older mtime despite later creation

    processed: list[str] = []

    async def scenario():
        stop = asyncio.Event()

        async def process(path: Path):
            processed.append(path.name)
            path.unlink()  # claim, as the real runner's move does
            if len(processed) == 2:
                stop.set()

        await watch_input(folder, process=process, poll_interval=0.05, stop_event=stop)

    asyncio.run(scenario())
    assert processed == ["early.jsonl", "late.jsonl"]


def test_watcher_survives_failing_experiment(tmp_path, caplog):
    folder = init_data_folder(tmp_path / "data")
    write_experiment(folder.input_dir / "a_bad.jsonl", simple_payloads(1))
    write_experiment(folder.input_dir / "b_good.jsonl", simple_payloads(1))

    processed: list[str] = []

    async def scenario():
        stop = asyncio.Event()

        async def process(path: Path):
            if "bad" in path.name:
                path.unlink()
                raise RuntimeError("boom")
            processed.append(path.name)
            path.unlink()
            stop.set()

        await watch_input(folder, process=process, poll_interval=0.05, stop_event=stop)

    asyncio.run(scenario())
    assert processed == ["b_good.jsonl"]


def test_watcher_idles_on_empty_folder_until_stopped(tmp_path):
    folder = init_data_folder(tmp_path / "data")

    async def scenario():
        stop = asyncio.Event()
        calls = []

        async def process(path: Path):
            calls.append(path)

        task = asyncio.create_task(
            watch_input(folder, process=process, poll_interval=0.05, stop_event=stop)
        )
        await asyncio.sleep(0.3)
        stop.set()
        await asyncio.wait_for(task, timeout=2)
        return calls

    assert asyncio.run(scenario()) == []


def test_watcher_picks_up_file_dropped_after_start(tmp_path):
    folder = init_data_folder(tmp_path / "data")

    async def scenario():
        stop = asyncio.Event()
        processed = []

        async def process(path: Path):
            processed.append(path.name)
            path.unlink()
            stop.set()

        task = asyncio.create_task(
            watch_input(folder, process=process, poll_interval=0.05, stop_event=stop)
        )
        await asyncio.sleep(0.15)  # watcher already polling an empty folder
        write_experiment(folder.input_dir / "later.jsonl", simple_payloads(1))
        await asyncio.wait_for(task, timeout=5)
        return processed

    assert asyncio.run(scenario()) == ["later.jsonl"]
