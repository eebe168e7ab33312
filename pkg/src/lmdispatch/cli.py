"""Command-line interface.

Subcommands:

    run-experiment   process one experiment JSONL file
    run-pipeline     watch the input folder and process files as they appear
    check            validate an experiment file without any network activity
    judge            derive a judge experiment file from a completed file
    simulate         serve the endpoint simulator from a profile JSON

Exit codes: 0 ok, 1 runtime IO failure, 2 configuration error,
3 validation issues (check only). Per-record failures during a run do
not produce a nonzero exit; they are recorded in the completed file.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import signal
import sys
from pathlib import Path

from .adapters import build_registry, load_env_file
from .errors import ConfigurationError
from .records import generate_judge_file, parse_experiment_file
from .runner import process_experiment_file, run_pipeline
from .scheduler import ExperimentSettings
from .simulator import SimulatorProfile, SimulatorServer
from .store import init_data_folder

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_VALIDATION = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmdispatch",
        description="Batch dispatcher for prompt experiments against rate-limited model endpoints.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run-experiment", help="process one experiment JSONL file")
    run.add_argument("--file", "-f", required=True, help="path to the experiment JSONL file")
    _add_run_settings(run)

    pipe = sub.add_parser("run-pipeline", help="watch the input folder for experiment files")
    _add_run_settings(pipe)
    pipe.add_argument(
        "--poll-interval",
        type=float,
        default=10.0,
        help="seconds between input folder polls (default 10)",
    )

    check = sub.add_parser("check", help="validate an experiment file (no network)")
    check.add_argument("--file", "-f", required=True, help="path to the experiment JSONL file")

    judge = sub.add_parser("judge", help="derive a judge experiment file from a completed file")
    judge.add_argument("--file", "-f", required=True, help="path to a completed JSONL file")
    judge.add_argument("--template", "-t", required=True, help="template file with {INPUT_PROMPT} and {OUTPUT_RESPONSE}")
    judge.add_argument("--judge-api", required=True, help="api name for the judge records")
    judge.add_argument("--judge-model", required=True, help="model name for the judge records")
    judge.add_argument("--out", help="output path (default: <data-folder>/input/judge-<name>.jsonl)")
    judge.add_argument("--data-folder", "-d", default="data", help="pipeline data folder (default ./data)")

    sim = sub.add_parser("simulate", help="serve the endpoint simulator")
    sim.add_argument("--profile", required=True, help="path to a simulator profile JSON file")
    sim.add_argument("--port", type=int, default=8583, help="port to listen on (default 8583)")
    sim.add_argument("--host", default="127.0.0.1", help="host to bind (default 127.0.0.1)")

    return parser


def _add_run_settings(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-folder", "-d", default="data", help="pipeline data folder (default ./data)")
    parser.add_argument("--env", "-e", default=".env", help="path to a .env credentials file (default ./.env)")
    parser.add_argument("--max-queries", "-mq", type=int, default=10, help="launch rate in queries per minute (default 10)")
    parser.add_argument("--max-attempts", "-ma", type=int, default=3, help="attempts per record before giving up (default 3)")
    parser.add_argument("--parallel", "-p", action="store_true", help="dispatch per-group/per-api queues concurrently")
    parser.add_argument(
        "--max-queries-per-queue",
        help="per-queue QPM as inline JSON or a path to a JSON file, e.g. '{\"openai\": 500}'",
    )
    parser.add_argument("--request-timeout", type=float, default=120.0, help="per-request timeout in seconds (default 120)")
    parser.add_argument("--sync", action="store_true", help="synchronous baseline mode: wait for each response before the next launch")


def _parse_rate_map(value: str | None) -> dict[str, int] | None:
    if value is None:
        return None
    text = value.strip()
    if not text.startswith("{"):
        path = Path(text)
        if not path.is_file():
            raise ConfigurationError(f"per-queue rate file not found: {path}")
        text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"per-queue rates are not valid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict) or not all(
        isinstance(k, str) and isinstance(v, int) and v >= 1 for k, v in raw.items()
    ):
        raise ConfigurationError("per-queue rates must map queue keys to integers >= 1")
    return raw


def _settings_from_args(args: argparse.Namespace) -> ExperimentSettings:
    try:
        return ExperimentSettings(
            data_folder=Path(args.data_folder),
            max_queries=args.max_queries,
            max_attempts=args.max_attempts,
            parallel=args.parallel,
            per_queue_rates=_parse_rate_map(args.max_queries_per_queue),
            request_timeout=args.request_timeout,
            env_file=Path(args.env),
            synchronous=args.sync,
        )
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def _install_stop_handler(stop_event: asyncio.Event) -> None:
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop_event.set)
        except (NotImplementedError, RuntimeError):
            pass


def cmd_run_experiment(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    experiment_file = Path(args.file)
    if not experiment_file.is_file():
        raise ConfigurationError(f"experiment file not found: {experiment_file}")
    folder = init_data_folder(settings.data_folder)
    credentials = load_env_file(settings.env_file)
    registry = build_registry(credentials)

    async def main() -> int:
        stop_event = asyncio.Event()
        _install_stop_handler(stop_event)
        try:
            summary = await process_experiment_file(
                experiment_file, folder, settings, registry, stop_event=stop_event
            )
        finally:
            await registry.aclose()
        print(
            f"completed {summary.completed}/{summary.total} records "
            f"({summary.succeeded} ok, {summary.failed} errors, "
            f"{summary.dropped} dropped) in {summary.wall_time_s:.2f}s"
        )
        return EXIT_OK

    return asyncio.run(main())


def cmd_run_pipeline(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args)
    folder = init_data_folder(settings.data_folder)
    credentials = load_env_file(settings.env_file)
    registry = build_registry(credentials)

    async def main() -> int:
        stop_event = asyncio.Event()
        _install_stop_handler(stop_event)
        try:
            await run_pipeline(
                folder,
                settings,
                registry,
                poll_interval=args.poll_interval,
                stop_event=stop_event,
            )
        finally:
            await registry.aclose()
        return EXIT_OK

    return asyncio.run(main())


def cmd_check(args: argparse.Namespace) -> int:
    path = Path(args.file)
    if not path.is_file():
        raise ConfigurationError(f"experiment file not found: {path}")
    records, report = parse_experiment_file(path)
    print(f"{report.valid_count} valid / {len(report.issues)} issues")
    for issue in report.issues:
        print(f"line {issue.line_number}: {issue.field}: {issue.message}")
    return EXIT_OK if not report.issues else EXIT_VALIDATION


def cmd_judge(args: argparse.Namespace) -> int:
    completed_path = Path(args.file)
    if not completed_path.is_file():
        raise ConfigurationError(f"completed file not found: {completed_path}")
    template_path = Path(args.template)
    if not template_path.is_file():
        raise ConfigurationError(f"template file not found: {template_path}")
    template = template_path.read_text(encoding="utf-8")
    if args.out:
        out_path = Path(args.out)
    else:
        folder = init_data_folder(Path(args.data_folder))
        name = completed_path.name.removesuffix(".jsonl")
        out_path = folder.input_dir / f"judge-{name}.jsonl"
    result = generate_judge_file(
        completed_path, template, args.judge_api, args.judge_model, out_path
    )
    print(f"wrote {result.written} judge records to {result.path} ({result.skipped} skipped)")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    profile = SimulatorProfile.from_json_file(args.profile)
    server = SimulatorServer(profile, host=args.host, port=args.port)

    async def main() -> int:
        stop_event = asyncio.Event()
        _install_stop_handler(stop_event)
        await server.start()
        print(f"simulator ({profile.protocol}) listening on {server.base_url}")
        await stop_event.wait()
        await server.stop()
        return EXIT_OK

    try:
        return asyncio.run(main())
    except OSError as exc:
        print(f"cannot bind {args.host}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_IO


COMMANDS = {
    "run-experiment": cmd_run_experiment,
    "run-pipeline": cmd_run_pipeline,
    "check": cmd_check,
    "judge": cmd_judge,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
