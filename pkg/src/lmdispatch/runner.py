"""End-to-end processing of one experiment file.

Ties the parser, queue planner, scheduler, and data folder together:
parse, claim the file into the output folder, write validation failures
as error lines, dispatch the valid records, and append completions as
they arrive. The completed file always ends up with one line per
non-blank input line.
"""

from __future__ import annotations

import asyncio
import json
import logging
from pathlib import Path

from .adapters import AdapterRegistry
from .records import invalid_line_payload, parse_experiment_file
from .scheduler import ExperimentSettings, RunSummary, plan_queues, run_experiment
from .store import DataFolder, begin_run, watch_input

log = logging.getLogger(__name__)


async def process_experiment_file(
    experiment_file: Path | str,
    folder: DataFolder,
    settings: ExperimentSettings,
    registry: AdapterRegistry,
    *,
    stop_event: asyncio.Event | None = None,
) -> RunSummary:
    """Run one experiment file end to end and return the scheduler summary."""
    experiment_file = Path(experiment_file)
    records, report = parse_experiment_file(experiment_file)
    artifacts = begin_run(folder, experiment_file)
    try:
        artifacts.logger.info(
            "experiment %s: %d valid records, %d invalid lines, %d blank of %d total",
            artifacts.experiment_name,
            report.valid_count,
            report.invalid_count,
            report.blank_count,
            report.total_lines,
        )
        for invalid in report.invalid_lines:
            artifacts.logger.warning(
                "line %d invalid: %s",
                invalid.line_number,
                "; ".join(f"{i.field}: {i.message}" for i in invalid.issues),
            )
            artifacts.append_payload_line(
                json.dumps(invalid_line_payload(invalid), ensure_ascii=False)
            )
        plan = plan_queues(records, settings)
        summary = await run_experiment(
            plan,
            registry,
            settings,
            sink=artifacts.append_completed,
            stop_event=stop_event,
            logger=artifacts.logger,
        )
        artifacts.logger.info(
            "artifacts: %s / %s / %s",
            artifacts.input_copy_path.name,
            artifacts.completed_path.name,
            artifacts.log_path.name,
        )
        return summary
    finally:
        artifacts.close()


async def run_pipeline(
    folder: DataFolder,
    settings: ExperimentSettings,
    registry: AdapterRegistry,
    *,
    poll_interval: float = 10.0,
    stop_event: asyncio.Event | None = None,
) -> None:
    """Continuously drain the input folder, one experiment at a time."""

    async def process(path: Path) -> None:
        await process_experiment_file(
            path, folder, settings, registry, stop_event=stop_event
        )

    await watch_input(
        folder,
        process=process,
        poll_interval=poll_interval,
        stop_event=stop_event,
        logger=log,
    )
