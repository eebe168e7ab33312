"""Asynchronous batch dispatcher for prompt experiments.

Reads prompt experiments from JSONL files, dispatches them to model
endpoints under per-queue rate limits with bounded retries, and persists
timestamped results in a pipeline data folder. Ships with an offline
endpoint simulator for deterministic testing.
"""

from .adapters import (
    AdapterRegistry,
    CredentialStore,
    EndpointAdapter,
    OllamaChatAdapter,
    OpenAIChatAdapter,
    SimulatorChatAdapter,
    build_registry,
    load_env_file,
)
from .errors import ConfigurationError
from .records import (
    ChatHistory,
    CompletedRecord,
    Message,
    PromptRecord,
    SingleText,
    UserTurnSequence,
    ValidationReport,
    classify_prompt_content,
    generate_judge_file,
    parse_experiment_file,
    serialize_completed_record,
)
from .runner import process_experiment_file, run_pipeline
from .scheduler import (
    AttemptOutcome,
    DispatchQueue,
    ExperimentSettings,
    QueuePlan,
    RateGate,
    RunSummary,
    backoff,
    launch_interval,
    plan_queues,
    run_experiment,
    send_with_retry,
)
from .simulator import SimulatorProfile, SimulatorServer
from .store import DataFolder, RunArtifacts, begin_run, init_data_folder, watch_input

__version__ = "0.1.0"

__all__ = [
    "AdapterRegistry",
    "AttemptOutcome",
    "ChatHistory",
    "CompletedRecord",
    "ConfigurationError",
    "CredentialStore",
    "DataFolder",
    "DispatchQueue",
    "EndpointAdapter",
    "ExperimentSettings",
    "Message",
    "OllamaChatAdapter",
    "OpenAIChatAdapter",
    "PromptRecord",
    "QueuePlan",
    "RateGate",
    "RunArtifacts",
    "RunSummary",
    "SimulatorChatAdapter",
    "SimulatorProfile",
    "SimulatorServer",
    "SingleText",
    "UserTurnSequence",
    "ValidationReport",
    "backoff",
    "begin_run",
    "build_registry",
    "classify_prompt_content",
    "generate_judge_file",
    "init_data_folder",
    "launch_interval",
    "load_env_file",
    "parse_experiment_file",
    "plan_queues",
    "process_experiment_file",
    "run_experiment",
    "run_pipeline",
    "send_with_retry",
    "serialize_completed_record",
    "watch_input",
]
