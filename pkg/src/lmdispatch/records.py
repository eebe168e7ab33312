"""Experiment JSONL parsing, validation, and derived-file generation.

An experiment file holds one JSON object per line. Required keys are
"prompt", "api" and "model_name"; "parameters" (object) and "group"
(string) are optional, and every other key is preserved verbatim into
the completed output line. The "prompt" value takes one of three forms:

  - a string (one user message),
  - a list of strings (a sequence of user turns in one chat), or
  - a list of {"role", "content"} objects (a conversation history).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigurationError

REQUIRED_KEYS = ("prompt", "api", "model_name")
RESERVED_KEYS = ("id", "prompt", "api", "model_name", "parameters", "group")
CHAT_ROLES = ("system", "user", "assistant")

JUDGE_PROMPT_PLACEHOLDER = "{INPUT_PROMPT}"
JUDGE_RESPONSE_PLACEHOLDER = "{OUTPUT_RESPONSE}"


class PromptFormatError(ValueError):
    """A prompt value does not match any of the three documented forms."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class SingleText:
    text: str


@dataclass(frozen=True)
class UserTurnSequence:
    turns: tuple[str, ...]


@dataclass(frozen=True)
class ChatHistory:
    messages: tuple[Message, ...]


PromptContent = SingleText | UserTurnSequence | ChatHistory


def classify_prompt_content(raw: Any) -> PromptContent:
    """Map a raw JSON prompt value onto one of the three content forms.

    Raises PromptFormatError for anything outside string / list-of-strings
    / list-of-role-content-objects, so callers can turn it into a
    line-level validation issue instead of aborting a parse.
    """
    if isinstance(raw, str):
        return SingleText(raw)
    if isinstance(raw, list):
        if not raw:
            raise PromptFormatError("prompt list is empty")
        if all(isinstance(item, str) for item in raw):
            return UserTurnSequence(tuple(raw))
        if all(isinstance(item, dict) for item in raw):
            return ChatHistory(_parse_history(raw))
        raise PromptFormatError("prompt list mixes strings and objects")
    raise PromptFormatError(f"unsupported prompt type: {type(raw).__name__}")


def _parse_history(raw: list[dict[str, Any]]) -> tuple[Message, ...]:
    messages = []
    for position, item in enumerate(raw):
        role = item.get("role")
        content = item.get("content")
        if not isinstance(role, str) or not isinstance(content, str):
            raise PromptFormatError(
                f"message {position} must have string 'role' and 'content' keys"
            )
        if role not in CHAT_ROLES:
            raise PromptFormatError(f"message {position} has unknown role {role!r}")
        if role == "system" and position != 0:
            raise PromptFormatError("system message must come first")
        if content == "" and role != "assistant":
            raise PromptFormatError(
                f"message {position} ({role}) has empty content"
            )
        messages.append(Message(role, content))
    return tuple(messages)


@dataclass
class PromptRecord:
    """One validated line of an experiment file."""

    id: str
    prompt: PromptContent
    api: str
    model_name: str
    parameters: dict[str, Any] | None = None
    group: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)
    # Original JSON prompt value, reproduced verbatim on output.
    raw_prompt: Any = None

    def prompt_payload(self) -> Any:
        if self.raw_prompt is not None:
            return self.raw_prompt
        return unparse_prompt_content(self.prompt)

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "id": self.id,
            "prompt": self.prompt_payload(),
            "api": self.api,
            "model_name": self.model_name,
        }
        if self.parameters is not None:
            payload["parameters"] = self.parameters
        if self.group is not None:
            payload["group"] = self.group
        payload.update(self.extra)
        return payload


def unparse_prompt_content(content: PromptContent) -> Any:
    if isinstance(content, SingleText):
        return content.text
    if isinstance(content, UserTurnSequence):
        return list(content.turns)
    return [{"role": m.role, "content": m.content} for m in content.messages]


@dataclass(frozen=True)
class Issue:
    line_number: int
    field: str
    message: str


@dataclass
class InvalidLine:
    line_number: int
    raw_text: str
    payload: dict[str, Any] | None
    issues: list[Issue]

    def assigned_id(self) -> str:
        if self.payload is not None and isinstance(self.payload.get("id"), (str, int)):
            return str(self.payload["id"])
        return str(self.line_number)


@dataclass
class ValidationReport:
    valid_count: int = 0
    issues: list[Issue] = field(default_factory=list)
    blank_count: int = 0
    total_lines: int = 0
    invalid_lines: list[InvalidLine] = field(default_factory=list)

    @property
    def invalid_count(self) -> int:
        return len(self.invalid_lines)


def parse_experiment_file(path: Path | str) -> tuple[list[PromptRecord], ValidationReport]:
    """Parse a JSONL experiment file into records plus a validation report.

    Line-level problems (bad JSON, missing keys, malformed prompts) become
    report issues rather than exceptions; blank lines are skipped.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_experiment_lines(text.splitlines())


def parse_experiment_lines(lines: Iterable[str]) -> tuple[list[PromptRecord], ValidationReport]:
    records: list[PromptRecord] = []
    report = ValidationReport()
    seen_ids: set[str] = set()
    for line_number, line in enumerate(lines, start=1):
        report.total_lines = line_number
        if not line.strip():
            report.blank_count += 1
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            _flag(report, line_number, line, None, [Issue(line_number, "json", f"invalid JSON: {exc.msg}")])
            continue
        if not isinstance(payload, dict):
            _flag(report, line_number, line, None, [Issue(line_number, "json", "line is not a JSON object")])
            continue
        record, issues = record_from_payload(payload, line_number)
        if record is not None and record.id in seen_ids:
            issues.append(Issue(line_number, "id", f"duplicate id {record.id!r}"))
            record = None
        if record is None:
            _flag(report, line_number, line, payload, issues)
            continue
        seen_ids.add(record.id)
        records.append(record)
        report.valid_count += 1
    return records, report


def _flag(
    report: ValidationReport,
    line_number: int,
    raw_text: str,
    payload: dict[str, Any] | None,
    issues: list[Issue],
) -> None:
    report.issues.extend(issues)
    report.invalid_lines.append(InvalidLine(line_number, raw_text, payload, issues))


def record_from_payload(
    payload: dict[str, Any], line_number: int
) -> tuple[PromptRecord | None, list[Issue]]:
    """Validate one parsed line. Returns (record, []) or (None, issues)."""
    issues: list[Issue] = []

    for key in REQUIRED_KEYS:
        if key not in payload:
            issues.append(Issue(line_number, key, "missing required key"))
        elif payload[key] in ("", [], None):
            issues.append(Issue(line_number, key, "required key is empty"))

    for key in ("api", "model_name"):
        if key in payload and payload[key] not in ("", None) and not isinstance(payload[key], str):
            issues.append(Issue(line_number, key, "must be a string"))

    content: PromptContent | None = None
    if not any(issue.field == "prompt" for issue in issues):
        try:
            content = classify_prompt_content(payload["prompt"])
        except PromptFormatError as exc:
            issues.append(Issue(line_number, "prompt", str(exc)))

    parameters = payload.get("parameters")
    if parameters is not None and not isinstance(parameters, dict):
        issues.append(Issue(line_number, "parameters", "must be an object"))

    group = payload.get("group")
    if group is not None and not isinstance(group, str):
        issues.append(Issue(line_number, "group", "must be a string"))

    record_id: str | None = None
    if "id" in payload:
        if isinstance(payload["id"], (str, int)):
            record_id = str(payload["id"])
        else:
            issues.append(Issue(line_number, "id", "must be a string"))
    else:
        record_id = str(line_number)

    if issues:
        return None, issues

    assert content is not None and record_id is not None
    extra = {k: v for k, v in payload.items() if k not in RESERVED_KEYS}
    return (
        PromptRecord(
            id=record_id,
            prompt=content,
            api=payload["api"],
            model_name=payload["model_name"],
            parameters=parameters,
            group=group,
            extra=extra,
            raw_prompt=payload["prompt"],
        ),
        [],
    )


@dataclass
class CompletedRecord:
    """A prompt record plus its terminal outcome and timing metadata."""

    record: PromptRecord
    response: Any | None
    error: str | None
    attempts: int
    timestamp_sent: datetime
    timestamp_completed: datetime

    def __post_init__(self) -> None:
        if (self.response is None) == (self.error is None):
            raise ValueError("exactly one of response/error must be set")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")
        if self.timestamp_completed < self.timestamp_sent:
            raise ValueError("timestamp_completed precedes timestamp_sent")

    @property
    def succeeded(self) -> bool:
        return self.error is None


def serialize_completed_record(completed: CompletedRecord) -> str:
    """Render a completed record as one JSONL line (no trailing newline).

    All original input keys come first, then the outcome and timing keys.
    An error record carries "error" and no "response" key.
    """
    payload = completed.record.to_payload()
    if completed.error is None:
        payload["response"] = completed.response
    else:
        payload["error"] = completed.error
    payload["timestamp_sent"] = completed.timestamp_sent.isoformat()
    payload["timestamp_completed"] = completed.timestamp_completed.isoformat()
    payload["attempts"] = completed.attempts
    return json.dumps(payload, ensure_ascii=False)


def invalid_line_payload(invalid: InvalidLine) -> dict[str, Any]:
    """Completed-file payload for a line that failed validation.

    Keeps the original keys when the line parsed as an object so the
    completed file still has one line per non-blank input line.
    """
    if invalid.payload is not None:
        payload = dict(invalid.payload)
    else:
        payload = {"raw": invalid.raw_text}
    payload["id"] = invalid.assigned_id()
    detail = "; ".join(f"{issue.field}: {issue.message}" for issue in invalid.issues)
    payload["error"] = f"validation: {detail}"
    return payload


@dataclass(frozen=True)
class JudgeFileResult:
    path: Path
    written: int
    skipped: int


def generate_judge_file(
    completed_path: Path | str,
    judge_template: str,
    judge_api: str,
    judge_model: str,
    out_path: Path | str,
) -> JudgeFileResult:
    """Turn a completed file into a new experiment file of judge prompts.

    Every completed record with a "response" yields one judge record whose
    prompt is the template with {INPUT_PROMPT} and {OUTPUT_RESPONSE}
    substituted; the original record is embedded under "input". Records
    without a response (error records) are skipped and counted.
    """
    for placeholder in (JUDGE_PROMPT_PLACEHOLDER, JUDGE_RESPONSE_PLACEHOLDER):
        if placeholder not in judge_template:
            raise ConfigurationError(f"judge template is missing {placeholder}")

    lines = Path(completed_path).read_text(encoding="utf-8").splitlines()
    written = 0
    skipped = 0
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as handle:
        for line_number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(
                    f"completed file line {line_number} is not valid JSON: {exc.msg}"
                ) from exc
            if not isinstance(payload, dict) or "response" not in payload:
                skipped += 1
                continue
            prompt_text = _as_template_text(payload.get("prompt"))
            response_text = _as_template_text(payload["response"])
            judge_prompt = judge_template.replace(
                JUDGE_PROMPT_PLACEHOLDER, prompt_text
            ).replace(JUDGE_RESPONSE_PLACEHOLDER, response_text)
            judge_record = {
                "id": f"judge-{payload.get('id', line_number)}",
                "prompt": judge_prompt,
                "api": judge_api,
                "model_name": judge_model,
                "input": payload,
            }
            handle.write(json.dumps(judge_record, ensure_ascii=False) + "\n")
            written += 1
    return JudgeFileResult(path=out, written=written, skipped=skipped)


def _as_template_text(value: Any) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False)
