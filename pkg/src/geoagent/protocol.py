"""Model-facing protocol: ``<think>``, ``<tool_call>`` and ``<answer>`` blocks.

:func:`parse_model_output` never raises. Anything that is not exactly one
well-formed action comes back as :class:`Malformed` with a reason code, since
the agent loop has to count bad calls rather than crash on them.

Trajectories are logged one JSON object per line; image observations are
stored as paths to content-addressed files, never inline.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Union

from .prompts import render_system_prompt

__all__ = [
    "ZOOM_TOOL",
    "SEARCH_TOOL",
    "TOOL_NAMES",
    "ToolInvocation",
    "FinalAnswer",
    "Malformed",
    "ProtocolMessage",
    "parse_model_output",
    "render_system_prompt",
    "render_tool_call",
    "render_answer",
    "Observation",
    "Turn",
    "Trajectory",
    "TrajectoryError",
    "serialize_trajectory",
    "deserialize_trajectory",
    "read_trajectories",
]

ZOOM_TOOL = "image_zoom_in_tool"
SEARCH_TOOL = "search_web"
TOOL_NAMES = (ZOOM_TOOL, SEARCH_TOOL)
_ARGUMENT_KEYS = {ZOOM_TOOL: "bbox_2d", SEARCH_TOOL: "query"}

# Malformed reason codes.
UNCLOSED_TAG = "unclosed tag"
INCOMPLETE_JSON = "incomplete json tool-call"
INVALID_JSON = "invalid json tool-call"
INVALID_SCHEMA = "invalid tool-call schema"
UNKNOWN_TOOL = "unknown tool name"
BAD_ARITY = "wrong argument arity"
BAD_ARGUMENT = "invalid argument value"
EMPTY_ANSWER = "empty answer"
NO_ACTION = "no tool call or answer"

MALFORMED_REASONS = (
    UNCLOSED_TAG,
    INCOMPLETE_JSON,
    INVALID_JSON,
    INVALID_SCHEMA,
    UNKNOWN_TOOL,
    BAD_ARITY,
    BAD_ARGUMENT,
    EMPTY_ANSWER,
    NO_ACTION,
)

WARN_EXTRA_TOOL_CALLS = "extra tool calls ignored"
WARN_TOOL_CALL_WITH_ANSWER = "tool call ignored because an answer is present"
WARN_EXTRA_ANSWERS = "extra answer blocks ignored"


@dataclass(frozen=True)
class ToolInvocation:
    name: str
    bbox: tuple[int, int, int, int] | None = None
    query: str | None = None

    def __post_init__(self) -> None:
        if self.name == ZOOM_TOOL:
            if self.bbox is None or self.query is not None:
                raise ValueError("image_zoom_in_tool takes a bbox and no query")
            if len(self.bbox) != 4:
                raise ValueError("bbox must have four coordinates")
            object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        elif self.name == SEARCH_TOOL:
            if self.query is None or self.bbox is not None:
                raise ValueError("search_web takes a query and no bbox")
            if not self.query.strip():
                raise ValueError("search query must be non-empty")
        else:
            raise ValueError(f"unknown tool {self.name!r}")

    @property
    def arguments(self) -> dict:
        if self.name == ZOOM_TOOL:
            return {"bbox_2d": list(self.bbox)}
        return {"query": self.query}

    def to_dict(self) -> dict:
        return {"name": self.name, "arguments": self.arguments}

    @classmethod
    def from_dict(cls, data: dict) -> "ToolInvocation":
        args = data["arguments"]
        if data["name"] == ZOOM_TOOL:
            return cls(ZOOM_TOOL, bbox=tuple(args["bbox_2d"]))
        return cls(data["name"], query=args["query"])


@dataclass(frozen=True)
class FinalAnswer:
    text: str


@dataclass(frozen=True)
class Malformed:
    reason: str
    raw: str
    # Set when the output attempted a tool call; those count as failed calls.
    tool_call_attempted: bool = False
    # The tool name, when it could be read from the broken call.
    tool_name: str | None = None


Payload = Union[ToolInvocation, FinalAnswer, Malformed]


@dataclass(frozen=True)
class ProtocolMessage:
    think: str | None
    payload: Payload
    warnings: tuple[str, ...] = ()

    @property
    def invocation(self) -> ToolInvocation | None:
        return self.payload if isinstance(self.payload, ToolInvocation) else None

    @property
    def answer(self) -> str | None:
        return self.payload.text if isinstance(self.payload, FinalAnswer) else None

    @property
    def malformed(self) -> Malformed | None:
        return self.payload if isinstance(self.payload, Malformed) else None


_TAG_RE = {
    tag: (re.compile(rf"<{tag}>"), re.compile(rf"</{tag}>"))
    for tag in ("think", "tool_call", "answer")
}


def _blocks(text: str, tag: str) -> tuple[list[str], bool]:
    """Inner texts of every ``<tag>...</tag>`` block, plus whether one is left open."""
    open_re, close_re = _TAG_RE[tag]
    inner, pos = [], 0
    while True:
        m = open_re.search(text, pos)
        if m is None:
            return inner, False
        c = close_re.search(text, m.end())
        if c is None:
            inner.append(text[m.end():])
            return inner, True
        inner.append(text[m.end():c.start()])
        pos = c.end()


def _malformed(reason: str, raw: str, think: str | None, *, attempted: bool = False,
               tool: str | None = None, warnings: Iterable[str] = ()) -> ProtocolMessage:
    return ProtocolMessage(think, Malformed(reason, raw, attempted, tool), tuple(warnings))


def _as_int(value: Any) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return None


def _parse_tool_call(body: str, raw: str, think: str | None, warnings: list[str]) -> ProtocolMessage:
    body = body.strip()
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        truncated = not body or exc.pos >= len(body) or exc.msg.startswith("Unterminated")
        reason = INCOMPLETE_JSON if truncated else INVALID_JSON
        name = re.search(r'"name"\s*:\s*"([^"]*)"', body)
        return _malformed(reason, raw, think, attempted=True,
                          tool=name.group(1) if name else None, warnings=warnings)
    if not isinstance(data, dict) or not isinstance(data.get("name"), str):
        return _malformed(INVALID_SCHEMA, raw, think, attempted=True, warnings=warnings)
    name = data["name"]
    if name not in TOOL_NAMES:
        return _malformed(UNKNOWN_TOOL, raw, think, attempted=True, tool=name, warnings=warnings)
    args = data.get("arguments")
    if isinstance(args, str):
        # some models double-encode the arguments object
        try:
            args = json.loads(args)
        except json.JSONDecodeError:
            return _malformed(INVALID_SCHEMA, raw, think, attempted=True, tool=name, warnings=warnings)
    if not isinstance(args, dict) or set(data) - {"name", "arguments"}:
        return _malformed(INVALID_SCHEMA, raw, think, attempted=True, tool=name, warnings=warnings)
    if set(args) != {_ARGUMENT_KEYS[name]}:
        return _malformed(BAD_ARITY, raw, think, attempted=True, tool=name, warnings=warnings)

    if name == ZOOM_TOOL:
        bbox = args["bbox_2d"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            return _malformed(BAD_ARITY, raw, think, attempted=True, tool=name, warnings=warnings)
        coords = [_as_int(v) for v in bbox]
        if any(c is None for c in coords):
            return _malformed(BAD_ARGUMENT, raw, think, attempted=True, tool=name, warnings=warnings)
        invocation = ToolInvocation(ZOOM_TOOL, bbox=tuple(coords))
    else:
        query = args["query"]
        if not isinstance(query, str) or not query.strip():
            return _malformed(BAD_ARGUMENT, raw, think, attempted=True, tool=name, warnings=warnings)
        invocation = ToolInvocation(SEARCH_TOOL, query=query)
    return ProtocolMessage(think, invocation, tuple(warnings))


def parse_model_output(raw: str) -> ProtocolMessage:
    """Parse one complete assistant turn.

    The think block is taken verbatim. Tags inside it are not actions. When a
    turn holds both an answer and a tool call the answer wins; with several
    tool calls only the first counts. Both cases leave a warning.
    """
    if not isinstance(raw, str):
        return _malformed(INVALID_SCHEMA, repr(raw), None)

    think = None
    rest = raw
    thinks, think_open = _blocks(raw, "think")
    if thinks:
        think = thinks[0]
        if think_open:
            return _malformed(UNCLOSED_TAG, raw, think)
        # actions are only looked for outside the reasoning block
        m = _TAG_RE["think"][0].search(raw)
        c = _TAG_RE["think"][1].search(raw, m.end())
        rest = raw[:m.start()] + " " + raw[c.end():]

    warnings: list[str] = []
    answers, answer_open = _blocks(rest, "answer")
    calls, call_open = _blocks(rest, "tool_call")

    if answers:
        if answer_open and len(answers) == 1:
            return _malformed(UNCLOSED_TAG, raw, think)
        if calls:
            warnings.append(WARN_TOOL_CALL_WITH_ANSWER)
        if len(answers) > 1:
            warnings.append(WARN_EXTRA_ANSWERS)
        text = answers[0].strip()
        if not text:
            return _malformed(EMPTY_ANSWER, raw, think, warnings=warnings)
        return ProtocolMessage(think, FinalAnswer(text), tuple(warnings))

    if calls:
        if len(calls) > 1:
            warnings.append(WARN_EXTRA_TOOL_CALLS)
        body = calls[0]
        if call_open and len(calls) == 1:
            try:
                json.loads(body.strip())
            except json.JSONDecodeError:
                return _parse_tool_call(body, raw, think, warnings)
            return _malformed(UNCLOSED_TAG, raw, think, attempted=True, warnings=warnings)
        return _parse_tool_call(body, raw, think, warnings)

    return _malformed(NO_ACTION, raw, think)


def render_tool_call(invocation: ToolInvocation, think: str | None = None) -> str:
    call = json.dumps(invocation.to_dict(), ensure_ascii=False)
    prefix = f"<think>{think}</think>\n" if think is not None else ""
    return f"{prefix}<tool_call>\n{call}\n</tool_call>"


def render_answer(answer: str, think: str | None = None) -> str:
    prefix = f"<think>{think}</think>\n" if think is not None else ""
    return f"{prefix}<answer>{answer}</answer>"


# ---------------------------------------------------------------------------
# Trajectory records


TERMINATIONS = ("answered", "turn_cap", "context_cap", "protocol_error")
OBSERVATION_KINDS = ("image", "text", "error")


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    """What the environment returned for one action.

    ``image_path`` is relative to the trajectory log's directory.
    """

    kind: str
    text: str | None = None
    image_path: str | None = None
    width: int | None = None
    height: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in OBSERVATION_KINDS:
            raise TrajectoryError(f"unknown observation kind {self.kind!r}")
        if self.kind == "image" and not self.image_path:
            raise TrajectoryError("image observation without a stored file reference")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        for key in ("text", "image_path", "width", "height"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Observation":
        return cls(**data)


@dataclass(frozen=True)
class Turn:
    """One policy step: raw output, its parse, and the resulting observation."""

    raw: str
    think: str | None = None
    action: ToolInvocation | None = None
    answer: str | None = None
    error: str | None = None
    observation: Observation | None = None
    forced: bool = False
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"raw": self.raw, "think": self.think}
        out["action"] = self.action.to_dict() if self.action else None
        out["answer"] = self.answer
        out["error"] = self.error
        out["observation"] = self.observation.to_dict() if self.observation else None
        out["forced"] = self.forced
        out["warnings"] = list(self.warnings)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Turn":
        return cls(
            raw=data["raw"],
            think=data.get("think"),
            action=ToolInvocation.from_dict(data["action"]) if data.get("action") else None,
            answer=data.get("answer"),
            error=data.get("error"),
            observation=Observation.from_dict(data["observation"]) if data.get("observation") else None,
            forced=bool(data.get("forced", False)),
            warnings=tuple(data.get("warnings", ())),
        )


@dataclass
class Trajectory:
    sample_id: str
    turns: list[Turn] = field(default_factory=list)
    final_answer: str | None = None
    termination: str = "protocol_error"
    # tool name (or "malformed") -> {"total": n, "failed": m}
    tool_call_stats: dict[str, dict[str, int]] = field(default_factory=dict)
    question: str | None = None
    image_path: str | None = None
    group_id: str | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.termination not in TERMINATIONS:
            raise TrajectoryError(f"unknown termination {self.termination!r}")
        if (self.termination == "answered") != (self.final_answer is not None):
            raise TrajectoryError("termination 'answered' must coincide with a final answer")
        for tool, counts in self.tool_call_stats.items():
            if not 0 <= counts.get("failed", 0) <= counts.get("total", 0):
                raise TrajectoryError(f"failed calls exceed total calls for {tool}")

    @property
    def tool_turns(self) -> int:
        """Turns that consumed an interaction slot (everything except answers and forced turns)."""
        return sum(1 for t in self.turns if not t.forced and t.answer is None)

    def record_call(self, tool: str, failed: bool) -> None:
        counts = self.tool_call_stats.setdefault(tool, {"total": 0, "failed": 0})
        counts["total"] += 1
        counts["failed"] += int(failed)

    @property
    def calls_total(self) -> int:
        return sum(c["total"] for c in self.tool_call_stats.values())

    @property
    def calls_failed(self) -> int:
        return sum(c["failed"] for c in self.tool_call_stats.values())

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "group_id": self.group_id,
            "question": self.question,
            "image_path": self.image_path,
            "turns": [t.to_dict() for t in self.turns],
            "final_answer": self.final_answer,
            "termination": self.termination,
            "tool_call_stats": {k: dict(v) for k, v in sorted(self.tool_call_stats.items())},
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        return cls(
            sample_id=data["sample_id"],
            group_id=data.get("group_id"),
            question=data.get("question"),
            image_path=data.get("image_path"),
            turns=[Turn.from_dict(t) for t in data.get("turns", [])],
            final_answer=data.get("final_answer"),
            termination=data["termination"],
            tool_call_stats={k: {"total": int(v["total"]), "failed": int(v["failed"])}
                             for k, v in data.get("tool_call_stats", {}).items()},
            warnings=list(data.get("warnings", [])),
        )


def serialize_trajectory(t: Trajectory) -> str:
    """One JSON line (no trailing newline). Key order is fixed so logs diff cleanly."""
    t.validate()
    try:
        return json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=True, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise TrajectoryError(f"trajectory {t.sample_id!r} is not serializable: {exc}") from exc


def deserialize_trajectory(line: str) -> Trajectory:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TrajectoryError(f"bad trajectory record: {exc}") from exc
    try:
        return Trajectory.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise TrajectoryError(f"bad trajectory record: {exc}") from exc


def read_trajectories(lines: Iterable[str]) -> Iterator[Trajectory]:
    """Parse a trajectory log, skipping blank lines and the header record."""
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if line.startswith('{"header":'):
            try:
                if "header" in json.loads(line):
                    continue
            except json.JSONDecodeError:
                pass
        yield deserialize_trajectory(line)
