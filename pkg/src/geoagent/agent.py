"""The thought -> action -> observation loop.

A trajectory alternates policy turns and tool observations until the policy
answers or a cap (turns or context) is hit. On a cap, one extra turn with
tools disabled asks for a final answer, so every sample ends up scoreable.
"""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .policy import (
    ChatClient,
    Message,
    PolicyReply,
    PolicyUnavailable,
    image_part,
    message,
    text_part,
)
from .prompts import load_asset, render_system_prompt
from .protocol import TOOL_NAMES, Observation, Trajectory, Turn, parse_model_output
from .tools import ImageRef, Toolbox, downsample_to_budget
from .tools.images import DEFAULT_PIXEL_BUDGET, DEFAULT_ZOOM_TARGET

logger = logging.getLogger(__name__)

DEFAULT_QUESTION = (
    "Where was this image taken? Identify the location as precisely as you can, "
    "giving the city, the province or state, and the country."
)
FORMAT_HINT = (
    "Call a tool with a JSON object inside <tool_call></tool_call>, "
    "or give your final answer inside <answer></answer>."
)


@dataclass
class LoopConfig:
    max_turns: int = 6
    max_context_tokens: int = 32768
    pixel_budget: int = DEFAULT_PIXEL_BUDGET
    force_final_answer: bool = True
    tool_set: tuple[str, ...] = TOOL_NAMES
    zoom_target: int = DEFAULT_ZOOM_TARGET
    # flat token charge per image in the context estimate; provider dependent
    image_token_cost: int = 1280
    max_retries: int = 3
    retry_backoff: float = 1.0
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.max_context_tokens < 1024:
            raise ValueError("max_context_tokens must be >= 1024")
        if self.pixel_budget < 1:
            raise ValueError("pixel_budget must be >= 1")
        unknown = set(self.tool_set) - set(TOOL_NAMES)
        if unknown:
            raise ValueError(f"unknown tools in tool_set: {sorted(unknown)}")
        self.tool_set = tuple(self.tool_set)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_path: str
    question: str = DEFAULT_QUESTION


def _chars_and_images(messages: Sequence[Message]) -> tuple[int, int]:
    chars = images = 0
    for msg in messages:
        if msg["role"] == "system":
            continue
        content = msg["content"]
        if isinstance(content, str):
            chars += len(content)
            continue
        for part in content:
            if part["type"] == "image":
                images += 1
            else:
                chars += len(part["text"])
    return chars, images


def estimate_context_tokens(
    history: Sequence[Message],
    *,
    image_token_cost: int = 1280,
    reported_usage: int | None = None,
) -> int:
    """Context size of the system prompt plus ``history``.

    Provider-reported usage wins when given; otherwise four characters count
    as one token and each image costs ``image_token_cost``. System messages in
    ``history`` are not counted twice.
    """
    if reported_usage is not None:
        return int(reported_usage)
    chars, images = _chars_and_images(history)
    chars += len(render_system_prompt())
    return math.ceil(chars / 4) + images * image_token_cost


def _observation_message(obs: Observation, image: ImageRef | None) -> Message:
    if obs.kind == "image":
        return message("user", "<tool_response>\n", image_part(image), "\n</tool_response>")
    return message("user", f"<tool_response>\n{obs.text}\n</tool_response>")


class _Context:
    """Tracks the context estimate, anchoring on the last provider-reported usage."""

    def __init__(self, cost: int):
        self.cost = cost
        self.anchor: int | None = None
        self.anchor_len = 0

    def note_reply(self, reply: PolicyReply, n_messages: int) -> None:
        if reply.usage_tokens is not None:
            self.anchor = reply.usage_tokens
            self.anchor_len = n_messages

    def tokens(self, messages: Sequence[Message]) -> int:
        if self.anchor is None:
            return estimate_context_tokens(messages, image_token_cost=self.cost)
        chars, images = _chars_and_images(messages[self.anchor_len:])
        return self.anchor + math.ceil(chars / 4) + images * self.cost


def call_policy(
    policy: ChatClient,
    messages: Sequence[Message],
    config: LoopConfig,
    sample_id: str,
    sleep: Callable[[float], None] = time.sleep,
) -> PolicyReply:
    attempts = 1 if config.deterministic else 1 + config.max_retries
    for attempt in range(attempts):
        try:
            return policy.complete(messages, sample_id=sample_id)
        except PolicyUnavailable as exc:
            if attempt + 1 == attempts:
                raise
            delay = config.retry_backoff * 2**attempt
            logger.warning("policy call for %s failed (%s); retrying in %.1fs", sample_id, exc, delay)
            sleep(delay)
    raise AssertionError("unreachable")


def run_trajectory(
    sample: Sample,
    config: LoopConfig,
    policy: ChatClient,
    toolbox: Toolbox,
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> Trajectory:
    if not sample.question.strip():
        raise ValueError("question must be non-empty")
    image = downsample_to_budget(ImageRef.open(sample.image_path), config.pixel_budget)

    traj = Trajectory(sample.sample_id, question=sample.question, image_path=sample.image_path)
    messages: list[Message] = [
        message("system", render_system_prompt()),
        message("user", image_part(image), text_part(sample.question)),
    ]
    ctx = _Context(config.image_token_cost)
    cap: str | None = None

    while True:
        if traj.tool_turns >= config.max_turns:
            cap = "turn_cap"
            break
        if ctx.tokens(messages) >= config.max_context_tokens:
            cap = "context_cap"
            break
        try:
            reply = call_policy(policy, messages, config, sample.sample_id, sleep)
        except PolicyUnavailable as exc:
            traj.warnings.append(f"policy unavailable: {exc}")
            traj.termination = "protocol_error"
            return traj
        messages.append(message("assistant", reply.text))
        ctx.note_reply(reply, len(messages))
        parsed = parse_model_output(reply.text)

        if parsed.answer is not None:
            traj.turns.append(Turn(reply.text, parsed.think, answer=parsed.answer, warnings=parsed.warnings))
            traj.final_answer = parsed.answer
            traj.termination = "answered"
            return traj

        invocation = parsed.invocation
        if invocation is not None and invocation.name not in config.tool_set:
            obs = Observation("error", text=f"Tool error ({invocation.name}): tool is not enabled.")
            traj.record_call(invocation.name, failed=True)
            traj.turns.append(Turn(reply.text, parsed.think, error="tool disabled", observation=obs,
                                   warnings=parsed.warnings))
            messages.append(_observation_message(obs, None))
            continue
        if invocation is not None:
            outcome = toolbox.execute(invocation, image)
            traj.record_call(invocation.name, failed=outcome.failed)
            traj.turns.append(Turn(reply.text, parsed.think, action=invocation,
                                   error=outcome.observation.text if outcome.failed else None,
                                   observation=outcome.observation, warnings=parsed.warnings))
            messages.append(_observation_message(outcome.observation, outcome.image))
            continue

        bad = parsed.malformed
        if bad.tool_call_attempted:
            traj.record_call(bad.tool_name if bad.tool_name in TOOL_NAMES else "malformed", failed=True)
        obs = Observation("error", text=f"Invalid response ({bad.reason}). {FORMAT_HINT}")
        traj.turns.append(Turn(reply.text, parsed.think, error=bad.reason, observation=obs,
                               warnings=parsed.warnings))
        messages.append(_observation_message(obs, None))

    traj.termination = cap
    if not config.force_final_answer:
        return traj
    messages.append(message("user", load_asset("forced_answer")))
    try:
        reply = call_policy(policy, messages, config, sample.sample_id, sleep)
    except PolicyUnavailable as exc:
        traj.warnings.append(f"policy unavailable on forced answer: {exc}")
        return traj
    parsed = parse_model_output(reply.text)
    if parsed.answer is not None:
        traj.turns.append(Turn(reply.text, parsed.think, answer=parsed.answer, forced=True,
                               warnings=parsed.warnings))
        traj.final_answer = parsed.answer
        traj.termination = "answered"
    else:
        reason = "tool call after cap" if parsed.invocation else parsed.malformed.reason
        traj.turns.append(Turn(reply.text, parsed.think, error=reason, forced=True, warnings=parsed.warnings))
    return traj


def _failed_trajectory(sample: Sample, exc: BaseException) -> Trajectory:
    return Trajectory(sample.sample_id, question=sample.question, image_path=sample.image_path,
                      termination="protocol_error", warnings=[f"{type(exc).__name__}: {exc}"])


def run_batch(
    samples: Sequence[Sample],
    config: LoopConfig,
    policy: ChatClient,
    toolbox: Toolbox,
    workers: int = 8,
    *,
    group_size: int = 1,
    sleep: Callable[[float], None] = time.sleep,
) -> list[Trajectory]:
    """Run every sample ``group_size`` times on a thread pool.

    Output order follows input order (group members adjacent). A sample that
    blows up becomes a ``protocol_error`` trajectory instead of sinking the batch.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    jobs = [s for s in samples for _ in range(group_size)]

    def one(sample: Sample) -> Trajectory:
        try:
            traj = run_trajectory(sample, config, policy, toolbox, sleep=sleep)
        except Exception as exc:  # isolation: one bad sample never aborts the batch
            logger.exception("sample %s failed", sample.sample_id)
            traj = _failed_trajectory(sample, exc)
        traj.group_id = sample.sample_id
        return traj

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, jobs))


def tool_failure_rate(trajectories: Sequence[Trajectory]) -> float:
    total = sum(t.calls_total for t in trajectories)
    failed = sum(t.calls_failed for t in trajectories)
    return failed / total if total else 0.0


@dataclass
class BatchSummary:
    n_trajectories: int
    terminations: dict[str, int]
    calls_total: int
    calls_failed: int
    tool_failure_rate: float
    per_tool: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_trajectories": self.n_trajectories,
            "terminations": dict(sorted(self.terminations.items())),
            "calls_total": self.calls_total,
            "calls_failed": self.calls_failed,
            "tool_failure_rate": self.tool_failure_rate,
            "per_tool": {k: dict(v) for k, v in sorted(self.per_tool.items())},
        }


def summarize_batch(trajectories: Sequence[Trajectory]) -> BatchSummary:
    per_tool: dict[str, dict[str, int]] = {}
    for t in trajectories:
        for tool, counts in t.tool_call_stats.items():
            agg = per_tool.setdefault(tool, {"total": 0, "failed": 0})
            agg["total"] += counts["total"]
            agg["failed"] += counts["failed"]
    return BatchSummary(
        n_trajectories=len(trajectories),
        terminations=dict(Counter(t.termination for t in trajectories)),
        calls_total=sum(t.calls_total for t in trajectories),
        calls_failed=sum(t.calls_failed for t in trajectories),
        tool_failure_rate=tool_failure_rate(trajectories),
        per_tool=per_tool,
    )
