"""Dataset curation: manifests, localizability filtering, cold-start trajectories.

Cold-start trajectories are assembled from a proposal model's output: first
candidate regions to zoom into, then search queries, then the final
reasoning. Each proposed tool call is actually executed so the observations
in the exported conversations are real.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .agent import DEFAULT_QUESTION
from .geo import GeoLabel, GeoPoint
from .policy import ChatClient, PolicyUnavailable, image_part, message
from .prompts import load_asset, render_system_prompt
from .protocol import (
    SEARCH_TOOL,
    ZOOM_TOOL,
    ToolInvocation,
    Trajectory,
    Turn,
    parse_model_output,
    render_answer,
    render_tool_call,
)
from .tools import ImageRef, Toolbox, downsample_to_budget

logger = logging.getLogger(__name__)

DATA_TYPES = ("photo", "panorama", "satellite")
MIN_BENCHMARK_PIXELS = 1_000_000


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image_path: str
    label: GeoLabel
    data_type: str
    width: int
    height: int
    question: str = DEFAULT_QUESTION

    def __post_init__(self) -> None:
        if self.data_type not in DATA_TYPES:
            raise ManifestError(f"{self.sample_id}: unknown data_type {self.data_type!r}")
        if self.width < 1 or self.height < 1:
            raise ManifestError(f"{self.sample_id}: bad dimensions {self.width}x{self.height}")

    @property
    def resolution(self) -> int:
        return self.width * self.height

    @classmethod
    def from_record(cls, rec: dict, base_dir: str | os.PathLike | None = None) -> "ManifestEntry":
        try:
            image_path = str(rec["image_path"])
            if base_dir is not None and not os.path.isabs(image_path):
                image_path = str(Path(base_dir) / image_path)
            label = GeoLabel(
                country=rec["country"],
                province=rec["province"],
                city=rec["city"],
                point=GeoPoint(float(rec["lat"]), float(rec["lon"])),
                aliases={k: tuple(v) for k, v in (rec.get("aliases") or {}).items()},
            )
            return cls(
                sample_id=str(rec["sample_id"]),
                image_path=image_path,
                label=label,
                data_type=rec["data_type"],
                width=int(rec["width"]),
                height=int(rec["height"]),
                question=rec.get("question") or DEFAULT_QUESTION,
            )
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad manifest record {rec.get('sample_id', '?')!r}: {exc}") from exc

    def to_record(self, base_dir: str | os.PathLike | None = None) -> dict:
        path = self.image_path
        if base_dir is not None:
            try:
                path = os.path.relpath(path, base_dir)
            except ValueError:
                pass
        rec = {
            "sample_id": self.sample_id,
            "image_path": path,
            "lat": self.label.point.latitude,
            "lon": self.label.point.longitude,
            "country": self.label.country,
            "province": self.label.province,
            "city": self.label.city,
            "data_type": self.data_type,
            "width": self.width,
            "height": self.height,
        }
        extra = {k: list(v[1:]) for k, v in self.label.aliases.items() if len(v) > 1}
        if extra:
            rec["aliases"] = extra
        if self.question != DEFAULT_QUESTION:
            rec["question"] = self.question
        return rec


def load_manifest(path: str | os.PathLike, *, benchmark: bool = False) -> list[ManifestEntry]:
    """Read a JSONL manifest. Relative image paths resolve against the manifest's directory.

    With ``benchmark=True`` every entry must have at least 1M pixels.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries, seen = [], set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            entry = ManifestEntry.from_record(rec, path.parent)
            if entry.sample_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate sample_id {entry.sample_id!r}")
            if benchmark and entry.resolution < MIN_BENCHMARK_PIXELS:
                raise ManifestError(f"{entry.sample_id}: {entry.width}x{entry.height} is below 1M pixels")
            seen.add(entry.sample_id)
            entries.append(entry)
    return entries


# -- localizability filter ------------------------------------------------------

JUDGE_LABELS = ("non-localizable", "landmark", "localizable")


@dataclass(frozen=True)
class FilterDecision:
    sample_id: str
    keep: bool
    reason: str | None = None
    flagged: bool = False
    judge_reply: str | None = None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "keep": self.keep,
            "reason": self.reason,
            "flagged": self.flagged,
            "judge_reply": self.judge_reply,
        }


def _judge_label(text: str) -> str | None:
    words = re.sub(r"[^a-z\- ]+", " ", text.casefold()).split()
    for word in words:
        if word in ("non-localizable", "nonlocalizable", "non-localisable"):
            return "non-localizable"
        if word in ("landmark", "landmarks"):
            return "landmark"
        if word in ("localizable", "localisable"):
            return "localizable"
    return None


def filter_localizability(entry: ManifestEntry, judge: ChatClient, pixel_budget: int = 2_000_000) -> FilterDecision:
    """Drop images with no usable clues or with iconic landmarks; judge failures keep the entry flagged."""
    try:
        image = downsample_to_budget(ImageRef.open(entry.image_path), pixel_budget)
        reply = judge.complete([message("user", image_part(image), load_asset("localizability_judge"))],
                               sample_id=entry.sample_id)
    except (PolicyUnavailable, ValueError) as exc:
        logger.warning("judge failed for %s: %s", entry.sample_id, exc)
        return FilterDecision(entry.sample_id, True, f"judge error: {exc}", flagged=True)
    label = _judge_label(reply.text)
    if label is None:
        return FilterDecision(entry.sample_id, True, "unparseable judge reply", flagged=True, judge_reply=reply.text)
    if label == "localizable":
        return FilterDecision(entry.sample_id, True, None, judge_reply=reply.text)
    return FilterDecision(entry.sample_id, False, label, judge_reply=reply.text)


# -- proposals -------------------------------------------------------------------


class CurationSkipped(Exception):
    """The proposer failed for an entry; the entry is skipped and logged."""


@dataclass(frozen=True)
class RegionProposal:
    bbox: tuple[int, ...]
    rationale: str


@dataclass(frozen=True)
class QueryProposal:
    query: str
    rationale: str


@dataclass
class CurationProposal:
    regions: list[RegionProposal] = field(default_factory=list)
    queries: list[QueryProposal] = field(default_factory=list)
    final_reasoning: str = ""
    final_answer: str = ""

    def __post_init__(self) -> None:
        if not self.regions and not self.queries:
            raise CurationSkipped("proposal has no regions and no queries")


_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.MULTILINE)


def _json_reply(text: str) -> dict:
    body = _FENCE.sub("", text.strip())
    start, end = body.find("{"), body.rfind("}")
    if start < 0 or end < start:
        raise CurationSkipped(f"proposer reply has no JSON object: {text[:80]!r}")
    try:
        data = json.loads(body[start:end + 1])
    except json.JSONDecodeError as exc:
        raise CurationSkipped(f"proposer reply is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CurationSkipped("proposer reply is not a JSON object")
    return data


def _ask(proposer: ChatClient, messages: list, sample_id: str) -> dict:
    try:
        reply = proposer.complete(messages, sample_id=sample_id)
    except PolicyUnavailable as exc:
        raise CurationSkipped(f"proposer unavailable: {exc}") from exc
    messages.append(message("assistant", reply.text))
    return _json_reply(reply.text)


def request_proposal(entry: ManifestEntry, image: ImageRef, proposer: ChatClient, max_items: int) -> CurationProposal:
    """Three-stage conversation with the proposer: regions, queries, final judgement."""
    messages = [message("user", image_part(image),
                        load_asset("proposer_regions").format(width=image.width, height=image.height,
                                                             max_items=max_items))]
    data = _ask(proposer, messages, entry.sample_id)
    regions = []
    for item in data.get("regions") or []:
        try:
            bbox = tuple(int(v) for v in item["bbox_2d"])
            regions.append(RegionProposal(bbox, str(item.get("rationale", "")).strip()))
        except (KeyError, TypeError, ValueError):
            logger.info("%s: dropping unreadable region proposal %r", entry.sample_id, item)

    notes = "\n".join(f"- {r.bbox}: {r.rationale}" for r in regions) or "- (no regions)"
    messages.append(message("user", load_asset("proposer_queries").format(region_notes=notes, max_items=max_items)))
    data = _ask(proposer, messages, entry.sample_id)
    queries = []
    for item in data.get("queries") or []:
        q = item.get("query") if isinstance(item, dict) else None
        if isinstance(q, str) and q.strip():
            queries.append(QueryProposal(q.strip(), str(item.get("rationale", "")).strip()))

    evidence = notes + "\n" + "\n".join(f"- search: {q.query}: {q.rationale}" for q in queries)
    messages.append(message("user", load_asset("proposer_final").format(evidence=evidence)))
    data = _ask(proposer, messages, entry.sample_id)
    answer = str(data.get("answer") or "").strip()
    if not answer:
        raise CurationSkipped("proposer gave no final answer")
    return CurationProposal(regions, queries, str(data.get("reasoning") or "").strip(), answer)


def propose_and_execute(entry: ManifestEntry, proposer: ChatClient, toolbox: Toolbox,
                        turn_budget: int = 6) -> Trajectory:
    """Build one protocol-conformant trajectory from proposals.

    Regions are tried before queries. A proposal whose tool call fails (for
    example an inverted bbox) is dropped; at most ``turn_budget`` successful
    tool turns are kept.
    """
    if turn_budget < 1:
        raise ValueError("turn_budget must be >= 1")
    try:
        image = downsample_to_budget(ImageRef.open(entry.image_path), toolbox.pixel_budget)
    except ValueError as exc:
        raise CurationSkipped(str(exc)) from exc
    proposal = request_proposal(entry, image, proposer, max_items=turn_budget)

    traj = Trajectory(entry.sample_id, question=entry.question, image_path=entry.image_path,
                      group_id=entry.sample_id)
    candidates = [(ToolInvocation(ZOOM_TOOL, bbox=r.bbox), r.rationale) for r in proposal.regions if len(r.bbox) == 4]
    candidates += [(ToolInvocation(SEARCH_TOOL, query=q.query), q.rationale) for q in proposal.queries]
    for invocation, rationale in candidates:
        if traj.tool_turns >= turn_budget:
            break
        outcome = toolbox.execute(invocation, image)
        if outcome.failed:
            traj.warnings.append(f"dropped proposal {invocation.to_dict()}: {outcome.observation.text}")
            continue
        traj.record_call(invocation.name, failed=False)
        think = rationale or None
        traj.turns.append(Turn(render_tool_call(invocation, think), think, action=invocation,
                               observation=outcome.observation))
    if not traj.turns:
        raise CurationSkipped("no proposed tool call could be executed")
    think = proposal.final_reasoning or None
    traj.turns.append(Turn(render_answer(proposal.final_answer, think), think, answer=proposal.final_answer))
    traj.final_answer = proposal.final_answer
    traj.termination = "answered"
    return traj


# -- export ------------------------------------------------------------------------


@dataclass
class ExportResult:
    records: list[dict]
    rejected: list[tuple[str, str]]


def conformance_problems(traj: Trajectory) -> list[str]:
    problems = []
    if traj.termination != "answered" or traj.final_answer is None:
        problems.append("trajectory has no final answer")
    if not traj.turns:
        problems.append("trajectory has no turns")
    for i, turn in enumerate(traj.turns):
        last = i == len(traj.turns) - 1
        parsed = parse_model_output(turn.raw)
        if last:
            if parsed.answer is None or parsed.answer != traj.final_answer:
                problems.append(f"turn {i}: final turn does not parse to the final answer")
            continue
        if turn.action is None:
            problems.append(f"turn {i}: no executed tool call ({turn.error or 'missing action'})")
        elif parsed.invocation != turn.action:
            problems.append(f"turn {i}: raw text does not re-parse to the recorded tool call")
        if turn.observation is None or turn.observation.kind == "error":
            problems.append(f"turn {i}: missing or failed observation")
    return problems


def _observation_content(turn: Turn) -> list[dict]:
    obs = turn.observation
    if obs.kind == "image":
        return [{"type": "text", "text": "<tool_response>\n"},
                {"type": "image", "image": obs.image_path},
                {"type": "text", "text": "\n</tool_response>"}]
    return [{"type": "text", "text": f"<tool_response>\n{obs.text}\n</tool_response>"}]


def trajectory_to_conversation(traj: Trajectory) -> dict:
    messages = [
        {"role": "system", "content": render_system_prompt()},
        {"role": "user", "content": [{"type": "image", "image": traj.image_path},
                                     {"type": "text", "text": traj.question or DEFAULT_QUESTION}]},
    ]
    for turn in traj.turns:
        messages.append({"role": "assistant", "content": turn.raw})
        if turn.observation is not None:
            messages.append({"role": "user", "content": _observation_content(turn)})
    return {"sample_id": traj.sample_id, "messages": messages}


def export_sft_dataset(trajectories: Iterable[Trajectory]) -> ExportResult:
    """Convert trajectories to chat records; no answer-correctness filtering is applied."""
    records, rejected = [], []
    for traj in trajectories:
        problems = conformance_problems(traj)
        if problems:
            rejected.append((traj.sample_id, "; ".join(problems)))
            continue
        records.append(trajectory_to_conversation(traj))
    return ExportResult(records, rejected)


def lint_answers(trajectories: Sequence[Trajectory], labels: dict[str, GeoLabel]) -> list[dict]:
    """Report (never remove) trajectories whose final answer misses the label's city."""
    from .evaluation import verify_levels

    report = []
    for traj in trajectories:
        label = labels.get(traj.sample_id)
        if label is None or traj.final_answer is None:
            continue
        verdicts = verify_levels(traj.final_answer, label).verdicts
        if not verdicts.city:
            report.append({"sample_id": traj.sample_id, "verdicts": verdicts.as_dict()})
    return report
