"""Post-hoc reward and advantage tables for groups of rollouts."""

from __future__ import annotations

from collections import Counter, OrderedDict
from dataclasses import dataclass
from typing import Mapping, Sequence

from .evaluation import Verifier, verify_levels
from .geo import DEFAULT_BETA, RUNGS, GeoLabel, LevelVerdicts, RewardGroup, hierarchical_reward
from .protocol import Trajectory


class GroupingError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredGroup:
    group: RewardGroup
    sample_id: str
    rungs: tuple[str, ...]

    @property
    def mean_reward(self) -> float:
        return sum(self.group.rewards) / self.group.group_size

    def rung_fractions(self) -> dict[str, float]:
        counts = Counter(self.rungs)
        return {r: counts[r] / len(self.rungs) for r in RUNGS}


def group_trajectories(trajectories: Sequence[Trajectory]) -> "OrderedDict[str, list[Trajectory]]":
    """Group by ``group_id`` (falling back to ``sample_id``), keeping first-seen order."""
    groups: OrderedDict[str, list[Trajectory]] = OrderedDict()
    for t in trajectories:
        groups.setdefault(t.group_id or t.sample_id, []).append(t)
    for gid, members in groups.items():
        ids = sorted({m.sample_id for m in members})
        if len(ids) > 1:
            raise GroupingError(f"group {gid!r} mixes sample ids {ids}")
    return groups


def trajectory_verdicts(t: Trajectory, label: GeoLabel, verifier: Verifier | None = None) -> LevelVerdicts:
    if t.final_answer is None:
        return LevelVerdicts.none()
    return verify_levels(t.final_answer, label, verifier).verdicts


def score_groups(
    trajectories: Sequence[Trajectory],
    labels: Mapping[str, GeoLabel],
    beta: float = DEFAULT_BETA,
    verifier: Verifier | None = None,
) -> list[ScoredGroup]:
    scored = []
    for gid, members in group_trajectories(trajectories).items():
        sample_id = members[0].sample_id
        if sample_id not in labels:
            raise GroupingError(f"no label for sample {sample_id!r}")
        rewards = [hierarchical_reward(trajectory_verdicts(m, labels[sample_id], verifier), beta) for m in members]
        scored.append(ScoredGroup(
            RewardGroup.from_rewards(gid, [r.value for r in rewards]),
            sample_id,
            tuple(r.rung for r in rewards),
        ))
    return scored


def rung_histogram(groups: Sequence[ScoredGroup]) -> dict[str, float]:
    counts = Counter(r for g in groups for r in g.rungs)
    total = sum(counts.values())
    return {r: (counts[r] / total if total else 0.0) for r in RUNGS}
