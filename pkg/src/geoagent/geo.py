"""Geographic primitives and the training-signal math.

Great-circle distance, the hierarchical (city > province > country) reward,
group-normalized advantages and the clipped policy-ratio surrogate. Everything
here is pure and safe to call from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

EARTH_RADIUS_KM = 6371.0
# Half the circumference: the largest possible great-circle distance.
MAX_DISTANCE_KM = math.pi * EARTH_RADIUS_KM

LEVELS = ("country", "province", "city")
DEFAULT_BETA = 2.0
DEFAULT_CLIP_EPSILON = 0.2


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        lat, lon = float(self.latitude), float(self.longitude)
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {self.latitude!r} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {self.longitude!r} outside [-180, 180]")
        object.__setattr__(self, "latitude", lat)
        object.__setattr__(self, "longitude", lon)


@dataclass(frozen=True)
class GeoLabel:
    """Ground truth for one image.

    ``aliases`` maps a level name to accepted spellings; the canonical name is
    always added to its own alias list.
    """

    country: str
    province: str
    city: str
    point: GeoPoint
    aliases: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for level in LEVELS:
            if not str(getattr(self, level)).strip():
                raise ValueError(f"label {level} must be non-empty")
        unknown = set(self.aliases) - set(LEVELS)
        if unknown:
            raise ValueError(f"aliases for unknown levels: {sorted(unknown)}")
        merged = {}
        for level in LEVELS:
            names = tuple(self.aliases.get(level, ()))
            canonical = getattr(self, level)
            if canonical not in names:
                names = (canonical,) + names
            merged[level] = names
        object.__setattr__(self, "aliases", merged)

    def names(self, level: str) -> tuple[str, ...]:
        return self.aliases[level]


@dataclass(frozen=True)
class LevelVerdicts:
    """Per-level correctness of one answer.

    Build with :meth:`closed` to get the containment closure applied: a
    correct city forces province and country, a correct province forces
    country. ``methods`` records how each level was decided
    (``rule``, ``model`` or ``forced_by_containment``).
    """

    country: bool
    province: bool
    city: bool
    methods: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def closed(
        cls,
        country: bool,
        province: bool,
        city: bool,
        methods: Mapping[str, str] | None = None,
    ) -> "LevelVerdicts":
        methods = dict(methods or {})
        for level in LEVELS:
            methods.setdefault(level, "rule")
        if city and not province:
            province = True
            methods["province"] = "forced_by_containment"
        if province and not country:
            country = True
            methods["country"] = "forced_by_containment"
        return cls(country=country, province=province, city=city, methods=methods)

    @classmethod
    def none(cls) -> "LevelVerdicts":
        return cls.closed(False, False, False)

    def as_dict(self) -> dict:
        return {
            "country": self.country,
            "province": self.province,
            "city": self.city,
            "methods": dict(self.methods),
        }


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    phi1, phi2 = math.radians(a.latitude), math.radians(b.latitude)
    dphi = phi2 - phi1
    dlam = math.radians(b.longitude - a.longitude)
    v = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    # rounding can push v a hair past 1 for antipodal points
    v = min(1.0, max(0.0, v))
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(v))


RUNGS = ("city", "province", "country", "none")


@dataclass(frozen=True)
class HierarchicalReward:
    beta: float
    value: float
    rung: str

    def __post_init__(self) -> None:
        if not self.beta > 1:
            raise ValueError(f"beta must be > 1, got {self.beta!r}")
        expected = dict(zip(RUNGS, (self.beta**2, self.beta, 1.0, 0.0)))
        if self.rung not in expected or expected[self.rung] != self.value:
            raise ValueError(f"reward {self.value!r} is not the {self.rung!r} rung for beta={self.beta}")

    def __float__(self) -> float:
        return self.value


def hierarchical_reward(verdicts: LevelVerdicts, beta: float = DEFAULT_BETA) -> HierarchicalReward:
    """Map level verdicts to beta**2 / beta / 1 / 0, finest correct level first."""
    if not (isinstance(beta, (int, float)) and math.isfinite(beta) and beta > 1):
        raise ValueError(f"beta must be a finite number > 1, got {beta!r}")
    beta = float(beta)
    if verdicts.city:
        return HierarchicalReward(beta, beta**2, "city")
    if verdicts.province:
        return HierarchicalReward(beta, beta, "province")
    if verdicts.country:
        return HierarchicalReward(beta, 1.0, "country")
    return HierarchicalReward(beta, 0.0, "none")


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Normalize a group of rewards to zero mean and unit population std.

    A group whose rewards are all equal carries no preference signal and
    gets all-zero advantages.
    """
    values = [float(r) for r in rewards]
    if not values:
        raise ValueError("reward group is empty")
    if not all(math.isfinite(r) for r in values):
        raise ValueError("rewards must be finite")
    if max(values) == min(values):
        return [0.0] * len(values)
    n = len(values)
    mean = math.fsum(values) / n
    deviations = [r - mean for r in values]
    # rescale first so tiny spreads do not underflow when squared
    peak = max(abs(d) for d in deviations)
    if peak == 0.0:
        return [0.0] * n
    scaled = [d / peak for d in deviations]
    std = math.sqrt(math.fsum(s * s for s in scaled) / n)
    return [s / std for s in scaled]


@dataclass(frozen=True)
class RewardGroup:
    question_id: str
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.rewards:
            raise ValueError("reward group is empty")
        if len(self.rewards) != len(self.advantages):
            raise ValueError("rewards and advantages differ in length")

    @property
    def group_size(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_rewards(cls, question_id: str, rewards: Sequence[float]) -> "RewardGroup":
        return cls(question_id, tuple(float(r) for r in rewards), tuple(group_advantages(rewards)))


@dataclass(frozen=True)
class SurrogateTermInput:
    logprob_new: float
    logprob_old: float
    advantage: float
    clip_epsilon: float = DEFAULT_CLIP_EPSILON

    def __post_init__(self) -> None:
        if not (math.isfinite(self.clip_epsilon) and self.clip_epsilon > 0):
            raise ValueError(f"clip_epsilon must be finite and positive, got {self.clip_epsilon!r}")

    @property
    def ratio(self) -> float:
        return math.exp(self.logprob_new - self.logprob_old)


def clipped_surrogate_term(term: SurrogateTermInput) -> float:
    """Per-sample clipped objective: min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)."""
    for name in ("logprob_new", "logprob_old", "advantage"):
        if not math.isfinite(getattr(term, name)):
            raise ValueError(f"{name} must be finite")
    try:
        ratio = term.ratio
    except OverflowError:
        ratio = math.inf
    if not math.isfinite(ratio):
        raise ValueError("probability ratio is not finite")
    eps = term.clip_epsilon
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * term.advantage, clipped * term.advantage)
