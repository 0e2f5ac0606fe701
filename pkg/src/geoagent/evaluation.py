"""Benchmark scoring: level-wise verdicts, geocoded distance, report tables."""

from __future__ import annotations

import logging
import re
import statistics
import unicodedata
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .geo import LEVELS, MAX_DISTANCE_KM, GeoLabel, GeoPoint, LevelVerdicts, haversine_km
from .policy import ChatClient, PolicyUnavailable, message
from .prompts import load_asset
from .protocol import Trajectory
from .tools.geocoding import Geocoder

logger = logging.getLogger(__name__)

DATA_TYPES = ("panorama", "photo", "satellite")
MISS_DISTANCE_KM = MAX_DISTANCE_KM
NEAR_KM = 3.0

LEVEL_PROMPT_NAMES = {"country": "country", "province": "province or state", "city": "city"}


def normalize_place(text: str) -> str:
    """Accent-free, casefolded, punctuation collapsed to single spaces."""
    text = unicodedata.normalize("NFKD", text)
    text = "".join(ch for ch in text if not unicodedata.combining(ch))
    text = text.casefold().replace("ß", "ss")
    return " ".join(re.sub(r"[^\w]+", " ", text).split())


def mentions(answer: str, name: str) -> bool:
    """Whole-word containment of ``name`` in ``answer`` after normalization."""
    needle = normalize_place(name)
    if not needle:
        return False
    return f" {needle} " in f" {normalize_place(answer)} "


# A verifier answers: does ``answer`` name the same ``level`` as ``expected``?
Verifier = Callable[[str, str, str], bool]


class ChatVerifier:
    """Model-based level check using the pinned yes/no prompt."""

    def __init__(self, client: ChatClient):
        self.client = client

    def __call__(self, level: str, expected: str, answer: str) -> bool:
        prompt = load_asset("verifier").format(level=LEVEL_PROMPT_NAMES[level], expected=expected, answer=answer)
        reply = self.client.complete([message("user", prompt)], sample_id=f"verify:{level}")
        word = reply.text.strip().strip(".!\"'").casefold()
        if word.startswith("yes"):
            return True
        if word.startswith("no"):
            return False
        raise PolicyUnavailable(f"verifier reply is not yes/no: {reply.text!r}")


@dataclass(frozen=True)
class VerifyOutcome:
    verdicts: LevelVerdicts
    verifier_failed: bool = False


def verify_levels(final_answer: str, label: GeoLabel, verifier: Verifier | None = None) -> VerifyOutcome:
    """Rule match per level, model adjudication for rule misses, then containment closure."""
    raw: dict[str, bool] = {}
    methods: dict[str, str] = {}
    failed = False
    for level in LEVELS:
        hit = any(mentions(final_answer, name) for name in label.names(level))
        method = "rule"
        if not hit and verifier is not None:
            try:
                hit = bool(verifier(level, getattr(label, level), final_answer))
                method = "model"
            except Exception as exc:  # fall back to the rule verdict and flag the record
                logger.warning("verifier failed at %s level: %s", level, exc)
                failed = True
        raw[level] = hit
        methods[level] = method
    verdicts = LevelVerdicts.closed(raw["country"], raw["province"], raw["city"], methods)
    return VerifyOutcome(verdicts, failed)


# -- address extraction ------------------------------------------------------

_PARTICLES = {
    "de", "da", "do", "dos", "das", "del", "della", "di", "du", "la", "le", "les", "el",
    "am", "an", "im", "der", "den", "von", "van", "op", "of", "upon", "sur", "y", "e", "and",
}
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+(?=\S)")
_TRAILING = " \t.!?;:\"'()[]*"


def _placey(word: str) -> bool:
    w = word.strip("\"'()[]*")
    return bool(w) and (w[0].isupper() or w[0].isdigit())


def _trailing_place(words: list[str]) -> list[str]:
    """Longest suffix of ``words`` that reads like a proper place name."""
    keep: list[str] = []
    for word in reversed(words):
        if _placey(word):
            keep.insert(0, word)
        elif word.casefold() in _PARTICLES and keep:
            keep.insert(0, word)
        else:
            break
    while keep and keep[0].casefold() in _PARTICLES:
        keep.pop(0)
    return keep


def _rule_extract(answer: str) -> str | None:
    lines = [ln.strip() for ln in answer.splitlines() if ln.strip()]
    comma_lines = [ln for ln in lines if "," in ln]
    if comma_lines:
        line = comma_lines[-1]
        sentences = [s for s in _SENTENCE_SPLIT.split(line) if "," in s]
        text = (sentences[-1] if sentences else line).strip(_TRAILING)
        parts = [p.strip(_TRAILING) for p in text.split(",")]
        # trailing prose such as ", most likely" is not part of the address
        while len(parts) > 1 and not _trailing_place(parts[-1].split()):
            parts.pop()
        # the address starts in the last segment that still has prose before its place name
        start = 0
        for i, part in enumerate(parts):
            words = part.split()
            if _trailing_place(words) != words:
                start = i
        head = _trailing_place(parts[start].split())
        tail = parts[start + 1:]
        segments = ([" ".join(head)] if head else []) + [p for p in tail if p]
        if head and len(segments) >= 2:
            return ", ".join(segments)
        if not head and len(segments) >= 1:
            # leading clause held no proper name; keep the named segments
            named = [p for p in tail if p and _placey(p)]
            if named:
                return ", ".join(named)
    # no comma expression: a short line made only of proper-name words is an address
    if len(lines) == 1:
        words = lines[0].strip(_TRAILING).split()
        if 0 < len(words) <= 6 and _trailing_place(words) == words:
            return " ".join(words)
    return None


def extract_predicted_address(final_answer: str, extractor: Callable[[str], str] | None = None) -> str | None:
    """Most specific location string in the answer; None when there is none."""
    if not final_answer or not final_answer.strip():
        return None
    if extractor is not None:
        try:
            extracted = (extractor(final_answer) or "").strip()
            return extracted or None
        except Exception as exc:
            logger.warning("address extractor failed, using rule fallback: %s", exc)
    return _rule_extract(final_answer)


class ChatExtractor:
    """Asks a chat model for the single most specific address in an answer."""

    PROMPT = (
        "Extract the single most specific location stated in the following answer, "
        "formatted as a postal-style address (street, city, province or state, country), "
        "omitting parts that are not stated. Reply with the address only, or NONE if no location is given.\n\n"
        "Answer:\n{answer}"
    )

    def __init__(self, client: ChatClient):
        self.client = client

    def __call__(self, answer: str) -> str:
        reply = self.client.complete([message("user", self.PROMPT.format(answer=answer))], sample_id="extract")
        text = reply.text.strip()
        return "" if text.upper() == "NONE" else text


# -- per-sample records --------------------------------------------------------


@dataclass(frozen=True)
class EvalClients:
    geocoder: Geocoder | None = None
    verifier: Verifier | None = None
    extractor: Callable[[str], str] | None = None


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    data_type: str
    verdicts: LevelVerdicts
    predicted_address: str | None
    predicted_point: GeoPoint | None
    distance_km: float
    geocode_status: str
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.data_type not in DATA_TYPES:
            raise ValueError(f"unknown data type {self.data_type!r}")
        if (self.geocode_status == "ok") != (self.predicted_point is not None):
            raise ValueError("predicted point must be present exactly when geocoding succeeded")
        if self.geocode_status != "ok" and self.distance_km != MISS_DISTANCE_KM:
            raise ValueError("geocode misses must carry the miss distance")

    @property
    def geocoded(self) -> bool:
        return self.geocode_status == "ok"

    def to_dict(self) -> dict:
        point = self.predicted_point
        return {
            "sample_id": self.sample_id,
            "data_type": self.data_type,
            "verdicts": self.verdicts.as_dict(),
            "predicted_address": self.predicted_address,
            "predicted_point": [point.latitude, point.longitude] if point else None,
            "distance_km": self.distance_km,
            "geocode_status": self.geocode_status,
            "flags": list(self.flags),
        }


def evaluate_sample(trajectory: Trajectory, label: GeoLabel, data_type: str,
                    clients: EvalClients = EvalClients()) -> EvalRecord:
    """Score one trajectory. Unanswered ones are wrong at every level and a geocode miss."""
    if trajectory.final_answer is None:
        return EvalRecord(trajectory.sample_id, data_type, LevelVerdicts.none(), None, None,
                          MISS_DISTANCE_KM, "unanswered")
    flags = []
    outcome = verify_levels(trajectory.final_answer, label, clients.verifier)
    if outcome.verifier_failed:
        flags.append("verifier_failed")
    address = extract_predicted_address(trajectory.final_answer, clients.extractor)
    if address is None:
        return EvalRecord(trajectory.sample_id, data_type, outcome.verdicts, None, None,
                          MISS_DISTANCE_KM, "unaddressable", tuple(flags))
    if clients.geocoder is None:
        return EvalRecord(trajectory.sample_id, data_type, outcome.verdicts, address, None,
                          MISS_DISTANCE_KM, "not_geocoded", tuple(flags))
    geo = clients.geocoder.geocode(address)
    if geo.status != "ok":
        if geo.status == "provider_error":
            flags.append("geocode_provider_error")
        return EvalRecord(trajectory.sample_id, data_type, outcome.verdicts, address, None,
                          MISS_DISTANCE_KM, geo.status, tuple(flags))
    distance = haversine_km(geo.point, label.point)
    return EvalRecord(trajectory.sample_id, data_type, outcome.verdicts, address, geo.point,
                      distance, "ok", tuple(flags))


# -- aggregation -------------------------------------------------------------


def _pct(count: int, total: int) -> float:
    return 100.0 * count / total


@dataclass(frozen=True)
class MetricsReport:
    n_samples: int
    country_acc: float
    province_acc: float
    city_acc: float
    city_acc_by_type: Mapping[str, float | None]
    n_by_type: Mapping[str, int]
    under_3km_rate: float
    median_distance_km: float
    n_geocoded: int = 0
    extra: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "country_acc": self.country_acc,
            "province_acc": self.province_acc,
            "city_acc": self.city_acc,
            "city_acc_by_type": dict(self.city_acc_by_type),
            "n_by_type": dict(self.n_by_type),
            "under_3km_rate": self.under_3km_rate,
            "median_distance_km": self.median_distance_km,
            "n_geocoded": self.n_geocoded,
        }


def aggregate(records: Sequence[EvalRecord]) -> MetricsReport:
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate zero records")
    n = len(records)
    by_type: dict[str, list[EvalRecord]] = {t: [] for t in DATA_TYPES}
    for r in records:
        by_type[r.data_type].append(r)
    distances = sorted(r.distance_km for r in records)
    return MetricsReport(
        n_samples=n,
        country_acc=_pct(sum(r.verdicts.country for r in records), n),
        province_acc=_pct(sum(r.verdicts.province for r in records), n),
        city_acc=_pct(sum(r.verdicts.city for r in records), n),
        city_acc_by_type={
            t: _pct(sum(r.verdicts.city for r in rs), len(rs)) if rs else None for t, rs in by_type.items()
        },
        n_by_type={t: len(rs) for t, rs in by_type.items()},
        under_3km_rate=_pct(sum(1 for r in records if r.geocoded and r.distance_km < NEAR_KM), n),
        median_distance_km=statistics.median(distances),
        n_geocoded=sum(1 for r in records if r.geocoded),
    )


def _fmt(value: float | None, digits: int = 2) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def render_table(report: MetricsReport, name: str = "model") -> str:
    """Plain-text table: level accuracies, city accuracy per data type, distance metrics."""
    header = ["Model", "Country %", "Provincial/State %", "City %",
              "City % Panorama", "City % Photo", "City % Satellite", "<3 km %", "Median km", "N"]
    row = [
        name,
        _fmt(report.country_acc),
        _fmt(report.province_acc),
        _fmt(report.city_acc),
        _fmt(report.city_acc_by_type.get("panorama")),
        _fmt(report.city_acc_by_type.get("photo")),
        _fmt(report.city_acc_by_type.get("satellite")),
        _fmt(report.under_3km_rate),
        _fmt(report.median_distance_km),
        str(report.n_samples),
    ]
    widths = [max(len(h), len(c)) for h, c in zip(header, row)]
    line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"  # noqa: E731
    rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), rule, line(row)]) + "\n"
