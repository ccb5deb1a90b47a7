"""Encounter records: session risk score, medical rules, JSON serialization, record store."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

SCHEMA_VERSION = "coughscope.encounter/1"
COUGH_PROMPT = "please cough naturally"
INDEX_FILE = "index.jsonl"


class RecordError(ValueError):
    pass


class AlertKind(str, Enum):
    ABNORMAL_TEMPERATURE = "AbnormalTemperature"
    HIGH_COVID_RISK = "HighCovidRisk"
    NO_COUGH_CAPTURED = "NoCoughCaptured"


def _finite(name: str, value, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise RecordError(f"{name} must be a finite number, got {value!r}")
    return float(value)


def _text(name: str, value, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if not isinstance(value, str):
        raise RecordError(f"{name} must be a string, got {type(value).__name__}")
    return value


@dataclass(frozen=True)
class Alert:
    kind: AlertKind
    detail: str

    def __post_init__(self):
        object.__setattr__(self, "kind", AlertKind(self.kind))
        _text("alert detail", self.detail)


@dataclass(frozen=True)
class ScoreEntry:
    class_name: str
    similarity: float
    probability: float

    def __post_init__(self):
        _text("class_name", self.class_name)
        object.__setattr__(self, "similarity", _finite("similarity", self.similarity))
        p = _finite("probability", self.probability)
        if not 0.0 <= p <= 1.0:
            raise RecordError(f"probability {p} outside [0, 1]")
        object.__setattr__(self, "probability", p)


@dataclass(frozen=True)
class EventEntry:
    start_s: float
    end_s: float
    frame_start: int
    frame_stop: int
    peak_score: float
    predicted_class: str | None = None
    scores: tuple[ScoreEntry, ...] = ()

    def __post_init__(self):
        for name in ("start_s", "end_s", "peak_score"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        if not self.end_s > self.start_s:
            raise RecordError("event end_s must exceed start_s")
        for name in ("frame_start", "frame_stop"):
            if not isinstance(getattr(self, name), int):
                raise RecordError(f"{name} must be an integer")
        _text("predicted_class", self.predicted_class, allow_none=True)
        object.__setattr__(self, "scores", tuple(
            s if isinstance(s, ScoreEntry) else ScoreEntry(**s) for s in self.scores))

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def probability_of(self, class_name: str) -> float:
        for s in self.scores:
            if s.class_name == class_name:
                return s.probability
        raise KeyError(class_name)


@dataclass(frozen=True)
class Demographics:
    age: int | None = None
    sex: str | None = None

    def __post_init__(self):
        if self.age is not None and (isinstance(self.age, bool) or not isinstance(self.age, int) or self.age < 0):
            raise RecordError(f"age must be a non-negative integer, got {self.age!r}")
        _text("sex", self.sex, allow_none=True)


@dataclass(frozen=True)
class EncounterRecord:
    session_id: str
    timestamp: str
    temperature_c: float | None
    demographics: Demographics | None = None
    audio_refs: tuple[str, ...] = ()
    events: tuple[EventEntry, ...] = ()
    risk_score: float = 0.0
    alerts: tuple[Alert, ...] = ()
    prompts_issued: tuple[str, ...] = ()
    location_note: str = ""
    incomplete: bool = False

    def __post_init__(self):
        sid = _text("session_id", self.session_id)
        if not sid or "/" in sid or "\\" in sid or sid in (".", ".."):
            raise RecordError(f"session_id {sid!r} is not usable as a file name")
        _text("timestamp", self.timestamp)
        object.__setattr__(self, "temperature_c", _finite("temperature_c", self.temperature_c, allow_none=True))
        if isinstance(self.demographics, dict):
            object.__setattr__(self, "demographics", Demographics(**self.demographics))
        object.__setattr__(self, "audio_refs", tuple(_text("audio ref", a) for a in self.audio_refs))
        object.__setattr__(self, "events", tuple(
            e if isinstance(e, EventEntry) else EventEntry(**e) for e in self.events))
        risk = _finite("risk_score", self.risk_score)
        if not 0.0 <= risk <= 1.0:
            raise RecordError(f"risk_score {risk} outside [0, 1]")
        object.__setattr__(self, "risk_score", risk)
        object.__setattr__(self, "alerts", tuple(
            a if isinstance(a, Alert) else Alert(**a) for a in self.alerts))
        object.__setattr__(self, "prompts_issued", tuple(_text("prompt", p) for p in self.prompts_issued))
        _text("location_note", self.location_note)
        if not isinstance(self.incomplete, bool):
            raise RecordError("incomplete must be a boolean")

    def alert_kinds(self) -> set[AlertKind]:
        return {a.kind for a in self.alerts}


@dataclass
class RiskConfig:
    fever_threshold_c: float = 37.3
    covid_risk_threshold: float = 0.7
    covid_class: str = "covid19"
    weighting: str = "duration"

    def __post_init__(self):
        if not 30.0 <= self.fever_threshold_c <= 45.0:
            raise ValueError(f"fever threshold {self.fever_threshold_c} outside [30, 45] C")
        if not 0.0 <= self.covid_risk_threshold <= 1.0:
            raise ValueError("covid_risk_threshold must be in [0, 1]")
        if self.weighting != "duration":
            raise ValueError(f"unsupported weighting {self.weighting!r}")


def risk_score(events: Sequence[EventEntry], covid_class: str = "covid19") -> float:
    """Duration-weighted mean of per-event COVID-19 probability; 0 with no events."""
    total = sum(e.duration_s for e in events)
    if not events or total <= 0:
        return 0.0
    try:
        weighted = sum(e.duration_s * e.probability_of(covid_class) for e in events)
    except KeyError:
        raise ValueError(f"event lacks a probability for class {covid_class!r}") from None
    return min(1.0, max(0.0, weighted / total))


def apply_rules(record: EncounterRecord, config: RiskConfig | None = None) -> EncounterRecord:
    """Recompute alerts and prompts from scratch; the temperature rule ignores cough results."""
    config = config or RiskConfig()
    alerts: list[Alert] = []
    prompts: list[str] = []
    incomplete = record.temperature_c is None
    if not incomplete and record.temperature_c >= config.fever_threshold_c:
        alerts.append(Alert(AlertKind.ABNORMAL_TEMPERATURE,
                            f"temperature {record.temperature_c:.1f} C >= {config.fever_threshold_c:.1f} C"))
    if not record.events:
        alerts.append(Alert(AlertKind.NO_COUGH_CAPTURED, "no cough detected during the encounter"))
        prompts.append(COUGH_PROMPT)
    elif record.risk_score >= config.covid_risk_threshold:
        alerts.append(Alert(AlertKind.HIGH_COVID_RISK,
                            f"risk score {record.risk_score:.3f} >= {config.covid_risk_threshold:.3f}"))
    return replace(record, alerts=tuple(alerts), prompts_issued=tuple(prompts), incomplete=incomplete)


# -- serialization -----------------------------------------------------------------

def _event_dict(e: EventEntry) -> dict:
    return {
        "start_s": e.start_s, "end_s": e.end_s, "frame_start": e.frame_start, "frame_stop": e.frame_stop,
        "peak_score": e.peak_score, "predicted_class": e.predicted_class,
        "scores": [{"class_name": s.class_name, "similarity": s.similarity, "probability": s.probability}
                   for s in e.scores],
    }


def record_to_dict(r: EncounterRecord) -> dict:
    demo = None if r.demographics is None else {"age": r.demographics.age, "sex": r.demographics.sex}
    return {
        "schema_version": SCHEMA_VERSION,
        "session_id": r.session_id,
        "timestamp": r.timestamp,
        "temperature_c": r.temperature_c,
        "demographics": demo,
        "location_note": r.location_note,
        "audio_refs": list(r.audio_refs),
        "events": [_event_dict(e) for e in r.events],
        "risk_score": r.risk_score,
        "alerts": [{"kind": a.kind.value, "detail": a.detail} for a in r.alerts],
        "prompts_issued": list(r.prompts_issued),
        "incomplete": r.incomplete,
    }


def emit_record(record: EncounterRecord) -> str:
    return json.dumps(record_to_dict(record), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def parse_record(text: str) -> EncounterRecord:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecordError(f"record is not valid JSON: {exc}") from exc
    version = d.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise RecordError(f"unsupported record schema {version!r}")
    try:
        d["events"] = tuple(EventEntry(**{**e, "scores": tuple(ScoreEntry(**s) for s in e["scores"])})
                            for e in d["events"])
        return EncounterRecord(**d)
    except (TypeError, KeyError) as exc:
        raise RecordError(f"record does not match the schema: {exc}") from exc


# -- store ----------------------------------------------------------------------------

class RecordStore:
    """Append-only directory of ``<session_id>.json`` files with a JSON-lines index."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @property
    def index_path(self) -> Path:
        return self.directory / INDEX_FILE

    def path_for(self, session_id: str) -> Path:
        return self.directory / f"{session_id}.json"

    def append(self, record: EncounterRecord) -> Path:
        path = self.path_for(record.session_id)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        tmp.write_text(emit_record(record))
        try:
            # link fails if the session already exists, keeping the store append-only
            os.link(tmp, path)
        except FileExistsError:
            raise RecordError(f"session {record.session_id!r} already stored") from None
        finally:
            tmp.unlink()
        line = json.dumps({"session_id": record.session_id, "path": path.name,
                           "temperature_c": record.temperature_c, "risk_score": record.risk_score}) + "\n"
        fd = os.open(self.index_path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line.encode())
        finally:
            os.close(fd)
        return path

    def index(self) -> list[dict]:
        if not self.index_path.exists():
            return []
        return [json.loads(line) for line in self.index_path.read_text().splitlines() if line.strip()]

    def load(self, session_id: str) -> EncounterRecord:
        return parse_record(self.path_for(session_id).read_text())

    def query(self, session_id: str | None = None, min_risk: float | None = None,
              min_temperature: float | None = None) -> list[dict]:
        out = []
        for row in self.index():
            if session_id is not None and row["session_id"] != session_id:
                continue
            if min_risk is not None and row["risk_score"] < min_risk:
                continue
            if min_temperature is not None and (row["temperature_c"] is None or row["temperature_c"] < min_temperature):
                continue
            out.append(row)
        return out


def events_from_detection(events: Iterable, classified: Iterable[tuple[str, Sequence]]) -> tuple[EventEntry, ...]:
    """Pair detector events with their (predicted class, class scores)."""
    out = []
    for ev, (pred, scores) in zip(events, classified):
        out.append(EventEntry(
            start_s=ev.start_s, end_s=ev.end_s, frame_start=ev.frame_indices.start,
            frame_stop=ev.frame_indices.stop, peak_score=ev.peak_score, predicted_class=pred,
            scores=tuple(ScoreEntry(s.class_name, s.similarity, s.probability) for s in scores)))
    return tuple(out)
