"""Core record types: source samples, the five task kinds, instruction-tuning
task records, and their line-delimited serialization.

A record file holds one JSON object per line with exactly the fields of
:class:`TaskRecord`: record_id, task, task_identifier, query, response,
media, source_sample_id.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .au import AUTrack
from .errors import ValidationError


class TaskKind(str, enum.Enum):
    MSA = "MSA"    # multimodal sentiment analysis
    ER = "ER"      # emotion recognition
    FER = "FER"    # facial expression recognition (AU caption)
    ERI = "ERI"    # emotion reason inference
    ECPE = "ECPE"  # emotion cause-pair extraction

    def __str__(self) -> str:
        return self.value


# Canonical emission order for record building.
TASK_ORDER = (TaskKind.MSA, TaskKind.ER, TaskKind.FER, TaskKind.ERI, TaskKind.ECPE)

# Literal identifier token prepended to a query to select the task.
TASK_IDENTIFIERS = {
    TaskKind.MSA: "<sentiment>",
    TaskKind.ER: "<emotion>",
    TaskKind.FER: "<caption>",
    TaskKind.ERI: "<reason>",
    TaskKind.ECPE: "<emotion cause-pair>",
}

# Tasks whose records must carry media references.
VISION_TASKS = frozenset({TaskKind.MSA, TaskKind.ER, TaskKind.FER, TaskKind.ERI})

EMOTIONS = ("anger", "disgust", "sadness", "joy", "neutral", "surprise", "fear")
SENTIMENT_CLASSES = ("negative", "neutral", "positive")

SENTIMENT_RANGE = (-3.0, 3.0)


@dataclass
class CausePair:
    """Links an emotion utterance to its cause utterance within a dialogue."""

    emotion_utterance_id: str
    cause_utterance_id: str
    emotion: str

    def key(self) -> tuple[str, str, str]:
        return (self.emotion_utterance_id, self.cause_utterance_id, self.emotion)


@dataclass
class DialogueTurn:
    utterance_id: str
    speaker: str
    text: str


@dataclass
class SourceSample:
    """One annotated source clip plus whatever labels it carries."""

    sample_id: str
    media_ref: str
    utterance_text: str
    sentiment_score: Optional[float] = None
    emotion_label: Optional[str] = None
    dialogue_context: list[DialogueTurn] = field(default_factory=list)
    cause_pairs: Optional[list[CausePair]] = None
    au_tracks: Optional[list[AUTrack]] = None


@dataclass
class TaskRecord:
    """One instruction-tuning sample in query/response/media form."""

    record_id: str
    task: TaskKind
    task_identifier: str
    query: str
    response: str
    media: list[str]
    source_sample_id: str

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "task": self.task.value,
            "task_identifier": self.task_identifier,
            "query": self.query,
            "response": self.response,
            "media": list(self.media),
            "source_sample_id": self.source_sample_id,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskRecord":
        try:
            task = TaskKind(obj["task"])
            return cls(
                record_id=obj["record_id"],
                task=task,
                task_identifier=obj["task_identifier"],
                query=obj["query"],
                response=obj["response"],
                media=list(obj.get("media", [])),
                source_sample_id=obj["source_sample_id"],
            )
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"malformed task record: {exc}") from exc


# ---------------------------------------------------------------------------
# Cause-pair response grammar: one pair per line,
#   <emotion_utterance_id> -> <cause_utterance_id> : <emotion>
# ---------------------------------------------------------------------------

_PAIR_LINE_RE = re.compile(r"^\s*(\S+)\s*->\s*(\S+)\s*:\s*(\S+)\s*$")


def format_cause_pairs(pairs: Iterable[CausePair]) -> str:
    return "\n".join(
        f"{p.emotion_utterance_id} -> {p.cause_utterance_id} : {p.emotion}" for p in pairs
    )


def parse_cause_pairs(text: str) -> list[CausePair]:
    """Extract cause pairs from free text; lines that do not match the pair
    grammar (or name an unknown emotion) are ignored."""
    pairs = []
    for line in text.splitlines():
        m = _PAIR_LINE_RE.match(line)
        if not m:
            continue
        emotion = m.group(3).lower()
        if emotion not in EMOTIONS:
            continue
        pairs.append(CausePair(m.group(1), m.group(2), emotion))
    return pairs


# ---------------------------------------------------------------------------
# Record file IO (one JSON object per line)
# ---------------------------------------------------------------------------

def write_records(records: Iterable[TaskRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def read_records(path) -> list[TaskRecord]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            records.append(TaskRecord.from_dict(obj))
    return records
