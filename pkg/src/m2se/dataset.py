"""Corpus construction: ingest annotated source samples, derive one
instruction-tuning record per satisfiable task, and report corpus statistics.

The corpus manifest is a YAML file listing per-source annotation files:

    media_root: media            # optional; prefix for relative media refs
    sources:
      - name: toy
        samples: samples.jsonl   # one JSON object per line, see below

Each sample row carries: sample_id, media_ref, utterance_text, and any of
sentiment_score, emotion_label, dialogue_context, cause_pairs, au_table
(path to a delimited AU intensity file). All paths are relative to the
manifest's directory.
"""

from __future__ import annotations

import json
import logging
import posixpath
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import yaml

from . import au
from .errors import ConfigError, ReasonGenerationError, ValidationError
from .reason import ReasonInferencer, SceneDescriber
from .records import (
    EMOTIONS,
    SENTIMENT_CLASSES,
    SENTIMENT_RANGE,
    TASK_IDENTIFIERS,
    TASK_ORDER,
    VISION_TASKS,
    CausePair,
    DialogueTurn,
    SourceSample,
    TaskKind,
    TaskRecord,
    format_cause_pairs,
    parse_cause_pairs,
)

logger = logging.getLogger(__name__)

# Published size of the full corpus this toolkit's format mirrors. Documented
# as the reference shape only; per-task counts exceed the distinct total
# because one sample can serve several tasks.
REFERENCE_CORPUS_COUNTS = {
    TaskKind.MSA: 25_859,
    TaskKind.ER: 25_859,
    TaskKind.FER: 15_870,
    TaskKind.ERI: 4_839,
    TaskKind.ECPE: 7_081,
}
REFERENCE_CORPUS_DISTINCT_TOTAL = 32_940


@dataclass
class Rejection:
    """One ingest-time schema violation; collected, never silently dropped."""

    source: str
    line_no: int
    sample_id: Optional[str]
    reason: str

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "line_no": self.line_no,
            "sample_id": self.sample_id,
            "reason": self.reason,
        }


@dataclass
class IngestResult:
    samples: list[SourceSample]
    rejections: list[Rejection]


@dataclass
class DatasetStats:
    task_counts: dict[str, int]
    distinct_samples: int
    total_records: int

    def to_dict(self) -> dict:
        return {
            "task_counts": dict(self.task_counts),
            "distinct_samples": self.distinct_samples,
            "total_records": self.total_records,
        }


@dataclass
class BuildContext:
    """Everything record building needs beyond the sample itself."""

    emotion_au_table: dict[str, frozenset[str]]
    au_lexicon: dict[str, str]
    presence_threshold: float = 0.0
    neutral_caption: str = au.DEFAULT_NEUTRAL_CAPTION
    negative_threshold: float = 0.0
    positive_threshold: float = 0.0
    describer: Optional[SceneDescriber] = None
    reasoner: Optional[ReasonInferencer] = None


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------

def _parse_cause_pair_obj(obj, turn_ids) -> CausePair:
    try:
        pair = CausePair(
            emotion_utterance_id=str(obj["emotion_utterance_id"]),
            cause_utterance_id=str(obj["cause_utterance_id"]),
            emotion=str(obj["emotion"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed cause pair {obj!r}: {exc}")
    if pair.emotion not in EMOTIONS:
        raise ValidationError(f"cause pair names unknown emotion {pair.emotion!r}")
    for uid in (pair.emotion_utterance_id, pair.cause_utterance_id):
        if uid not in turn_ids:
            raise ValidationError(f"cause pair references unknown utterance {uid!r}")
    return pair


def _parse_sample(obj: dict, manifest_dir: Path, media_root: str) -> SourceSample:
    if not isinstance(obj, dict):
        raise ValidationError("sample row is not an object")
    for key in ("sample_id", "media_ref", "utterance_text"):
        if key not in obj or not isinstance(obj[key], str) or not obj[key]:
            raise ValidationError(f"missing or empty required field {key!r}")

    sentiment = obj.get("sentiment_score")
    if sentiment is not None:
        if not isinstance(sentiment, (int, float)):
            raise ValidationError("sentiment_score must be a number")
        sentiment = float(sentiment)
        lo, hi = SENTIMENT_RANGE
        if not (lo <= sentiment <= hi):
            raise ValidationError(f"sentiment_score {sentiment} outside [{lo}, {hi}]")

    emotion = obj.get("emotion_label")
    if emotion is not None and emotion not in EMOTIONS:
        raise ValidationError(f"unknown emotion_label {emotion!r}")

    dialogue = []
    for turn in obj.get("dialogue_context") or []:
        try:
            dialogue.append(
                DialogueTurn(str(turn["utterance_id"]), str(turn["speaker"]), str(turn["text"]))
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed dialogue turn {turn!r}: {exc}")
    turn_ids = {t.utterance_id for t in dialogue}
    if len(turn_ids) != len(dialogue):
        raise ValidationError("duplicate utterance_id in dialogue_context")

    pairs = None
    if obj.get("cause_pairs") is not None:
        pairs = [_parse_cause_pair_obj(p, turn_ids) for p in obj["cause_pairs"]]

    tracks = None
    if obj.get("au_table"):
        au_path = manifest_dir / obj["au_table"]
        if not au_path.exists():
            raise ValidationError(f"au_table file not found: {obj['au_table']}")
        tracks = au.parse_au_table(au_path)

    if sentiment is None and emotion is None and not pairs:
        raise ValidationError(
            "sample carries none of sentiment_score / emotion_label / cause_pairs"
        )

    media_ref = obj["media_ref"]
    if media_root and not posixpath.isabs(media_ref) and "://" not in media_ref:
        media_ref = posixpath.join(media_root, media_ref)

    return SourceSample(
        sample_id=obj["sample_id"],
        media_ref=media_ref,
        utterance_text=obj["utterance_text"],
        sentiment_score=sentiment,
        emotion_label=emotion,
        dialogue_context=dialogue,
        cause_pairs=pairs,
        au_tracks=tracks,
    )


def ingest_corpus(manifest_path) -> IngestResult:
    """Read every annotation file named by the manifest. Malformed rows land
    in the rejection report; valid samples keep their file order."""
    manifest_path = Path(manifest_path)
    manifest_dir = manifest_path.parent
    with open(manifest_path) as handle:
        manifest = yaml.safe_load(handle) or {}
    if not isinstance(manifest, dict) or not isinstance(manifest.get("sources"), list):
        raise ConfigError(f"{manifest_path}: manifest needs a 'sources' list")
    media_root = manifest.get("media_root", "")

    samples: list[SourceSample] = []
    rejections: list[Rejection] = []
    seen_ids: set[str] = set()
    for source in manifest["sources"]:
        name = source.get("name", "?")
        samples_file = manifest_dir / source["samples"]
        with open(samples_file, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                sample_id = None
                try:
                    obj = json.loads(line)
                    if isinstance(obj, dict):
                        sample_id = obj.get("sample_id")
                    sample = _parse_sample(obj, manifest_dir, media_root)
                    if sample.sample_id in seen_ids:
                        raise ValidationError(f"duplicate sample_id {sample.sample_id!r}")
                except json.JSONDecodeError as exc:
                    rejections.append(Rejection(name, line_no, sample_id, f"invalid JSON: {exc}"))
                except ValidationError as exc:
                    rejections.append(Rejection(name, line_no, sample_id, str(exc)))
                else:
                    seen_ids.add(sample.sample_id)
                    samples.append(sample)
    return IngestResult(samples, rejections)


# ---------------------------------------------------------------------------
# Record building
# ---------------------------------------------------------------------------

def sentiment_class(score: float, negative_threshold: float = 0.0,
                    positive_threshold: float = 0.0) -> str:
    """Discretize a sentiment score: below the negative threshold is negative,
    above the positive threshold is positive, the rest (including 0) neutral."""
    if score < negative_threshold:
        return "negative"
    if score > positive_threshold:
        return "positive"
    return "neutral"


def _msa_query(sample: SourceSample) -> str:
    return (
        f'The speaker in the video says: "{sample.utterance_text}". '
        "Is the sentiment conveyed negative, neutral, or positive?"
    )


def _er_query(sample: SourceSample) -> str:
    return (
        f'The speaker in the video says: "{sample.utterance_text}". '
        f"Which emotion does the speaker express? Choose one of: {', '.join(EMOTIONS)}."
    )


def _fer_query(sample: SourceSample) -> str:
    return (
        "Describe the facial expression of the most expressive person "
        "at the most expressive moment of the video."
    )


def _eri_query(sample: SourceSample) -> str:
    if sample.emotion_label:
        return (
            f'The speaker in the video says: "{sample.utterance_text}". '
            f"Explain why the speaker feels {sample.emotion_label}."
        )
    return (
        f'The speaker in the video says: "{sample.utterance_text}". '
        "Describe the speaker's emotional state and explain what causes it."
    )


def _ecpe_query(sample: SourceSample) -> str:
    lines = [f"{t.utterance_id} ({t.speaker}): {t.text}" for t in sample.dialogue_context]
    return (
        "Here is a conversation:\n"
        + "\n".join(lines)
        + "\nList every emotion cause pair, one per line, in the form "
        "'emotion_utterance -> cause_utterance : emotion'."
    )


def generate_reason(sample: SourceSample, describer: SceneDescriber,
                    reasoner: ReasonInferencer) -> str:
    """Run the describe-then-reason chain for one sample. Backend failures are
    wrapped with the sample id so batch jobs can resume."""
    try:
        description = describer.describe(sample)
        return reasoner.infer(description, sample.utterance_text)
    except Exception as exc:  # noqa: BLE001 - backends are third-party plugins
        raise ReasonGenerationError(sample.sample_id, exc) from exc


def _fer_response(sample: SourceSample, ctx: BuildContext) -> str:
    peak = au.select_final_peak(sample.au_tracks)
    peak_frame = au.frame_at(sample.au_tracks, peak)
    shared = au.common_aus(
        peak_frame, sample.emotion_label, ctx.emotion_au_table, ctx.presence_threshold
    )
    return au.caption_from_aus(shared, ctx.au_lexicon, ctx.neutral_caption)


def build_records(sample: SourceSample, tasks: Iterable[TaskKind],
                  ctx: BuildContext) -> list[TaskRecord]:
    """Derive one record per requested task that the sample can satisfy.

    Unsatisfiable tasks are skipped with a logged reason rather than raised,
    so corpus builds always run to completion.
    """
    requested = set(tasks)
    records = []
    for task in TASK_ORDER:
        if task not in requested:
            continue
        skip = None
        query = response = None
        if task is TaskKind.MSA:
            if sample.sentiment_score is None:
                skip = "no sentiment_score"
            else:
                query = _msa_query(sample)
                response = sentiment_class(
                    sample.sentiment_score, ctx.negative_threshold, ctx.positive_threshold
                )
        elif task is TaskKind.ER:
            if sample.emotion_label is None:
                skip = "no emotion_label"
            else:
                query, response = _er_query(sample), sample.emotion_label
        elif task is TaskKind.FER:
            if not sample.au_tracks or all(not t.frames for t in sample.au_tracks):
                skip = "no AU tracks"
            elif sample.emotion_label is None:
                skip = "no emotion_label for the AU intersection"
            else:
                query, response = _fer_query(sample), _fer_response(sample, ctx)
        elif task is TaskKind.ERI:
            if ctx.describer is None or ctx.reasoner is None:
                skip = "no reason generator configured"
            else:
                query = _eri_query(sample)
                response = generate_reason(sample, ctx.describer, ctx.reasoner)
        elif task is TaskKind.ECPE:
            if not sample.cause_pairs:
                skip = "no cause_pairs"
            elif not sample.dialogue_context:
                skip = "no dialogue_context"
            else:
                query, response = _ecpe_query(sample), format_cause_pairs(sample.cause_pairs)

        if skip is not None:
            logger.info("sample %s: skipping %s (%s)", sample.sample_id, task.value, skip)
            continue
        records.append(
            TaskRecord(
                record_id=f"{sample.sample_id}:{task.value}",
                task=task,
                task_identifier=TASK_IDENTIFIERS[task],
                query=query,
                response=response,
                media=[sample.media_ref] if sample.media_ref else [],
                source_sample_id=sample.sample_id,
            )
        )
    return records


def build_corpus(samples: Iterable[SourceSample], tasks: Iterable[TaskKind],
                 ctx: BuildContext) -> list[TaskRecord]:
    records = []
    for sample in samples:
        records.extend(build_records(sample, tasks, ctx))
    return records


# ---------------------------------------------------------------------------
# Validation and statistics
# ---------------------------------------------------------------------------

def validate_record(record: TaskRecord) -> list[str]:
    """Check one record against its invariants; violations are returned as
    data, never raised."""
    violations = []
    if not record.record_id:
        violations.append("empty record_id")
    if not isinstance(record.task, TaskKind):
        violations.append(f"unknown task {record.task!r}")
        return violations
    expected = TASK_IDENTIFIERS[record.task]
    if record.task_identifier != expected:
        violations.append(
            f"task_identifier {record.task_identifier!r} does not match "
            f"{expected!r} for task {record.task.value}"
        )
    if not record.query:
        violations.append("empty query")
    if not record.response:
        violations.append("empty response")
    if record.task in VISION_TASKS and not record.media:
        violations.append(f"{record.task.value} record has no media")
    if not record.source_sample_id:
        violations.append("empty source_sample_id")
    if record.task is TaskKind.MSA and record.response not in SENTIMENT_CLASSES:
        violations.append(f"MSA response {record.response!r} is not a sentiment class")
    if record.task is TaskKind.ER and record.response not in EMOTIONS:
        violations.append(f"ER response {record.response!r} is not an emotion label")
    if record.task is TaskKind.ECPE and not parse_cause_pairs(record.response):
        violations.append("ECPE response contains no parseable cause pair")
    return violations


def dataset_stats(records: Iterable[TaskRecord]) -> DatasetStats:
    """Per-task record counts plus the distinct-sample total. The per-task
    counts sum above the distinct total whenever samples serve several tasks."""
    counts = {task.value: 0 for task in TaskKind}
    sample_ids = set()
    total = 0
    for record in records:
        counts[record.task.value] += 1
        sample_ids.add(record.source_sample_id)
        total += 1
    return DatasetStats(counts, len(sample_ids), total)


def check_corpus_shape(stats: DatasetStats) -> None:
    """Assert the structural invariant every build must satisfy: each per-task
    count is at most the distinct-sample total, which is at most their sum."""
    for task, count in stats.task_counts.items():
        if count > stats.distinct_samples:
            raise ValidationError(
                f"task {task} has {count} records but only "
                f"{stats.distinct_samples} distinct samples"
            )
    if stats.distinct_samples > stats.total_records:
        raise ValidationError(
            f"distinct samples {stats.distinct_samples} exceed "
            f"total records {stats.total_records}"
        )
