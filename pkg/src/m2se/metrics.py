"""Response parsing and scoring.

Sentiment uses two binary accuracy schemes: NN scores every item and puts a
gold score of exactly 0 on the non-negative side; NP drops zero-gold items
and scores negative vs positive. Label tasks use exact-match accuracy and
gold-support-weighted F1. Cause-pair extraction matches a predicted pair only
when emotion utterance, cause utterance, and emotion all agree, micro-averaged
over conversations, with a per-emotion support-weighted F1 alongside.

All values are fractions in [0, 1]; rendering to percent happens in reports.
A response that cannot be parsed is a value (never an exception) and scores
as wrong.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

from .errors import UndefinedMetricError, ValidationError
from .records import (
    EMOTIONS,
    SENTIMENT_CLASSES,
    SENTIMENT_RANGE,
    CausePair,
    TaskKind,
    parse_cause_pairs,
)


class _ParseFailure:
    """Sentinel for an unparseable response; compares equal only to itself."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "<parse failure>"


PARSE_FAILURE = _ParseFailure()

Label = Union[str, _ParseFailure]


def _match_label(text: str, labels: Sequence[str]) -> Label:
    folded = text.strip().lower()
    for label in labels:
        if folded == label:
            return label
    hits = [label for label in labels if label in folded]
    if len(hits) == 1:
        return hits[0]
    return PARSE_FAILURE


def parse_response(task: TaskKind, text: str):
    """Parse raw model output for one task. Label tasks try a case-insensitive
    exact match, then a unique-substring match. Cause-pair output parses line
    by line; free-text tasks pass through stripped."""
    if task is TaskKind.MSA:
        return _match_label(text, SENTIMENT_CLASSES)
    if task is TaskKind.ER:
        return _match_label(text, EMOTIONS)
    if task is TaskKind.ECPE:
        return parse_cause_pairs(text)
    stripped = text.strip()
    return stripped if stripped else PARSE_FAILURE


# ---------------------------------------------------------------------------
# Sentiment accuracy schemes
# ---------------------------------------------------------------------------

def _check_gold_score(score: float) -> float:
    score = float(score)
    lo, hi = SENTIMENT_RANGE
    if not math.isfinite(score) or not (lo <= score <= hi):
        raise ValidationError(f"gold sentiment score {score} outside [{lo}, {hi}]")
    return score


def _normalize_scheme(scheme: str) -> str:
    key = scheme.replace("/", "").strip().upper()
    if key not in ("NN", "NP"):
        raise ValidationError(f"unknown acc2 scheme {scheme!r}; use NN or NP")
    return key


def acc2(preds: Sequence[Label], gold: Sequence[float], scheme: str) -> float:
    """Binary sentiment accuracy. A neutral or positive prediction lands on
    the non-negative side under both schemes, so the schemes agree exactly
    whenever the gold contains no zeros."""
    if len(preds) != len(gold):
        raise ValidationError(f"{len(preds)} predictions vs {len(gold)} gold items")
    scheme = _normalize_scheme(scheme)
    correct = scored = 0
    for pred, score in zip(preds, gold):
        score = _check_gold_score(score)
        if scheme == "NP" and score == 0.0:
            continue
        scored += 1
        if isinstance(pred, _ParseFailure):
            continue
        pred_negative = pred == "negative"
        gold_negative = score < 0.0
        if pred_negative == gold_negative:
            correct += 1
    if scored == 0:
        raise UndefinedMetricError(
            f"acc2 {scheme} has no scorable items (all gold scores excluded)"
        )
    return correct / scored


def accuracy(preds: Sequence[Label], gold: Sequence[str]) -> float:
    if len(preds) != len(gold):
        raise ValidationError(f"{len(preds)} predictions vs {len(gold)} gold items")
    if not gold:
        raise UndefinedMetricError("accuracy over an empty bundle")
    correct = sum(
        1 for pred, label in zip(preds, gold)
        if not isinstance(pred, _ParseFailure) and pred == label
    )
    return correct / len(gold)


def confusion_counts(preds: Sequence[Label], gold: Sequence[str]) -> dict[tuple[str, str], int]:
    """Raw (gold, pred) counts; parse failures bucket under '<parse failure>'."""
    counts: Counter = Counter()
    for pred, label in zip(preds, gold):
        key = repr(PARSE_FAILURE) if isinstance(pred, _ParseFailure) else pred
        counts[(label, key)] += 1
    return dict(counts)


def weighted_f1(preds: Sequence[Label], gold: Sequence[str]) -> float:
    """Per-class F1 weighted by gold support. A class with zero precision and
    recall contributes an F1 of 0 rather than an error."""
    if len(preds) != len(gold):
        raise ValidationError(f"{len(preds)} predictions vs {len(gold)} gold items")
    if not gold:
        raise UndefinedMetricError("weighted F1 over an empty bundle")
    support = Counter(gold)
    total = len(gold)
    value = 0.0
    for cls, count in support.items():
        tp = sum(1 for p, g in zip(preds, gold) if g == cls and p == cls)
        fp = sum(1 for p, g in zip(preds, gold) if g != cls and p == cls)
        fn = count - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        value += (count / total) * f1
    return value


# ---------------------------------------------------------------------------
# Cause-pair extraction
# ---------------------------------------------------------------------------

@dataclass
class EcpeScores:
    precision: float
    recall: float
    f1: float
    weighted_f1: float
    gold_pairs: int
    pred_pairs: int
    matched: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "weighted_f1": self.weighted_f1,
            "gold_pairs": self.gold_pairs,
            "pred_pairs": self.pred_pairs,
            "matched": self.matched,
        }


def _pair_keys(pairs: Sequence[CausePair]) -> Counter:
    return Counter(pair.key() for pair in pairs)


def _micro(tp: int, pred_total: int, gold_total: int) -> tuple[float, float, float]:
    precision = tp / pred_total if pred_total else 0.0
    recall = tp / gold_total if gold_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def ecpe_scores(pred_by_conv: Mapping[str, Sequence[CausePair]],
                gold_by_conv: Mapping[str, Sequence[CausePair]]) -> EcpeScores:
    """Micro precision/recall/F1 over all conversations, matching pairs on the
    full (emotion utterance, cause utterance, emotion) triple, multiset-wise
    within each conversation. Weighted F1 weights each emotion's own micro F1
    by that emotion's share of the gold pairs."""
    conversations = set(pred_by_conv) | set(gold_by_conv)
    gold_total = sum(len(pairs) for pairs in gold_by_conv.values())
    if gold_total == 0:
        raise UndefinedMetricError("cause-pair scoring with no gold pairs")

    tp = pred_total = 0
    per_emotion_tp: Counter = Counter()
    per_emotion_pred: Counter = Counter()
    per_emotion_gold: Counter = Counter()
    for conv in conversations:
        pred_keys = _pair_keys(pred_by_conv.get(conv, ()))
        gold_keys = _pair_keys(gold_by_conv.get(conv, ()))
        overlap = pred_keys & gold_keys
        tp += sum(overlap.values())
        pred_total += sum(pred_keys.values())
        for (_, _, emotion), count in overlap.items():
            per_emotion_tp[emotion] += count
        for (_, _, emotion), count in pred_keys.items():
            per_emotion_pred[emotion] += count
        for (_, _, emotion), count in gold_keys.items():
            per_emotion_gold[emotion] += count

    precision, recall, f1 = _micro(tp, pred_total, gold_total)
    weighted = 0.0
    for emotion, support in per_emotion_gold.items():
        _, _, emotion_f1 = _micro(
            per_emotion_tp[emotion], per_emotion_pred[emotion], support
        )
        weighted += (support / gold_total) * emotion_f1
    return EcpeScores(precision, recall, f1, weighted, gold_total, pred_total, tp)


# ---------------------------------------------------------------------------
# Bundles and reports
# ---------------------------------------------------------------------------

@dataclass
class EvalBundle:
    task: TaskKind
    predictions: list
    gold: list
    scheme: Optional[str] = None

    def __post_init__(self):
        if len(self.predictions) != len(self.gold):
            raise ValidationError(
                f"bundle misaligned: {len(self.predictions)} predictions, "
                f"{len(self.gold)} gold"
            )


@dataclass
class MetricReport:
    task: str
    values: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)
    percent: bool = False

    def __post_init__(self):
        hi = 100.0 if self.percent else 1.0
        for name, value in self.values.items():
            if not (0.0 <= value <= hi):
                raise ValidationError(
                    f"metric {name}={value} outside [0, {hi:g}] for task {self.task}"
                )

    def as_percent(self) -> "MetricReport":
        if self.percent:
            return self
        return MetricReport(
            task=self.task,
            values={name: value * 100.0 for name, value in self.values.items()},
            counts=dict(self.counts),
            percent=True,
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "values": dict(self.values),
            "counts": dict(self.counts),
            "percent": self.percent,
        }


def _count_failures(parsed: Sequence) -> int:
    return sum(1 for item in parsed if isinstance(item, _ParseFailure))


def evaluate_bundle(bundle: EvalBundle) -> MetricReport:
    """Score one task's aligned predictions.

    Sentiment bundles carry raw gold scores and report both accuracy schemes
    (or just the one named by `scheme`). Label bundles report accuracy and
    weighted F1. Cause-pair bundles carry per-conversation pair lists, keyed
    positionally, and report the micro scores. Free-text bundles report an
    exact-match fraction only.
    """
    task = bundle.task
    if not bundle.gold:
        raise UndefinedMetricError(f"empty bundle for task {task.value}")
    if task is TaskKind.MSA:
        values = {}
        schemes = ("NN", "NP") if bundle.scheme is None else (bundle.scheme,)
        for scheme in schemes:
            values[f"acc2_{_normalize_scheme(scheme).lower()}"] = acc2(
                bundle.predictions, bundle.gold, scheme
            )
        counts = {
            "items": len(bundle.gold),
            "zero_gold": sum(1 for s in bundle.gold if float(s) == 0.0),
            "parse_failures": _count_failures(bundle.predictions),
        }
        return MetricReport(task.value, values, counts)
    if task is TaskKind.ER:
        values = {
            "accuracy": accuracy(bundle.predictions, bundle.gold),
            "weighted_f1": weighted_f1(bundle.predictions, bundle.gold),
        }
        counts = {
            "items": len(bundle.gold),
            "parse_failures": _count_failures(bundle.predictions),
        }
        return MetricReport(task.value, values, counts)
    if task is TaskKind.ECPE:
        pred_by_conv = {str(i): pairs for i, pairs in enumerate(bundle.predictions)}
        gold_by_conv = {str(i): pairs for i, pairs in enumerate(bundle.gold)}
        scores = ecpe_scores(pred_by_conv, gold_by_conv)
        values = {
            "precision": scores.precision,
            "recall": scores.recall,
            "f1": scores.f1,
            "weighted_f1": scores.weighted_f1,
        }
        counts = {
            "conversations": len(bundle.gold),
            "gold_pairs": scores.gold_pairs,
            "pred_pairs": scores.pred_pairs,
            "matched": scores.matched,
        }
        return MetricReport(task.value, values, counts)
    # Free-text tasks have no published metric; exact match is informational.
    matches = sum(
        1 for pred, gold in zip(bundle.predictions, bundle.gold)
        if not isinstance(pred, _ParseFailure) and pred == gold
    )
    return MetricReport(
        task.value,
        {"exact_match": matches / len(bundle.gold)},
        {"items": len(bundle.gold),
         "parse_failures": _count_failures(bundle.predictions)},
    )


def score_prediction_rows(rows: Sequence[Mapping], scheme: Optional[str] = None
                          ) -> dict[str, MetricReport]:
    """Group prediction rows by task, parse, and score. Sentiment rows must
    carry `gold_score` (the raw annotation) since the class label alone cannot
    feed the zero-handling rules. Each cause-pair row is one conversation."""
    by_task: dict[TaskKind, list[Mapping]] = {}
    for row in rows:
        try:
            task = TaskKind(row["task"])
        except (KeyError, ValueError):
            raise ValidationError(f"prediction row with unusable task: {row!r}")
        by_task.setdefault(task, []).append(row)

    reports = {}
    for task, task_rows in sorted(by_task.items(), key=lambda kv: kv[0].value):
        parsed = [parse_response(task, row.get("prediction", "")) for row in task_rows]
        if task is TaskKind.MSA:
            gold = []
            for row in task_rows:
                if "gold_score" not in row:
                    raise ValidationError(
                        f"sentiment row {row.get('record_id')!r} lacks gold_score"
                    )
                gold.append(float(row["gold_score"]))
            bundle = EvalBundle(task, parsed, gold, scheme=scheme)
        elif task is TaskKind.ECPE:
            gold = [parse_cause_pairs(row.get("gold", "")) for row in task_rows]
            bundle = EvalBundle(task, parsed, gold)
        else:
            bundle = EvalBundle(task, parsed, [row.get("gold", "") for row in task_rows])
        reports[task.value] = evaluate_bundle(bundle)
    return reports
