"""Facial action-unit analysis: composite frame scores, peak-frame selection
within and across characters, and AU-grounded expression captions.

Input AU tables are delimited per-frame files in the usual extractor layout
(header row; ``frame``, optional ``face_id``, and ``AU<nn>_r`` intensity
columns; extra columns are ignored).
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .errors import ConfigError, EmptyInputError, ValidationError

# FACS main action-unit codes; emotion tables may only reference these.
CANONICAL_AUS = frozenset(
    f"AU{n:02d}"
    for n in (1, 2, 4, 5, 6, 7, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18,
              20, 22, 23, 24, 25, 26, 27, 28, 43, 45)
)

DEFAULT_NEUTRAL_CAPTION = "a calm, neutral expression"

_AU_COLUMN_RE = re.compile(r"^AU(\d+)_r$")
_AU_ID_RE = re.compile(r"^AU(\d+)$")

_DATA_DIR = Path(__file__).parent / "data"


@dataclass
class AUFrame:
    """One video frame with its per-AU intensity map."""

    frame_index: int
    au_intensities: dict[str, float] = field(default_factory=dict)


@dataclass
class AUTrack:
    """Per-character frame series, ordered by increasing frame index."""

    character_id: str
    frames: list[AUFrame] = field(default_factory=list)


@dataclass
class PeakSelection:
    """The most expressive (character, frame) pair and its composite score."""

    character_id: str
    frame_index: int
    score: float


def normalize_au_id(raw: str) -> str:
    """Canonicalize an AU identifier: 'AU6', 'au06', '6' -> 'AU06'."""
    s = str(raw).strip().upper()
    if s.startswith("AU"):
        s = s[2:]
    if not s.isdigit():
        raise ValidationError(f"not an AU identifier: {raw!r}")
    return f"AU{int(s):02d}"


def _au_sort_key(au_id: str):
    m = _AU_ID_RE.match(au_id)
    return (int(m.group(1)), au_id) if m else (math.inf, au_id)


def frame_score(frame: AUFrame) -> float:
    """Composite score of a frame: the sum of all its AU intensities.

    An empty intensity map scores 0. Negative or non-finite intensities are
    invalid and raise, naming the offending AU.
    """
    total = 0.0
    for au_id, value in frame.au_intensities.items():
        if not math.isfinite(value) or value < 0:
            raise ValidationError(
                f"invalid intensity {value!r} for {au_id} at frame "
                f"{frame.frame_index}; intensities must be finite and >= 0"
            )
        total += value
    return total


def find_peak_frame(track: AUTrack) -> PeakSelection:
    """Select the frame with the highest composite score in one track.

    Ties are broken toward the lowest frame index so repeated runs always
    pick the same frame.
    """
    if not track.frames:
        raise EmptyInputError(f"track {track.character_id!r} has no frames")
    best_frame = None
    best_score = -math.inf
    for f in track.frames:
        s = frame_score(f)
        if s > best_score or (s == best_score and f.frame_index < best_frame.frame_index):
            best_frame, best_score = f, s
    return PeakSelection(track.character_id, best_frame.frame_index, best_score)


def select_final_peak(tracks: Iterable[AUTrack]) -> PeakSelection:
    """Select the overall peak across characters: the per-character peak with
    the highest composite score.

    Equivalent to an argmax over every (character, frame) pair. Cross-character
    ties go to the lexicographically smallest character id, then the lowest
    frame index. Empty tracks are skipped; all-empty input raises.
    """
    best = None
    for track in tracks:
        if not track.frames:
            continue
        peak = find_peak_frame(track)
        if best is None or peak.score > best.score or (
            peak.score == best.score
            and (peak.character_id, peak.frame_index) < (best.character_id, best.frame_index)
        ):
            best = peak
    if best is None:
        raise EmptyInputError("no non-empty tracks to select a peak from")
    return best


def frame_at(tracks: Iterable[AUTrack], selection: PeakSelection) -> AUFrame:
    """Look up the AUFrame a PeakSelection points at."""
    for track in tracks:
        if track.character_id != selection.character_id:
            continue
        for f in track.frames:
            if f.frame_index == selection.frame_index:
                return f
    raise ValidationError(
        f"selection ({selection.character_id!r}, frame {selection.frame_index}) "
        "does not exist in the given tracks"
    )


def common_aus(
    frame: AUFrame,
    emotion: str,
    table: Mapping[str, frozenset[str]],
    presence_threshold: float = 0.0,
) -> set[str]:
    """AUs shared by the frame and the emotion's predefined AU list.

    An AU counts as present in the frame when its intensity is strictly above
    ``presence_threshold``. The result is always a subset of both the
    emotion's list and the frame's active AUs.
    """
    if presence_threshold < 0:
        raise ValidationError(f"presence_threshold must be >= 0, got {presence_threshold}")
    if emotion not in table:
        raise ConfigError(f"emotion {emotion!r} has no entry in the emotion-AU table")
    return {
        au for au in table[emotion]
        if frame.au_intensities.get(au, 0.0) > presence_threshold
    }


def caption_from_aus(
    aus: Iterable[str],
    lexicon: Mapping[str, str],
    neutral_caption: str = DEFAULT_NEUTRAL_CAPTION,
) -> str:
    """Deterministic caption for a set of AUs: phrases joined in ascending
    AU order; the empty set maps to the configured neutral caption."""
    ordered = sorted(set(aus), key=_au_sort_key)
    if not ordered:
        return neutral_caption
    missing = [au for au in ordered if au not in lexicon]
    if missing:
        raise ConfigError(f"AU lexicon has no phrase for: {', '.join(missing)}")
    return ", ".join(lexicon[au] for au in ordered)


# ---------------------------------------------------------------------------
# AU table files (delimited per-frame intensities)
# ---------------------------------------------------------------------------

def parse_au_table(path) -> list[AUTrack]:
    """Parse a delimited per-frame AU intensity file into per-character tracks.

    Requires a header row with a ``frame`` column; ``face_id`` is optional
    (single-face files default to character "0"). Intensities come from the
    ``AU<nn>_r`` columns; any other column is ignored. Frames within a
    character must be unique and are returned sorted by frame index.
    """
    path = Path(path)
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty AU table (no header row)")
        header = [h.strip() for h in header]
        if "frame" not in header:
            raise ValidationError(f"{path}: AU table header has no 'frame' column")
        frame_col = header.index("frame")
        face_col = header.index("face_id") if "face_id" in header else None
        au_cols = []
        for i, name in enumerate(header):
            m = _AU_COLUMN_RE.match(name)
            if m:
                au_cols.append((i, normalize_au_id(f"AU{m.group(1)}")))

        by_character: dict[str, dict[int, AUFrame]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                frame_index = int(row[frame_col].strip())
            except (ValueError, IndexError):
                raise ValidationError(f"{path}:{line_no}: bad frame index {row[frame_col]!r}")
            if frame_index < 0:
                raise ValidationError(f"{path}:{line_no}: negative frame index {frame_index}")
            character = row[face_col].strip() if face_col is not None else "0"
            intensities = {}
            for col, au_id in au_cols:
                if col >= len(row) or not row[col].strip():
                    continue  # missing cell: AU treated as absent (intensity 0)
                try:
                    value = float(row[col])
                except ValueError:
                    raise ValidationError(f"{path}:{line_no}: non-numeric value for {au_id}")
                if not math.isfinite(value) or value < 0:
                    raise ValidationError(
                        f"{path}:{line_no}: invalid intensity {value} for {au_id}"
                    )
                intensities[au_id] = value
            frames = by_character.setdefault(character, {})
            if frame_index in frames:
                raise ValidationError(
                    f"{path}:{line_no}: duplicate frame {frame_index} for face {character!r}"
                )
            frames[frame_index] = AUFrame(frame_index, intensities)

    tracks = []
    for character in sorted(by_character):
        frames = [by_character[character][i] for i in sorted(by_character[character])]
        tracks.append(AUTrack(character, frames))
    return tracks


# ---------------------------------------------------------------------------
# Emotion-AU table and AU lexicon config files
# ---------------------------------------------------------------------------

def load_emotion_au_table(path=None) -> dict[str, frozenset[str]]:
    """Load the emotion -> AU-set mapping from YAML (packaged default if no
    path given). Every label of the seven-emotion vocabulary must be present
    and all AU ids must be canonical FACS codes."""
    from .records import EMOTIONS

    source = Path(path) if path else _DATA_DIR / "emotion_au_table.yaml"
    with open(source) as handle:
        raw = yaml.safe_load(handle) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: emotion-AU table must be a mapping")
    table = {}
    for emotion, aus in raw.items():
        if emotion not in EMOTIONS:
            raise ConfigError(f"{source}: unknown emotion label {emotion!r}")
        ids = frozenset(normalize_au_id(a) for a in (aus or []))
        bad = ids - CANONICAL_AUS
        if bad:
            raise ConfigError(f"{source}: non-canonical AU ids for {emotion}: {sorted(bad)}")
        table[emotion] = ids
    missing = [e for e in EMOTIONS if e not in table]
    if missing:
        raise ConfigError(f"{source}: missing emotion entries: {', '.join(missing)}")
    return table


def load_au_lexicon(path=None) -> dict[str, str]:
    """Load the AU -> phrase lexicon from YAML (packaged default if no path
    given)."""
    source = Path(path) if path else _DATA_DIR / "au_lexicon.yaml"
    with open(source) as handle:
        raw = yaml.safe_load(handle) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: AU lexicon must be a mapping")
    lexicon = {}
    for au_id, phrase in raw.items():
        if not isinstance(phrase, str) or not phrase.strip():
            raise ConfigError(f"{source}: empty phrase for {au_id}")
        lexicon[normalize_au_id(au_id)] = phrase.strip()
    return lexicon


def check_lexicon_covers(table: Mapping[str, frozenset[str]], lexicon: Mapping[str, str]) -> None:
    """Raise if any AU referenced by the emotion table lacks a lexicon phrase."""
    referenced = set().union(*table.values()) if table else set()
    missing = sorted(referenced - set(lexicon), key=_au_sort_key)
    if missing:
        raise ConfigError(f"AU lexicon missing phrases for: {', '.join(missing)}")
