"""Label vocabulary and query metadata.

Two label spaces coexist. Training uses the 7-way expression space
(`ExpressionLabel`, stable codes 0-6). Human annotators choose from the
10-way annotation space (`AnnotationCategory`, stable codes 0-9), which adds
None, Uncertain and NoFace. The integer codes are part of the on-disk
contract: serialized datasets remain portable as long as they never change.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence


class ExpressionLabel(IntEnum):
    """The 7-way expression space used for training and evaluation."""

    NEUTRAL = 0
    HAPPY = 1
    SAD = 2
    SURPRISE = 3
    FEAR = 4
    DISGUST = 5
    ANGER = 6

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "ExpressionLabel":
        try:
            return cls[key.strip().replace("-", "_").upper()]
        except KeyError:
            raise ValueError(f"unknown expression label {key!r}") from None


class AnnotationCategory(IntEnum):
    """The 10-way space offered to annotators.

    Codes 0-6 coincide with `ExpressionLabel`; the three extras (None,
    Uncertain, NoFace) map to nothing in the training space.
    """

    NEUTRAL = 0
    HAPPY = 1
    SAD = 2
    SURPRISE = 3
    FEAR = 4
    DISGUST = 5
    ANGER = 6
    NONE = 7
    UNCERTAIN = 8
    NO_FACE = 9

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "AnnotationCategory":
        try:
            return cls[key.strip().replace("-", "_").upper()]
        except KeyError:
            raise ValueError(f"unknown annotation category {key!r}") from None


NUM_EXPRESSIONS = len(ExpressionLabel)
NUM_CATEGORIES = len(AnnotationCategory)
EXPRESSION_KEYS = tuple(label.key for label in ExpressionLabel)
CATEGORY_KEYS = tuple(cat.key for cat in AnnotationCategory)

# The six emotions actually used as search queries (everything but neutral).
QUERY_EMOTIONS = tuple(
    label for label in ExpressionLabel if label is not ExpressionLabel.NEUTRAL
)

# Default allowlist of query languages; configurable wherever it is consumed.
DEFAULT_LANGUAGES = ("de", "en", "es", "fr", "it", "pt")


def to_expression(category: AnnotationCategory) -> ExpressionLabel | None:
    """Map an annotation category into the training space; None for the
    three non-expression categories."""
    if category.value < NUM_EXPRESSIONS:
        return ExpressionLabel(category.value)
    return None


def to_category(label: ExpressionLabel) -> AnnotationCategory:
    """Embed an expression label into the annotation space."""
    return AnnotationCategory(label.value)


@dataclass(frozen=True)
class QuerySpec:
    """One search query with its emotion/gender/age metadata."""

    query_text: str
    language: str
    english_translation: str
    intended_emotion: ExpressionLabel | None = None
    gender: str | None = None
    age: str | None = None

    def __post_init__(self):
        if not self.query_text or not self.query_text.strip():
            raise ValueError("query_text must be nonempty")
        if len(self.language) != 2 or not self.language.isalpha():
            raise ValueError(f"language must be an ISO-639-1 code, got {self.language!r}")
        if self.language == "en" and self.english_translation != self.query_text:
            raise ValueError(
                "english_translation must equal query_text for English queries"
            )
        if not self.english_translation:
            raise ValueError("english_translation must be nonempty")

    def to_json(self) -> dict:
        return {
            "query_text": self.query_text,
            "language": self.language,
            "english_translation": self.english_translation,
            "intended_emotion": (
                self.intended_emotion.key if self.intended_emotion is not None else None
            ),
            "gender": self.gender,
            "age": self.age,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QuerySpec":
        emotion = obj.get("intended_emotion")
        return cls(
            query_text=obj["query_text"],
            language=obj["language"],
            english_translation=obj["english_translation"],
            intended_emotion=ExpressionLabel.from_key(emotion) if emotion else None,
            gender=obj.get("gender"),
            age=obj.get("age"),
        )


@dataclass(frozen=True)
class SkippedKeyword:
    """A (keyword, language) pair dropped during expansion, with the reason."""

    english_keyword: str
    emotion: ExpressionLabel
    language: str
    reason: str


def load_keyword_file(
    path: str | Path,
    allowed_languages: Sequence[str] = DEFAULT_LANGUAGES,
) -> tuple[list[QuerySpec], list[str]]:
    """Parse a keyword CSV into QuerySpecs.

    Format: UTF-8, `#` comments, columns
    ``emotion,language,query_text,english_translation[,gender][,age]``.
    Bad rows are reported, not fatal. Returns (entries, problems).
    """
    entries: list[QuerySpec] = []
    problems: list[str] = []
    seen: set[tuple[ExpressionLabel, str, str]] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].lstrip().startswith("#")):
                continue
            cells = [c.strip() for c in row]
            if all(not c for c in cells):
                continue
            if len(cells) < 4:
                problems.append(f"line {lineno}: expected at least 4 columns")
                continue
            try:
                emotion = ExpressionLabel.from_key(cells[0])
                language = cells[1].lower()
                if language not in allowed_languages:
                    raise ValueError(f"language {language!r} not in allowlist")
                spec = QuerySpec(
                    query_text=cells[2],
                    language=language,
                    english_translation=cells[3],
                    intended_emotion=emotion,
                    gender=cells[4] or None if len(cells) > 4 else None,
                    age=cells[5] or None if len(cells) > 5 else None,
                )
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            key = (emotion, spec.english_translation, language)
            if key in seen:
                problems.append(f"line {lineno}: duplicate entry for {key}")
                continue
            seen.add(key)
            entries.append(spec)
    return entries, problems


def expand_query_templates(
    entries: Iterable[QuerySpec],
    languages: Sequence[str],
) -> tuple[list[QuerySpec], list[SkippedKeyword]]:
    """Expand keyword entries over the requested languages.

    A keyword is identified by (intended emotion, english translation); each
    requested language with a matching entry yields one QuerySpec, each
    missing (keyword, language) pair yields one skip report. Output order is
    deterministic: emotion code, then language code, then keyword.
    """
    if not languages:
        raise ValueError("at least one language is required")
    by_keyword: dict[tuple[ExpressionLabel, str], dict[str, QuerySpec]] = {}
    for entry in entries:
        if entry.intended_emotion is None:
            raise ValueError(f"keyword {entry.query_text!r} has no intended emotion")
        slot = by_keyword.setdefault(
            (entry.intended_emotion, entry.english_translation), {}
        )
        slot.setdefault(entry.language, entry)

    specs: list[QuerySpec] = []
    skips: list[SkippedKeyword] = []
    for (emotion, keyword), translations in by_keyword.items():
        for language in languages:
            entry = translations.get(language)
            if entry is None:
                skips.append(
                    SkippedKeyword(keyword, emotion, language, "missing translation")
                )
            else:
                specs.append(entry)
    specs.sort(
        key=lambda s: (
            s.intended_emotion.value,  # type: ignore[union-attr]
            s.language,
            s.english_translation,
            s.query_text,
        )
    )
    skips.sort(key=lambda s: (s.emotion.value, s.language, s.english_keyword))
    return specs, skips


def bundled_keyword_file() -> Path:
    """Path of the sample keyword list shipped with the package."""
    return Path(__file__).parent / "data" / "keywords_sample.csv"
