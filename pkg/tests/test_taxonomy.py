import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wildlabel.taxonomy import (
    AnnotationCategory,
    DEFAULT_LANGUAGES,
    ExpressionLabel,
    QuerySpec,
    bundled_keyword_file,
    expand_query_templates,
    load_keyword_file,
    to_category,
    to_expression,
)


def test_expression_codes_are_stable():
    assert [l.value for l in ExpressionLabel] == list(range(7))
    assert ExpressionLabel.NEUTRAL.value == 0
    assert ExpressionLabel.ANGER.value == 6


def test_category_codes_are_stable():
    assert [c.value for c in AnnotationCategory] == list(range(10))
    assert AnnotationCategory.NONE.value == 7
    assert AnnotationCategory.UNCERTAIN.value == 8
    assert AnnotationCategory.NO_FACE.value == 9


def test_key_round_trip():
    for label in ExpressionLabel:
        assert ExpressionLabel.from_key(label.key) is label
    for cat in AnnotationCategory:
        assert AnnotationCategory.from_key(cat.key) is cat
    assert AnnotationCategory.from_key("no-face") is AnnotationCategory.NO_FACE
    with pytest.raises(ValueError):
        ExpressionLabel.from_key("bored")


def test_to_expression_examples():
    assert to_expression(AnnotationCategory.HAPPY) is ExpressionLabel.HAPPY
    assert to_expression(AnnotationCategory.NO_FACE) is None
    assert to_expression(AnnotationCategory.NEUTRAL) is ExpressionLabel.NEUTRAL
    assert to_expression(AnnotationCategory.NONE) is None
    assert to_expression(AnnotationCategory.UNCERTAIN) is None


@given(st.sampled_from(list(ExpressionLabel)))
def test_embedding_then_projection_is_identity(label):
    assert to_expression(to_category(label)) is label


def test_query_spec_validation():
    with pytest.raises(ValueError):
        QuerySpec("", "en", "x")
    with pytest.raises(ValueError):
        QuerySpec("lachender mann", "deu", "laughing man")
    with pytest.raises(ValueError):
        QuerySpec("happy face", "en", "smiling face")  # en must match
    spec = QuerySpec("lachender mann", "de", "laughing man",
                     intended_emotion=ExpressionLabel.HAPPY, gender="man")
    assert QuerySpec.from_json(spec.to_json()) == spec


def _entries(keywords, languages):
    out = []
    for emotion, keyword in keywords:
        for lang in languages:
            text = keyword if lang == "en" else f"{keyword} [{lang}]"
            out.append(QuerySpec(text, lang, keyword, intended_emotion=emotion))
    return out


def test_expand_full_product():
    entries = _entries(
        [(ExpressionLabel.HAPPY, "happy face"), (ExpressionLabel.SAD, "sad face")],
        ["en", "de", "es"])
    specs, skips = expand_query_templates(entries, ["en", "de", "es"])
    assert len(specs) == 6
    assert skips == []


def test_expand_missing_translation_reported_not_fatal():
    entries = _entries([(ExpressionLabel.HAPPY, "happy face")], ["en"])
    specs, skips = expand_query_templates(entries, ["en", "de"])
    assert len(specs) == 1
    assert len(skips) == 1
    assert skips[0].language == "de"
    assert skips[0].reason == "missing translation"


def test_expand_is_deterministic_and_ordered():
    entries = _entries(
        [(ExpressionLabel.ANGER, "angry face"),
         (ExpressionLabel.HAPPY, "laughing man"),
         (ExpressionLabel.HAPPY, "happy face")],
        ["fr", "de"])
    a1, _ = expand_query_templates(entries, ["fr", "de"])
    a2, _ = expand_query_templates(list(reversed(entries)), ["fr", "de"])
    assert a1 == a2  # pure function of the input set
    keys = [(s.intended_emotion.value, s.language, s.english_translation)
            for s in a1]
    assert keys == sorted(keys)
    payload = json.dumps([s.to_json() for s in a1])
    assert payload == json.dumps([s.to_json() for s in a2])


def test_expand_count_matches_available_translations():
    entries = _entries([(ExpressionLabel.FEAR, "fearful face")], ["en", "de"])
    entries += _entries([(ExpressionLabel.SAD, "sad face")], ["en"])
    specs, skips = expand_query_templates(entries, ["en", "de", "pt"])
    assert len(specs) == 3  # 2 + 1 available
    assert len(skips) == 3  # pt x2 missing + de missing for sad


def test_expand_requires_language():
    with pytest.raises(ValueError):
        expand_query_templates(_entries([(ExpressionLabel.SAD, "x")], ["en"]), [])


def test_large_keyword_file_expands_to_exact_query_count(tmp_path):
    # 1250 distinct keywords, each translated in exactly one language:
    # every file row becomes exactly one query.
    path = tmp_path / "keywords.csv"
    rows = ["# synthetic keyword list"]
    emotions = [l for l in ExpressionLabel if l is not ExpressionLabel.NEUTRAL]
    count = 0
    i = 0
    while count < 1250:
        emotion = emotions[i % len(emotions)]
        lang = DEFAULT_LANGUAGES[i % len(DEFAULT_LANGUAGES)]
        keyword = f"keyword {i:04d}"
        text = keyword if lang == "en" else f"{keyword} ({lang})"
        rows.append(f"{emotion.key},{lang},{text},{keyword}")
        count += 1
        i += 1
    path.write_text("\n".join(rows), encoding="utf-8")
    entries, problems = load_keyword_file(path)
    assert problems == []
    specs, skips = expand_query_templates(entries, list(DEFAULT_LANGUAGES))
    assert len(specs) == 1250


def test_bundled_keyword_file_parses_clean():
    entries, problems = load_keyword_file(bundled_keyword_file())
    assert problems == []
    # two keywords per basic emotion, six languages each
    assert len(entries) == 12 * 6
    specs, skips = expand_query_templates(entries, list(DEFAULT_LANGUAGES))
    assert len(specs) == 72 and skips == []
    genders = {s.gender for s in specs}
    assert "man" in genders and "woman" in genders


def test_keyword_file_problems_reported(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "happy,en,happy face,happy face\n"
        "joy,en,joyful,joyful\n"            # unknown emotion
        "sad,xx,cara,sad face\n"            # language not in allowlist
        "sad,en\n"                          # short row
        "happy,en,happy face,happy face\n"  # duplicate
        , encoding="utf-8")
    entries, problems = load_keyword_file(path)
    assert len(entries) == 1
    assert len(problems) == 4
