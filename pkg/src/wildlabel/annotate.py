"""Blind double-annotation: batch sampling, adjudication, agreement stats.

Sampling is stratified by the intended emotion of each image's earliest
query. Adjudication of two responses follows a fixed precedence: agreement
wins outright; otherwise a response matching the intended query wins;
otherwise one of the two responses is picked by a seeded RNG whose seed is
recorded so the dataset stays re-derivable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import (
    AnnotationResponse,
    Catalog,
    ImageRecord,
    ResolutionMethod,
    ResolvedLabel,
    utcnow_iso,
)
from .errors import NotReadyError, WildlabelError
from .seeds import derive_seed
from .taxonomy import (
    CATEGORY_KEYS,
    NUM_CATEGORIES,
    QUERY_EMOTIONS,
    AnnotationCategory,
    ExpressionLabel,
    to_category,
)

BATCH_NAME = "batch.json"


@dataclass
class AnnotationBatch:
    """Image ids sampled per intended emotion, plus a shuffled task order
    shared by every annotator."""

    seed: int
    per_emotion: int
    strata: dict[ExpressionLabel, list[str]]
    task_order: list[str]
    warnings: list[str] = field(default_factory=list)

    def image_ids(self) -> set[str]:
        return set(self.task_order)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "per_emotion": self.per_emotion,
            "strata": {label.key: ids for label, ids in self.strata.items()},
            "task_order": list(self.task_order),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationBatch":
        return cls(
            seed=obj["seed"],
            per_emotion=obj["per_emotion"],
            strata={ExpressionLabel.from_key(k): list(v)
                    for k, v in obj["strata"].items()},
            task_order=list(obj["task_order"]),
            warnings=list(obj.get("warnings", [])),
        )

    def save(self, workspace: str | Path) -> bool:
        """Write batch.json; skipped (returns False) when the content would
        be byte-identical, so re-sampling with the same seed is a no-op."""
        path = Path(workspace) / BATCH_NAME
        payload = json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"
        if path.exists() and path.read_text(encoding="utf-8") == payload:
            return False
        path.write_text(payload, encoding="utf-8")
        return True

    @classmethod
    def load(cls, workspace: str | Path) -> "AnnotationBatch":
        path = Path(workspace) / BATCH_NAME
        if not path.exists():
            raise WildlabelError(f"no annotation batch at {path}; run sample first")
        return cls.from_json(json.loads(path.read_text(encoding="utf-8")))


def eligible_by_emotion(catalog: Catalog) -> dict[ExpressionLabel, list[str]]:
    """Gate-kept images grouped by primary intended emotion, catalog order."""
    groups: dict[ExpressionLabel, list[str]] = {}
    for record in catalog.records():
        if not record.gate_kept:
            continue
        emotion = record.primary_intended_emotion()
        if emotion is None:
            continue
        groups.setdefault(emotion, []).append(record.image_id)
    return groups


def sample_batch(catalog: Catalog, per_emotion: int, seed: int) -> AnnotationBatch:
    """Sample `per_emotion` gate-kept images per intended emotion, without
    replacement, deterministically under `seed`. Short strata are taken
    whole with a warning; the created_at stamp is derived from the seed so
    identical inputs produce byte-identical batches."""
    if per_emotion < 1:
        raise ValueError("per_emotion must be >= 1")
    eligible = eligible_by_emotion(catalog)
    emotions = sorted(set(QUERY_EMOTIONS) | set(eligible),
                      key=lambda e: e.value)
    rng = np.random.default_rng(derive_seed(seed, "batch"))
    strata: dict[ExpressionLabel, list[str]] = {}
    warnings: list[str] = []
    for emotion in emotions:
        pool = eligible.get(emotion, [])
        if len(pool) == 0:
            strata[emotion] = []
            warnings.append(f"no eligible images for {emotion.key}")
        elif len(pool) <= per_emotion:
            strata[emotion] = list(pool)
            if len(pool) < per_emotion:
                warnings.append(
                    f"only {len(pool)} eligible images for {emotion.key}, "
                    f"wanted {per_emotion}")
        else:
            picks = rng.choice(len(pool), size=per_emotion, replace=False)
            strata[emotion] = [pool[i] for i in sorted(picks)]
    all_ids = [i for emotion in emotions for i in strata[emotion]]
    order_rng = np.random.default_rng(derive_seed(seed, "task-order"))
    task_order = [all_ids[i] for i in order_rng.permutation(len(all_ids))]
    return AnnotationBatch(seed=seed, per_emotion=per_emotion, strata=strata,
                           task_order=task_order, warnings=warnings)


def submit_response(catalog: Catalog, image_id: str, annotator_id: str,
                    category: AnnotationCategory,
                    submitted_at: str | None = None,
                    overwrite: bool = False) -> bool:
    response = AnnotationResponse(category=category, annotator_id=annotator_id,
                                  submitted_at=submitted_at or utcnow_iso())
    return catalog.add_annotation(image_id, response, overwrite=overwrite)


def first_two_responses(record: ImageRecord) -> list[AnnotationResponse]:
    ordered = sorted(record.annotations,
                     key=lambda a: (a.submitted_at, a.annotator_id))
    return ordered[:2]


def resolve_pair(first: AnnotationCategory, second: AnnotationCategory,
                 intended: AnnotationCategory, seed: int) -> ResolvedLabel:
    """Adjudicate two category responses given the intended query category.

    Agreement if equal; else the intended category if exactly one response
    matches it; else a uniform pick between the two responses using the
    given seed (recorded on the result)."""
    if first == second:
        return ResolvedLabel(first, ResolutionMethod.AGREEMENT)
    if first == intended or second == intended:
        return ResolvedLabel(intended, ResolutionMethod.QUERY_FAVORED)
    pick = int(np.random.default_rng(seed).integers(2))
    return ResolvedLabel((first, second)[pick], ResolutionMethod.RANDOM_PICK,
                         rng_seed_used=seed)


def resolve(catalog: Catalog, image_id: str, base_seed: int) -> ResolvedLabel:
    """Resolve one image from its first two responses. The per-image RNG
    seed is derived from (base_seed, image_id)."""
    record = catalog.get(image_id)
    if len(record.annotations) < 2:
        raise NotReadyError(
            f"record {image_id} has {len(record.annotations)} annotation(s); "
            "need 2")
    intended = record.primary_intended_emotion()
    if intended is None:
        raise NotReadyError(f"record {image_id} has no intended emotion")
    first, second = first_two_responses(record)
    resolved = resolve_pair(first.category, second.category,
                            to_category(intended),
                            derive_seed(base_seed, f"resolve:{image_id}"))
    catalog.set_resolved(image_id, resolved)
    return resolved


def resolve_all(catalog: Catalog, base_seed: int) -> dict:
    """Resolve every doubly-annotated, still-unresolved record."""
    summary = {"resolved": 0, "already_resolved": 0, "not_ready": 0,
               "by_method": {m.value: 0 for m in ResolutionMethod}}
    for record in list(catalog.records()):
        if record.resolved is not None:
            summary["already_resolved"] += 1
            continue
        if len(record.annotations) < 2 \
                or record.primary_intended_emotion() is None:
            if record.annotations:
                summary["not_ready"] += 1
            continue
        resolved = resolve(catalog, record.image_id, base_seed)
        summary["resolved"] += 1
        summary["by_method"][resolved.method.value] += 1
    return summary


@dataclass
class AgreementStats:
    n_pairs: int
    n_agreement: int
    agreement_pct: float
    n_disagreement: int
    query_favored_pct: float | None
    cohen_kappa: float | None
    response_counts: dict[str, int]
    resolved_counts: dict[str, int]
    n_resolved: int

    def to_json(self) -> dict:
        return self.__dict__.copy()


def agreement_stats(catalog: Catalog) -> AgreementStats:
    """Raw agreement, the share of disagreements where one response matched
    the intended query, Cohen's kappa over the first two responses, and
    per-category tallies of responses and resolved labels."""
    n_pairs = n_agree = n_disagree = n_favored = 0
    first_counts = np.zeros(NUM_CATEGORIES)
    second_counts = np.zeros(NUM_CATEGORIES)
    response_counts = {key: 0 for key in CATEGORY_KEYS}
    resolved_counts = {key: 0 for key in CATEGORY_KEYS}
    n_resolved = 0
    for record in catalog.records():
        for response in record.annotations:
            response_counts[response.category.key] += 1
        if record.resolved is not None:
            resolved_counts[record.resolved.category.key] += 1
            n_resolved += 1
        if len(record.annotations) < 2:
            continue
        first, second = first_two_responses(record)
        n_pairs += 1
        first_counts[first.category.value] += 1
        second_counts[second.category.value] += 1
        if first.category == second.category:
            n_agree += 1
        else:
            n_disagree += 1
            intended = record.primary_intended_emotion()
            if intended is not None and to_category(intended) in (
                    first.category, second.category):
                n_favored += 1
    if n_pairs == 0:
        raise NotReadyError("no doubly-annotated images yet")
    po = n_agree / n_pairs
    pe = float(np.dot(first_counts / n_pairs, second_counts / n_pairs))
    kappa = None if abs(1.0 - pe) < 1e-12 else (po - pe) / (1.0 - pe)
    return AgreementStats(
        n_pairs=n_pairs,
        n_agreement=n_agree,
        agreement_pct=po * 100.0,
        n_disagreement=n_disagree,
        query_favored_pct=(None if n_disagree == 0
                           else n_favored / n_disagree * 100.0),
        cohen_kappa=kappa,
        response_counts=response_counts,
        resolved_counts=resolved_counts,
        n_resolved=n_resolved,
    )


@dataclass
class QueryConfusionResult:
    """Row-normalized shares (percent) of resolved categories per queried
    emotion. Rows are the six query emotions; empty rows are omitted."""

    emotions: list[str]
    matrix: list[list[float]]
    counts: list[list[int]]
    row_totals: list[int]
    omitted: list[str]
    categories: tuple[str, ...] = CATEGORY_KEYS

    def to_json(self) -> dict:
        return {
            "emotions": self.emotions,
            "categories": list(self.categories),
            "matrix": self.matrix,
            "counts": self.counts,
            "row_totals": self.row_totals,
            "omitted": self.omitted,
        }


def label_pairs(catalog: Catalog) -> list[tuple[ExpressionLabel, ExpressionLabel]]:
    """(true, noisy) pairs from the dual-labeled subset: resolved expression
    label paired with the intended query emotion."""
    from .taxonomy import to_expression

    pairs = []
    for record in catalog.records():
        if record.resolved is None:
            continue
        true = to_expression(record.resolved.category)
        noisy = record.primary_intended_emotion()
        if true is not None and noisy is not None:
            pairs.append((true, noisy))
    return pairs


def query_confusion(catalog: Catalog) -> QueryConfusionResult:
    counts = {emotion: np.zeros(NUM_CATEGORIES, dtype=np.int64)
              for emotion in QUERY_EMOTIONS}
    for record in catalog.records():
        if record.resolved is None:
            continue
        intended = record.primary_intended_emotion()
        if intended is None or intended not in counts:
            continue
        counts[intended][record.resolved.category.value] += 1
    emotions, matrix, count_rows, totals, omitted = [], [], [], [], []
    for emotion in QUERY_EMOTIONS:
        total = int(counts[emotion].sum())
        if total == 0:
            omitted.append(emotion.key)
            continue
        emotions.append(emotion.key)
        row = counts[emotion] / total * 100.0
        matrix.append([float(v) for v in row])
        count_rows.append([int(v) for v in counts[emotion]])
        totals.append(total)
    return QueryConfusionResult(emotions=emotions, matrix=matrix,
                                counts=count_rows, row_totals=totals,
                                omitted=omitted)
