"""Persistent image store: JSONL manifest plus content-addressed blobs.

Workspace layout (all paths relative to the workspace root):

    manifest.jsonl   one JSON object per line, LF-terminated, UTF-8
    blobs/<first2>/<hash>
    catalog.lock     advisory single-writer lock

Manifest lines are full `ImageRecord` snapshots; the last line for an
image_id wins. A line of the form ``{"image_id": X, "merged_into": Y}`` is a
tombstone: record X was merged into Y after their blobs turned out to be
byte-identical. `compact()` rewrites the manifest to one line per live
record.

Identity: a record's image_id is the sha256 of its blob once downloaded,
and the sha256 of its normalized URL before that (records must exist before
bytes do). URL normalization lowercases scheme and host, strips the
fragment, and keeps the query string.

Concurrency: single writer (advisory flock on catalog.lock), any number of
readers; a reader sees the snapshot loaded at open time.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import time
import urllib.parse
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator

from .errors import WildlabelError
from .facegate import FaceInstance
from .taxonomy import AnnotationCategory, ExpressionLabel, QuerySpec

MANIFEST_NAME = "manifest.jsonl"
LOCK_NAME = "catalog.lock"
BLOB_DIR = "blobs"


class CatalogLockedError(WildlabelError):
    """Another writer holds the workspace lock."""


class DownloadStatus(Enum):
    PENDING = "pending"
    DOWNLOADED = "downloaded"
    FAILED = "failed"


class Split(Enum):
    UNASSIGNED = "unassigned"
    TRAIN = "train"
    TEST = "test"


class ResolutionMethod(Enum):
    AGREEMENT = "agreement"
    QUERY_FAVORED = "query_favored"
    RANDOM_PICK = "random_pick"


@dataclass(frozen=True)
class AnnotationResponse:
    """One annotator's category choice for one image."""

    category: AnnotationCategory
    annotator_id: str
    submitted_at: str  # ISO-8601 UTC

    def to_json(self) -> dict:
        return {
            "annotator": self.annotator_id,
            "category": self.category.key,
            "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationResponse":
        return cls(
            category=AnnotationCategory.from_key(obj["category"]),
            annotator_id=obj["annotator"],
            submitted_at=obj["submitted_at"],
        )


@dataclass(frozen=True)
class ResolvedLabel:
    """Adjudicated ground truth with the rule that produced it."""

    category: AnnotationCategory
    method: ResolutionMethod
    rng_seed_used: int | None = None

    def __post_init__(self):
        if self.method is ResolutionMethod.RANDOM_PICK and self.rng_seed_used is None:
            raise ValueError("random_pick resolutions must record their seed")

    def to_json(self) -> dict:
        return {
            "category": self.category.key,
            "method": self.method.value,
            "rng_seed_used": self.rng_seed_used,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ResolvedLabel":
        return cls(
            category=AnnotationCategory.from_key(obj["category"]),
            method=ResolutionMethod(obj["method"]),
            rng_seed_used=obj.get("rng_seed_used"),
        )


@dataclass
class ImageRecord:
    image_id: str
    urls: list[str]
    provenance: list[QuerySpec] = field(default_factory=list)
    download_status: DownloadStatus = DownloadStatus.PENDING
    failure_reason: str | None = None
    content_hash: str | None = None
    blob_path: str | None = None
    faces: list[FaceInstance] = field(default_factory=list)
    gate_kept: bool | None = None
    gate_reason: str | None = None
    annotations: list[AnnotationResponse] = field(default_factory=list)
    resolved: ResolvedLabel | None = None
    split: Split = Split.UNASSIGNED

    def primary_intended_emotion(self) -> ExpressionLabel | None:
        """The intended emotion of the earliest provenance query that has
        one; used for stratification, resolution and noisy labels."""
        for query in self.provenance:
            if query.intended_emotion is not None:
                return query.intended_emotion
        return None

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "urls": list(self.urls),
            "provenance": [q.to_json() for q in self.provenance],
            "download_status": self.download_status.value,
            "failure_reason": self.failure_reason,
            "content_hash": self.content_hash,
            "blob_path": self.blob_path,
            "faces": [f.to_json() for f in self.faces],
            "gate_kept": self.gate_kept,
            "gate_reason": self.gate_reason,
            "annotations": [a.to_json() for a in self.annotations],
            "resolved": self.resolved.to_json() if self.resolved else None,
            "split": self.split.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImageRecord":
        return cls(
            image_id=obj["image_id"],
            urls=list(obj["urls"]),
            provenance=[QuerySpec.from_json(q) for q in obj.get("provenance", [])],
            download_status=DownloadStatus(obj.get("download_status", "pending")),
            failure_reason=obj.get("failure_reason"),
            content_hash=obj.get("content_hash"),
            blob_path=obj.get("blob_path"),
            faces=[FaceInstance.from_json(f) for f in obj.get("faces", [])],
            gate_kept=obj.get("gate_kept"),
            gate_reason=obj.get("gate_reason"),
            annotations=[AnnotationResponse.from_json(a)
                         for a in obj.get("annotations", [])],
            resolved=(ResolvedLabel.from_json(obj["resolved"])
                      if obj.get("resolved") else None),
            split=Split(obj.get("split", "unassigned")),
        )


@dataclass(frozen=True)
class FunnelStats:
    """Counts along the harvest funnel; every field is a brute-force count
    over the live records."""

    records: int = 0
    urls: int = 0
    pending: int = 0
    downloaded: int = 0
    failed: int = 0
    gated: int = 0
    kept: int = 0
    dropped: int = 0
    annotated: int = 0
    doubly_annotated: int = 0
    resolved: int = 0
    split_train: int = 0
    split_test: int = 0

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass(frozen=True)
class Violation:
    image_id: str | None
    kind: str
    detail: str


def normalize_url(url: str) -> str:
    """Lowercase scheme/host, strip the fragment, keep the query string."""
    parts = urllib.parse.urlsplit(url.strip())
    if parts.scheme not in ("http", "https"):
        raise ValueError(f"unsupported or missing scheme in {url!r}")
    if not parts.netloc:
        raise ValueError(f"missing host in {url!r}")
    return urllib.parse.urlunsplit(
        (parts.scheme.lower(), parts.netloc.lower(), parts.path, parts.query, ""))


def url_id(url: str) -> str:
    return hashlib.sha256(normalize_url(url).encode("utf-8")).hexdigest()


def content_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def blob_relpath(digest: str) -> str:
    return f"{BLOB_DIR}/{digest[:2]}/{digest}"


def utcnow_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + (
        "%.6fZ" % (time.time() % 1))[1:]


@dataclass(frozen=True)
class UpsertResult:
    image_id: str
    created: bool
    provenance_added: bool


class Catalog:
    """Single-writer view of one workspace. Use as a context manager."""

    def __init__(self, workspace: str | Path, writable: bool = False):
        self.workspace = Path(workspace)
        self.writable = writable
        self._records: dict[str, ImageRecord] = {}
        self._order: list[str] = []
        self._url_index: dict[str, str] = {}
        self._lock_fh = None
        self._manifest_fh = None
        self.appends = 0  # manifest lines written by this instance
        self._open()

    # -- lifecycle ---------------------------------------------------------

    def _open(self):
        self.workspace.mkdir(parents=True, exist_ok=True)
        if self.writable:
            lock_path = self.workspace / LOCK_NAME
            self._lock_fh = open(lock_path, "a+")
            try:
                fcntl.flock(self._lock_fh.fileno(),
                            fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                self._lock_fh.close()
                self._lock_fh = None
                raise CatalogLockedError(
                    f"workspace {self.workspace} is locked by another writer")
        self._load_manifest()
        if self.writable:
            self._manifest_fh = open(self.manifest_path, "a", encoding="utf-8")

    def close(self):
        if self._manifest_fh:
            self._manifest_fh.close()
            self._manifest_fh = None
        if self._lock_fh:
            fcntl.flock(self._lock_fh.fileno(), fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def manifest_path(self) -> Path:
        return self.workspace / MANIFEST_NAME

    def _load_manifest(self):
        self._records.clear()
        self._order.clear()
        if not self.manifest_path.exists():
            return
        with open(self.manifest_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                image_id = obj["image_id"]
                if obj.get("merged_into"):
                    self._records.pop(image_id, None)
                    if image_id in self._order:
                        self._order.remove(image_id)
                    continue
                if image_id not in self._records:
                    self._order.append(image_id)
                self._records[image_id] = ImageRecord.from_json(obj)
        self._rebuild_url_index()

    def _rebuild_url_index(self):
        self._url_index = {}
        for record in self._records.values():
            for url in record.urls:
                self._url_index[normalize_url(url)] = record.image_id

    # -- write plumbing ----------------------------------------------------

    def _require_writable(self):
        if not self.writable or self._manifest_fh is None:
            raise WildlabelError("catalog opened read-only")

    def _append_line(self, obj: dict):
        self._require_writable()
        self._manifest_fh.write(json.dumps(obj, ensure_ascii=False,
                                           sort_keys=True) + "\n")
        self._manifest_fh.flush()
        self.appends += 1

    def _put(self, record: ImageRecord, *, only_if_changed: bool = True):
        existing = self._records.get(record.image_id)
        if only_if_changed and existing is not None \
                and existing.to_json() == record.to_json():
            return False
        if record.image_id not in self._records:
            self._order.append(record.image_id)
        self._records[record.image_id] = record
        for url in record.urls:
            self._url_index[normalize_url(url)] = record.image_id
        self._append_line(record.to_json())
        return True

    def _tombstone(self, image_id: str, merged_into: str):
        self._records.pop(image_id, None)
        if image_id in self._order:
            self._order.remove(image_id)
        self._append_line({"image_id": image_id, "merged_into": merged_into})

    def compact(self):
        """Rewrite the manifest to one line per live record (atomic)."""
        self._require_writable()
        tmp = self.manifest_path.with_suffix(".jsonl.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for image_id in self._order:
                fh.write(json.dumps(self._records[image_id].to_json(),
                                    ensure_ascii=False, sort_keys=True) + "\n")
        self._manifest_fh.close()
        os.replace(tmp, self.manifest_path)
        self._manifest_fh = open(self.manifest_path, "a", encoding="utf-8")

    # -- reads -------------------------------------------------------------

    def __len__(self):
        return len(self._records)

    def __contains__(self, image_id):
        return image_id in self._records

    def get(self, image_id: str) -> ImageRecord:
        try:
            return self._records[image_id]
        except KeyError:
            raise KeyError(f"no record {image_id}") from None

    def records(self) -> Iterator[ImageRecord]:
        """Live records in first-seen order."""
        for image_id in list(self._order):
            yield self._records[image_id]

    def find_by_url(self, url: str) -> str | None:
        return self._url_index.get(normalize_url(url))

    def blob_abspath(self, record: ImageRecord) -> Path:
        if not record.blob_path:
            raise WildlabelError(f"record {record.image_id} has no blob")
        return self.workspace / record.blob_path

    def blob_bytes(self, image_id: str) -> bytes:
        return self.blob_abspath(self.get(image_id)).read_bytes()

    # -- pipeline mutations --------------------------------------------------

    def upsert_url(self, url: str, provenance: QuerySpec) -> UpsertResult:
        """Register a URL under a query. Idempotent per (url, query) pair:
        a known URL gains provenance at most once per distinct query."""
        self._require_writable()
        normalized = normalize_url(url)  # raises on malformed input
        existing_id = self._url_index.get(normalized)
        if existing_id is None:
            record = ImageRecord(image_id=url_id(url), urls=[normalized],
                                 provenance=[provenance])
            self._put(record)
            return UpsertResult(record.image_id, created=True,
                                provenance_added=True)
        record = self._records[existing_id]
        if provenance in record.provenance:
            return UpsertResult(existing_id, created=False,
                                provenance_added=False)
        updated = replace(record,
                          provenance=record.provenance + [provenance])
        self._put(updated)
        return UpsertResult(existing_id, created=False, provenance_added=True)

    def _write_blob(self, digest: str, data: bytes) -> str:
        rel = blob_relpath(digest)
        path = self.workspace / rel
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return rel

    def mark_downloaded(self, image_id: str, data: bytes) -> str:
        """Store the blob and re-key the record to its content hash.

        If another record already owns that hash (byte-identical image from
        a different URL), the two merge: URLs and provenance are unioned and
        the newer record becomes a tombstone. Returns the surviving id."""
        self._require_writable()
        record = self.get(image_id)
        digest = content_id(data)
        rel = self._write_blob(digest, data)

        target = self._records.get(digest)
        if target is not None and target.image_id != image_id:
            merged = replace(
                target,
                urls=target.urls + [u for u in record.urls
                                    if u not in target.urls],
                provenance=target.provenance
                + [q for q in record.provenance
                   if q not in target.provenance],
            )
            self._put(merged)
            self._tombstone(image_id, digest)
            return digest

        updated = replace(record, image_id=digest,
                          download_status=DownloadStatus.DOWNLOADED,
                          failure_reason=None, content_hash=digest,
                          blob_path=rel)
        if digest != image_id:
            self._put(updated)
            self._tombstone(image_id, digest)
        else:
            self._put(updated)
        return digest

    def mark_failed(self, image_id: str, reason: str):
        record = self.get(image_id)
        self._put(replace(record, download_status=DownloadStatus.FAILED,
                          failure_reason=reason))

    def set_gate(self, image_id: str, faces: list[FaceInstance],
                 kept: bool, reason: str | None = None):
        record = self.get(image_id)
        self._put(replace(record, faces=list(faces), gate_kept=kept,
                          gate_reason=reason))

    def add_annotation(self, image_id: str, response: AnnotationResponse,
                       *, overwrite: bool = False) -> bool:
        """Store one response per (image, annotator). Returns False when an
        identical or conflicting response already exists and overwrite is
        off (identical is a silent no-op, conflicting raises)."""
        record = self.get(image_id)
        existing = [a for a in record.annotations
                    if a.annotator_id == response.annotator_id]
        if existing:
            if existing[0].category == response.category:
                return False
            if not overwrite:
                raise WildlabelError(
                    f"annotator {response.annotator_id} already responded "
                    f"for {image_id}")
            annotations = [a for a in record.annotations
                           if a.annotator_id != response.annotator_id]
            annotations.append(response)
        else:
            annotations = record.annotations + [response]
        self._put(replace(record, annotations=annotations))
        return True

    def set_resolved(self, image_id: str, resolved: ResolvedLabel):
        record = self.get(image_id)
        if len(record.annotations) < 2:
            raise WildlabelError(
                f"record {image_id} has fewer than 2 annotations")
        self._put(replace(record, resolved=resolved))

    def set_split(self, image_id: str, split: Split):
        record = self.get(image_id)
        if split is not Split.UNASSIGNED:
            if record.resolved is None or \
                    record.resolved.category.value >= 7:
                raise WildlabelError(
                    f"record {image_id} has no resolved expression label")
        self._put(replace(record, split=split))

    # -- reporting ---------------------------------------------------------

    def funnel_stats(self) -> FunnelStats:
        records = urls = pending = downloaded = failed = 0
        gated = kept = dropped = annotated = doubly = resolved = 0
        train = test = 0
        for record in self.records():
            records += 1
            urls += len(record.urls)
            if record.download_status is DownloadStatus.PENDING:
                pending += 1
            elif record.download_status is DownloadStatus.DOWNLOADED:
                downloaded += 1
            else:
                failed += 1
            if record.gate_kept is not None:
                gated += 1
                if record.gate_kept:
                    kept += 1
                else:
                    dropped += 1
            if record.annotations:
                annotated += 1
            if len(record.annotations) >= 2:
                doubly += 1
            if record.resolved is not None:
                resolved += 1
            if record.split is Split.TRAIN:
                train += 1
            elif record.split is Split.TEST:
                test += 1
        return FunnelStats(records=records, urls=urls, pending=pending,
                           downloaded=downloaded, failed=failed, gated=gated,
                           kept=kept, dropped=dropped, annotated=annotated,
                           doubly_annotated=doubly, resolved=resolved,
                           split_train=train, split_test=test)

    def integrity_check(self) -> list[Violation]:
        """Re-validate every record invariant and re-hash every blob.
        I/O problems come back as violations, never exceptions."""
        violations: list[Violation] = []

        def bad(image_id, kind, detail):
            violations.append(Violation(image_id, kind, detail))

        seen_urls: dict[str, str] = {}
        for record in self.records():
            rid = record.image_id
            if not record.urls:
                bad(rid, "no_urls", "record has no URLs")
            if len(set(record.urls)) != len(record.urls):
                bad(rid, "duplicate_urls", "record lists a URL twice")
            for url in record.urls:
                try:
                    normalized = normalize_url(url)
                except ValueError as exc:
                    bad(rid, "bad_url", str(exc))
                    continue
                owner = seen_urls.setdefault(normalized, rid)
                if owner != rid:
                    bad(rid, "url_conflict",
                        f"url {normalized} also owned by {owner}")
            if record.download_status is DownloadStatus.DOWNLOADED:
                if not record.content_hash or not record.blob_path:
                    bad(rid, "missing_blob_fields",
                        "downloaded record lacks content_hash or blob_path")
                else:
                    path = self.workspace / record.blob_path
                    try:
                        digest = content_id(path.read_bytes())
                    except OSError as exc:
                        bad(rid, "blob_unreadable", str(exc))
                    else:
                        if digest != record.content_hash:
                            bad(rid, "hash_mismatch",
                                f"blob hashes to {digest[:12]}..., record "
                                f"says {record.content_hash[:12]}...")
            for face in record.faces:
                if face.landmarks is not None and len(face.landmarks.points) != 66:
                    bad(rid, "bad_landmarks",
                        f"{len(face.landmarks.points)} landmark points")
            if record.gate_kept and not any(
                    f.landmarks is not None for f in record.faces):
                bad(rid, "kept_without_landmarks",
                    "gate-kept record has no landmarked face")
            if record.resolved is not None and len(record.annotations) < 2:
                bad(rid, "resolved_without_annotations",
                    f"resolved with {len(record.annotations)} annotation(s)")
            if record.split is not Split.UNASSIGNED:
                if record.resolved is None or record.resolved.category.value >= 7:
                    bad(rid, "split_without_label",
                        "split assigned without a resolved expression label")
        return violations
