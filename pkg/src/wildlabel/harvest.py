"""Query fan-out to search-engine adapters and rate-limited image downloads.

Live search APIs are out of scope; the `FixtureEngine` reads result lists
from `fixtures/<engine>/<query-hash>.txt` (one URL per line) so the whole
pipeline runs hermetically. The downloader enforces a per-host token bucket
(capacity one token, refill `per_host_rate` per second), bounded worker
parallelism, and retries with jittered exponential backoff. Every HTTP
attempt is recorded in the request log so rate conformance can be audited
after the fact.
"""

from __future__ import annotations

import abc
import hashlib
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlsplit

import requests

from .catalog import Catalog, DownloadStatus
from .taxonomy import QuerySpec

DEFAULT_USER_AGENT = "wildlabel/0.1 (+dataset research crawler)"

# (magic prefix, offset) pairs accepted as image payloads
_IMAGE_MAGIC = (
    (b"\xff\xd8\xff", 0),          # JPEG
    (b"\x89PNG\r\n\x1a\n", 0),     # PNG
    (b"GIF87a", 0),
    (b"GIF89a", 0),
    (b"WEBP", 8),                  # RIFF....WEBP
)


def looks_like_image(data: bytes) -> bool:
    if len(data) < 12:
        return False
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return True
    return any(data[off:off + len(magic)] == magic
               for magic, off in _IMAGE_MAGIC if off == 0)


class EngineAdapter(abc.ABC):
    """Ordered URL search results for a query, engine order preserved."""

    name = "engine"

    @abc.abstractmethod
    def search(self, query: QuerySpec, limit: int) -> list[str]:
        ...


def query_fixture_hash(query: QuerySpec) -> str:
    return hashlib.sha256(
        f"{query.query_text}\n{query.language}".encode("utf-8")).hexdigest()[:16]


class FixtureEngine(EngineAdapter):
    """Reads `fixtures/<name>/<query-hash>.txt`; a missing file is an empty
    result, not a failure."""

    def __init__(self, name: str, fixtures_root: str | Path):
        self.name = name
        self.root = Path(fixtures_root)

    def fixture_path(self, query: QuerySpec) -> Path:
        return self.root / self.name / f"{query_fixture_hash(query)}.txt"

    def search(self, query: QuerySpec, limit: int) -> list[str]:
        path = self.fixture_path(query)
        if not path.exists():
            return []
        urls = [line.strip() for line in
                path.read_text(encoding="utf-8").splitlines() if line.strip()]
        return urls[:limit]

    @staticmethod
    def write_fixture(fixtures_root: str | Path, engine: str,
                      query: QuerySpec, urls: list[str]) -> Path:
        path = Path(fixtures_root) / engine / f"{query_fixture_hash(query)}.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(urls) + "\n", encoding="utf-8")
        return path


@dataclass(frozen=True)
class FetchPolicy:
    per_host_rate: float = 2.0     # requests per second per host
    max_parallel: int = 8
    timeout: float = 15.0
    retries: int = 2
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    backoff_jitter: float = 0.2

    def __post_init__(self):
        if self.per_host_rate <= 0 or self.max_parallel <= 0 \
                or self.timeout <= 0:
            raise ValueError("rate, parallelism and timeout must be positive")
        if not 0 <= self.retries <= 5:
            raise ValueError("retries must be between 0 and 5")


@dataclass
class EngineCounts:
    new: int = 0
    duplicate: int = 0


@dataclass
class HarvestReport:
    per_engine: dict[str, EngineCounts] = field(default_factory=dict)
    queries_run: int = 0
    urls_seen: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.errors)

    def to_json(self) -> dict:
        return {
            "per_engine": {k: {"new": v.new, "duplicate": v.duplicate}
                           for k, v in self.per_engine.items()},
            "queries_run": self.queries_run,
            "urls_seen": self.urls_seen,
            "errors": self.errors,
            "partial": self.partial,
        }


def run_harvest(queries: list[QuerySpec], adapters: list[EngineAdapter],
                limit: int, catalog: Catalog) -> HarvestReport:
    """Upsert the first `limit` URLs per (query, adapter) pair. A failing
    adapter call is logged and skipped; everything else proceeds."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    report = HarvestReport()
    for adapter in adapters:
        report.per_engine.setdefault(adapter.name, EngineCounts())
    for query in queries:
        for adapter in adapters:
            counts = report.per_engine[adapter.name]
            try:
                urls = adapter.search(query, limit)[:limit]
            except Exception as exc:
                report.errors.append(
                    f"{adapter.name}: query {query.query_text!r} failed: {exc}")
                continue
            for url in urls:
                report.urls_seen += 1
                try:
                    result = catalog.upsert_url(url, query)
                except ValueError as exc:
                    report.errors.append(f"{adapter.name}: bad url: {exc}")
                    continue
                if result.created:
                    counts.new += 1
                else:
                    counts.duplicate += 1
        report.queries_run += 1
    return report


class HostRateLimiter:
    """Per-host token bucket with capacity one: consecutive grants for one
    host are spaced at least 1/rate apart. `acquire` blocks until the slot
    time and returns it."""

    def __init__(self, rate: float):
        self.interval = 1.0 / rate
        self._next_free: dict[str, float] = {}
        self._lock = threading.Lock()

    def acquire(self, host: str) -> float:
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next_free.get(host, now))
            self._next_free[host] = slot + self.interval
        delay = slot - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        return slot


@dataclass(frozen=True)
class RequestLogEntry:
    url: str
    host: str
    attempt: int
    scheduled_at: float  # token slot (monotonic clock)
    sent_at: float       # just before the HTTP call


@dataclass
class DownloadReport:
    attempted: int = 0
    downloaded: int = 0
    failed: int = 0
    merged: int = 0
    failures: dict[str, str] = field(default_factory=dict)
    request_log: list[RequestLogEntry] = field(default_factory=list)
    wall_seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "attempted": self.attempted,
            "downloaded": self.downloaded,
            "failed": self.failed,
            "merged": self.merged,
            "failures": self.failures,
            "requests": len(self.request_log),
            "wall_seconds": self.wall_seconds,
        }


class _Fetcher:
    def __init__(self, policy: FetchPolicy, limiter: HostRateLimiter,
                 user_agent: str, log: list[RequestLogEntry],
                 log_lock: threading.Lock):
        self.policy = policy
        self.limiter = limiter
        self.user_agent = user_agent
        self.log = log
        self.log_lock = log_lock

    def fetch(self, url: str) -> tuple[bytes | None, str | None]:
        """Returns (payload, None) or (None, failure reason)."""
        host = urlsplit(url).netloc.lower()
        reason = "no attempts made"
        for attempt in range(1 + self.policy.retries):
            if attempt:
                backoff = (self.policy.backoff_base
                           * self.policy.backoff_factor ** (attempt - 1))
                jitter = 1.0 + random.uniform(-self.policy.backoff_jitter,
                                              self.policy.backoff_jitter)
                time.sleep(backoff * jitter)
            slot = self.limiter.acquire(host)
            entry = RequestLogEntry(url, host, attempt, slot, time.monotonic())
            with self.log_lock:
                self.log.append(entry)
            try:
                resp = requests.get(
                    url, timeout=self.policy.timeout,
                    headers={"User-Agent": self.user_agent})
            except requests.RequestException as exc:
                reason = f"network error: {type(exc).__name__}"
                continue
            if resp.status_code == 200:
                if not looks_like_image(resp.content):
                    return None, "not an image"
                return resp.content, None
            reason = f"http {resp.status_code}"
            if resp.status_code not in (429,) and resp.status_code < 500:
                return None, reason  # permanent client error, no retry
        return None, reason


def download_pending(catalog: Catalog, policy: FetchPolicy,
                     user_agent: str | None = None) -> DownloadReport:
    """Attempt every pending record once (plus retries). Per-URL failures
    are recorded on the record; the batch never aborts. Blocking call; the
    workspace lock keeps it single-instance."""
    pending = [(r.image_id, r.urls[0]) for r in catalog.records()
               if r.download_status is DownloadStatus.PENDING]
    report = DownloadReport()
    start = time.monotonic()
    if not pending:
        report.wall_seconds = time.monotonic() - start
        return report

    limiter = HostRateLimiter(policy.per_host_rate)
    log_lock = threading.Lock()
    fetcher = _Fetcher(policy, limiter, user_agent or DEFAULT_USER_AGENT,
                       report.request_log, log_lock)

    # Workers only fetch bytes; all catalog writes happen on this thread.
    with ThreadPoolExecutor(max_workers=policy.max_parallel) as pool:
        futures = {pool.submit(fetcher.fetch, url): (image_id, url)
                   for image_id, url in pending}
        for future in as_completed(futures):
            image_id, url = futures[future]
            report.attempted += 1
            try:
                payload, reason = future.result()
            except Exception as exc:  # defensive: fetch() should not raise
                payload, reason = None, f"internal error: {exc}"
            if payload is None:
                catalog.mark_failed(image_id, reason or "unknown failure")
                report.failed += 1
                report.failures[image_id] = reason or "unknown failure"
            else:
                new_id = catalog.mark_downloaded(image_id, payload)
                report.downloaded += 1
                if new_id != image_id and len(catalog.get(new_id).urls) > 1:
                    report.merged += 1
    report.wall_seconds = time.monotonic() - start
    return report


def check_token_bucket(log: list[RequestLogEntry], rate: float,
                       slack: float = 1e-6) -> list[str]:
    """Audit a request log against the token-bucket bound: per host,
    consecutive scheduled slots at least 1/rate apart and every send at or
    after its slot. Returns human-readable violations (empty when clean)."""
    interval = 1.0 / rate
    problems = []
    by_host: dict[str, list[RequestLogEntry]] = {}
    for entry in log:
        by_host.setdefault(entry.host, []).append(entry)
    for host, entries in by_host.items():
        entries = sorted(entries, key=lambda e: e.scheduled_at)
        for prev, cur in zip(entries, entries[1:]):
            gap = cur.scheduled_at - prev.scheduled_at
            if gap < interval - slack:
                problems.append(
                    f"{host}: slots {gap:.4f}s apart, need {interval:.4f}s")
        for entry in entries:
            if entry.sent_at < entry.scheduled_at - slack:
                problems.append(
                    f"{host}: request sent {entry.scheduled_at - entry.sent_at:.4f}s "
                    "before its slot")
    return problems
