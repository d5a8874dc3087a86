"""HTTP+JSON annotation service plus task leasing.

Endpoints:

    GET  /api/next?annotator=<id>      next task, or 204 when exhausted
    POST /api/annotations              {image_id, annotator, category}
    GET  /api/image/<id>/crop.png      face crop of the task image
    GET  /api/stats                    agreement statistics
    GET  /api/progress?annotator=<id>  {done, total, remaining}
    GET  /                             annotator UI (static bundle, if built)

Task payloads are blind by construction: they are assembled from a fixed
whitelist of fields and never touch query metadata or other annotators'
responses. Errors come back as ``{"error", "detail"}`` JSON with a matching
status code.
"""

from __future__ import annotations

import io
import json
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

from PIL import Image

from .annotate import AnnotationBatch, agreement_stats, submit_response
from .catalog import Catalog
from .errors import NotReadyError, WildlabelError
from .facegate import register_crop
from .taxonomy import AnnotationCategory

DEFAULT_LEASE_SECONDS = 30 * 60

# key map shown to annotators: digits 1-9 then 0, category codes 0-9
CATEGORY_KEYS_MAP = [
    {"code": cat.value, "name": cat.key, "key": str((cat.value + 1) % 10)}
    for cat in AnnotationCategory
]

_FALLBACK_PAGE = """<!doctype html>
<html><head><meta charset="utf-8"><title>wildlabel annotation</title></head>
<body><h1>wildlabel annotation service</h1>
<p>The browser UI bundle is not built. The JSON API is live:</p>
<ul>
<li><code>GET /api/next?annotator=&lt;id&gt;</code></li>
<li><code>POST /api/annotations</code></li>
<li><code>GET /api/progress?annotator=&lt;id&gt;</code></li>
<li><code>GET /api/stats</code></li>
</ul></body></html>
"""


@dataclass
class _Lease:
    image_id: str
    expires_at: float
    answered: bool = False


class AnnotationService:
    """Thread-safe core behind the HTTP handler; usable directly in tests."""

    def __init__(self, catalog: Catalog, batch: AnnotationBatch,
                 crop_size: int = 256, crop_margin: float = 0.25,
                 lease_seconds: float = DEFAULT_LEASE_SECONDS,
                 ui_dir: str | Path | None = None):
        self.catalog = catalog
        self.batch = batch
        self.crop_size = crop_size
        self.crop_margin = crop_margin
        self.lease_seconds = lease_seconds
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._lock = threading.Lock()
        self._leases: dict[str, _Lease] = {}

    # -- task assignment ---------------------------------------------------

    def _answered_by(self, annotator_id: str) -> set[str]:
        done = set()
        for image_id in self.batch.task_order:
            record = self.catalog.get(image_id)
            if any(a.annotator_id == annotator_id for a in record.annotations):
                done.add(image_id)
        return done

    def next_task(self, annotator_id: str) -> dict | None:
        """The next unanswered image for this annotator, leased atomically.
        Re-polling returns the same task until it is answered. None when the
        batch is exhausted for this annotator."""
        if not annotator_id:
            raise WildlabelError("annotator id required")
        with self._lock:
            done = self._answered_by(annotator_id)
            lease = self._leases.get(annotator_id)
            now = time.monotonic()
            if lease and not lease.answered and lease.expires_at > now \
                    and lease.image_id not in done:
                return self._task_view(annotator_id, lease.image_id, done)
            for image_id in self.batch.task_order:
                if image_id not in done:
                    self._leases[annotator_id] = _Lease(
                        image_id, now + self.lease_seconds)
                    return self._task_view(annotator_id, image_id, done)
            self._leases.pop(annotator_id, None)
            return None

    def _task_view(self, annotator_id: str, image_id: str,
                   done: set[str]) -> dict:
        # Whitelisted payload only; nothing derived from query metadata or
        # other annotators may ever be added here.
        return {
            "image_id": image_id,
            "crop_url": f"/api/image/{image_id}/crop.png",
            "categories": CATEGORY_KEYS_MAP,
            "progress": {
                "done": len(done),
                "total": len(self.batch.task_order),
            },
        }

    def submit(self, annotator_id: str, image_id: str, category_key: str) -> dict:
        if not annotator_id:
            raise WildlabelError("annotator id required")
        category = AnnotationCategory.from_key(category_key)
        with self._lock:
            if image_id not in self.batch.image_ids():
                raise KeyError(f"image {image_id} is not part of the batch")
            record = self.catalog.get(image_id)
            existing = [a for a in record.annotations
                        if a.annotator_id == annotator_id]
            lease = self._leases.get(annotator_id)
            current = lease is not None and lease.image_id == image_id
            if existing:
                if existing[0].category == category:
                    return {"status": "duplicate", "image_id": image_id}
                if not current:
                    raise PermissionError(
                        "response is immutable once a later task was issued")
                submit_response(self.catalog, image_id, annotator_id, category,
                                overwrite=True)
                return {"status": "revised", "image_id": image_id}
            submit_response(self.catalog, image_id, annotator_id, category)
            if current:
                lease.answered = True
            return {"status": "recorded", "image_id": image_id}

    def progress(self, annotator_id: str) -> dict:
        with self._lock:
            done = len(self._answered_by(annotator_id))
        total = len(self.batch.task_order)
        return {"annotator": annotator_id, "done": done, "total": total,
                "remaining": total - done}

    def stats(self) -> dict:
        try:
            return agreement_stats(self.catalog).to_json()
        except NotReadyError:
            return {"n_pairs": 0, "detail": "no doubly-annotated images yet"}

    def crop_png(self, image_id: str) -> bytes:
        record = self.catalog.get(image_id)
        data = self.catalog.blob_bytes(image_id)
        faces = [f for f in record.faces if f.landmarks is not None] \
            or list(record.faces)
        if faces:
            arr = register_crop(data, faces[0], self.crop_size,
                                margin=self.crop_margin)
            img = Image.fromarray((arr * 255).astype("uint8").squeeze())
        else:
            img = Image.open(io.BytesIO(data)).convert("RGB")
            img = img.resize((self.crop_size, self.crop_size), Image.BILINEAR)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


_CROP_RE = re.compile(r"^/api/image/([0-9a-f]{8,64})/crop\.png$")

_STATUS_FOR = {
    KeyError: 404,
    NotReadyError: 409,
    PermissionError: 409,
    ValueError: 400,
    WildlabelError: 400,
}


def _make_handler(service: AnnotationService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # quiet by default
            pass

        def _send_json(self, obj, status=200):
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_error_json(self, exc: Exception):
            status = 500
            for etype, code in _STATUS_FOR.items():
                if isinstance(exc, etype):
                    status = code
                    break
            self._send_json({"error": type(exc).__name__, "detail": str(exc)},
                            status=status)

        def _send_bytes(self, body: bytes, content_type: str, status=200):
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            parsed = urlsplit(self.path)
            params = parse_qs(parsed.query)
            try:
                if parsed.path == "/api/next":
                    annotator = params.get("annotator", [""])[0]
                    task = service.next_task(annotator)
                    if task is None:
                        self.send_response(204)
                        self.send_header("Content-Length", "0")
                        self.end_headers()
                    else:
                        self._send_json(task)
                elif parsed.path == "/api/stats":
                    self._send_json(service.stats())
                elif parsed.path == "/api/progress":
                    annotator = params.get("annotator", [""])[0]
                    self._send_json(service.progress(annotator))
                elif (match := _CROP_RE.match(parsed.path)):
                    png = service.crop_png(match.group(1))
                    self._send_bytes(png, "image/png")
                else:
                    self._serve_static(parsed.path)
            except BrokenPipeError:
                pass
            except Exception as exc:
                self._send_error_json(exc)

        def do_POST(self):
            parsed = urlsplit(self.path)
            try:
                if parsed.path != "/api/annotations":
                    raise KeyError(f"no such endpoint {parsed.path}")
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
                result = service.submit(
                    payload.get("annotator", ""),
                    payload.get("image_id", ""),
                    payload.get("category", ""),
                )
                status = 201 if result["status"] == "recorded" else 200
                self._send_json(result, status=status)
            except BrokenPipeError:
                pass
            except Exception as exc:
                self._send_error_json(exc)

        def _serve_static(self, path: str):
            if path in ("", "/"):
                path = "/index.html"
            if service.ui_dir is not None:
                root = service.ui_dir.resolve()
                target = (root / path.lstrip("/")).resolve()
                if root in target.parents or target == root:
                    if target.is_file():
                        ctype = {
                            ".html": "text/html; charset=utf-8",
                            ".js": "text/javascript",
                            ".mjs": "text/javascript",
                            ".css": "text/css",
                            ".png": "image/png",
                            ".svg": "image/svg+xml",
                            ".map": "application/json",
                        }.get(target.suffix, "application/octet-stream")
                        self._send_bytes(target.read_bytes(), ctype)
                        return
            if path == "/index.html":
                self._send_bytes(_FALLBACK_PAGE.encode("utf-8"),
                                 "text/html; charset=utf-8")
            else:
                self._send_json({"error": "NotFound", "detail": path},
                                status=404)

    return Handler


def make_server(service: AnnotationService, port: int = 0,
                host: str = "127.0.0.1") -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), _make_handler(service))


def serve(workspace: str | Path, port: int = 8080,
          host: str = "127.0.0.1", ui_dir: str | Path | None = None,
          crop_size: int = 256) -> None:
    """Run the annotation service until interrupted. Holds the workspace
    write lock for the whole session."""
    with Catalog(workspace, writable=True) as catalog:
        batch = AnnotationBatch.load(workspace)
        service = AnnotationService(catalog, batch, crop_size=crop_size,
                                    ui_dir=ui_dir)
        server = make_server(service, port=port, host=host)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
