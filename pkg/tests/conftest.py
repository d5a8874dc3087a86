"""Shared fixtures: tiny deterministic images, a local image server with
fault endpoints, and catalog population helpers."""

from __future__ import annotations

import io
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image

from wildlabel.catalog import Catalog
from wildlabel.facegate import BoundingBox, FaceInstance, LandmarkSet
from wildlabel.taxonomy import ExpressionLabel, QuerySpec


def make_png(seed: int, size: tuple[int, int] = (24, 24)) -> bytes:
    """Deterministic, seed-unique PNG bytes."""
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 255, size=(size[1], size[0], 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def make_jpeg(seed: int, size: tuple[int, int] = (24, 24)) -> bytes:
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 255, size=(size[1], size[0], 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG")
    return buf.getvalue()


def landmark_points(box: BoundingBox = BoundingBox(2, 2, 16, 16)):
    """66 points on a grid inside the box."""
    xs = np.linspace(box.x + 1, box.x + box.width - 1, 11)
    ys = np.linspace(box.y + 1, box.y + box.height - 1, 6)
    points = [(float(x), float(y)) for y in ys for x in xs]
    return LandmarkSet(tuple(points[:66]))


def face_with_landmarks(box: BoundingBox | None = None,
                        detector: str = "fixture") -> FaceInstance:
    box = box or BoundingBox(2, 2, 16, 16)
    return FaceInstance(box, landmark_points(box), detector)


def sidecar_entry(box=(2, 2, 16, 16), with_landmarks=True) -> dict:
    entry = {"box": list(box), "landmarks": None}
    if with_landmarks:
        bb = BoundingBox(*box)
        entry["landmarks"] = landmark_points(bb).to_json()
    return entry


def query_for(emotion: ExpressionLabel, keyword: str | None = None,
              language: str = "en") -> QuerySpec:
    text = keyword or f"{emotion.key} face"
    return QuerySpec(text, language, text, intended_emotion=emotion)


def add_kept_record(catalog: Catalog, seed: int, emotion: ExpressionLabel,
                    with_blob: bool = True) -> str:
    """One gate-kept record with a landmarked face, eligible for sampling."""
    url = f"http://img.example/{emotion.key}/{seed}.png"
    rid = catalog.upsert_url(url, query_for(emotion)).image_id
    if with_blob:
        rid = catalog.mark_downloaded(rid, make_png(seed))
    catalog.set_gate(rid, [face_with_landmarks()], True)
    return rid


class _ImageHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):
        pass

    def do_GET(self):
        state = self.server.state
        with state["lock"]:
            state["counts"][self.path] = state["counts"].get(self.path, 0) + 1
            state["user_agents"].add(self.headers.get("User-Agent", ""))
            state["in_flight"] += 1
            state["max_in_flight"] = max(state["max_in_flight"],
                                         state["in_flight"])
        try:
            if self.path in state["flaky"] and state["flaky"][self.path] > 0:
                with state["lock"]:
                    state["flaky"][self.path] -= 1
                self._respond(503, b"temporarily broken", "text/plain")
            elif self.path in state["files"]:
                self._respond(200, state["files"][self.path], "image/png")
            elif self.path == "/error500":
                self._respond(500, b"boom", "text/plain")
            else:
                self._respond(404, b"not found", "text/plain")
        finally:
            with state["lock"]:
                state["in_flight"] -= 1

    def _respond(self, status, body, ctype):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class ImageServer:
    """Local HTTP server for download tests; counts requests per path."""

    def __init__(self):
        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), _ImageHandler)
        self.httpd.state = {
            "files": {}, "counts": {}, "flaky": {},
            "in_flight": 0, "max_in_flight": 0,
            "user_agents": set(),
            "lock": threading.Lock(),
        }
        self.thread = threading.Thread(target=self.httpd.serve_forever,
                                       daemon=True)
        self.thread.start()

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address
        return f"http://{host}:{port}"

    def add(self, path: str, data: bytes, fail_first: int = 0) -> str:
        self.httpd.state["files"][path] = data
        if fail_first:
            self.httpd.state["flaky"][path] = fail_first
        return self.base_url + path

    def count(self, path: str) -> int:
        return self.httpd.state["counts"].get(path, 0)

    @property
    def max_in_flight(self) -> int:
        return self.httpd.state["max_in_flight"]

    @property
    def user_agents(self) -> set[str]:
        return self.httpd.state["user_agents"]

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def image_server():
    server = ImageServer()
    yield server
    server.close()


@pytest.fixture
def workspace(tmp_path):
    return tmp_path / "ws"


@pytest.fixture
def catalog(workspace):
    with Catalog(workspace, writable=True) as cat:
        yield cat
