"""Face gating and crop registration behind a pluggable detector interface.

The keep rule: an image stays in the pipeline iff the detector reports at
least one face carrying landmark points. Detection itself is out of scope;
two detectors ship with the package:

* `FixtureDetector` reads sidecar files stored next to blobs, addressed by
  content hash (`blobs/ab/<hash>.faces.json`), so gating is hermetic.
* `ExternalDetector` pipes PNG bytes to an external command and expects
  sidecar JSON on stdout.

Sidecar format: a JSON list of faces, each
``{"box": [x, y, w, h], "landmarks": [[x, y] * 66] | null}``.
"""

from __future__ import annotations

import abc
import hashlib
import io
import json
import math
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
from PIL import Image

if TYPE_CHECKING:
    from .catalog import Catalog, ImageRecord

N_LANDMARKS = 66


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-space face box, top-left origin."""

    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("box width and height must be positive")

    def intersects_image(self, image_width: int, image_height: int) -> bool:
        return (self.x < image_width and self.y < image_height
                and self.x + self.width > 0 and self.y + self.height > 0)

    def to_json(self) -> list[float]:
        return [self.x, self.y, self.width, self.height]

    @classmethod
    def from_json(cls, obj: Sequence[float]) -> "BoundingBox":
        x, y, w, h = obj
        return cls(float(x), float(y), float(w), float(h))


@dataclass(frozen=True)
class LandmarkSet:
    """Exactly 66 (x, y) points in pixel coordinates, fixed index order."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) != N_LANDMARKS:
            raise ValueError(f"expected {N_LANDMARKS} points, got {len(self.points)}")
        for x, y in self.points:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError("landmark coordinates must be finite")

    def to_json(self) -> list[list[float]]:
        return [[x, y] for x, y in self.points]

    @classmethod
    def from_json(cls, obj: Sequence[Sequence[float]]) -> "LandmarkSet":
        return cls(tuple((float(x), float(y)) for x, y in obj))


@dataclass(frozen=True)
class FaceInstance:
    box: BoundingBox
    landmarks: LandmarkSet | None
    detector_name: str

    def to_json(self) -> dict:
        return {
            "box": self.box.to_json(),
            "landmarks": self.landmarks.to_json() if self.landmarks else None,
            "detector": self.detector_name,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FaceInstance":
        landmarks = obj.get("landmarks")
        return cls(
            box=BoundingBox.from_json(obj["box"]),
            landmarks=LandmarkSet.from_json(landmarks) if landmarks else None,
            detector_name=obj.get("detector", "unknown"),
        )


class FaceDetector(abc.ABC):
    """Deterministic face/landmark detector over raw image bytes."""

    name = "detector"

    @abc.abstractmethod
    def detect(self, image_bytes: bytes) -> list[FaceInstance]:
        ...


def parse_sidecar(text: str, detector_name: str) -> list[FaceInstance]:
    faces = []
    for entry in json.loads(text):
        landmarks = entry.get("landmarks")
        faces.append(FaceInstance(
            box=BoundingBox.from_json(entry["box"]),
            landmarks=LandmarkSet.from_json(landmarks) if landmarks else None,
            detector_name=detector_name,
        ))
    return faces


def sidecar_path(workspace: str | Path, content_hash: str) -> Path:
    return Path(workspace) / "blobs" / content_hash[:2] / f"{content_hash}.faces.json"


def write_sidecar(workspace: str | Path, content_hash: str,
                  faces: list[dict]) -> Path:
    path = sidecar_path(workspace, content_hash)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(faces), encoding="utf-8")
    return path


class FixtureDetector(FaceDetector):
    """Reads `<blob>.faces.json` sidecars, addressed by the sha256 of the
    image bytes. No sidecar means no faces."""

    name = "fixture"

    def __init__(self, workspace: str | Path):
        self.workspace = Path(workspace)

    def detect(self, image_bytes: bytes) -> list[FaceInstance]:
        digest = hashlib.sha256(image_bytes).hexdigest()
        path = sidecar_path(self.workspace, digest)
        if not path.exists():
            return []
        return parse_sidecar(path.read_text(encoding="utf-8"), self.name)


class ExternalDetector(FaceDetector):
    """Runs `<command>` with PNG bytes on stdin, sidecar JSON expected on
    stdout."""

    def __init__(self, command: str, timeout: float = 60.0):
        self.command = command
        self.timeout = timeout
        self.name = f"external:{shlex.split(command)[0]}"

    def detect(self, image_bytes: bytes) -> list[FaceInstance]:
        with Image.open(io.BytesIO(image_bytes)) as img:
            buf = io.BytesIO()
            img.save(buf, format="PNG")
        proc = subprocess.run(shlex.split(self.command), input=buf.getvalue(),
                              capture_output=True, timeout=self.timeout,
                              check=True)
        return parse_sidecar(proc.stdout.decode("utf-8"), self.name)


@dataclass(frozen=True)
class GateDecision:
    keep: bool
    faces: tuple[FaceInstance, ...]
    reason: str | None = None


def decide(image_bytes: bytes, detector: FaceDetector) -> GateDecision:
    """Pure keep/drop decision: keep iff at least one detected face has
    landmarks. Undecodable bytes drop with reason "decode failure"."""
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            img.load()
            width, height = img.size
    except Exception:
        return GateDecision(False, (), "decode failure")
    faces = tuple(f for f in detector.detect(image_bytes)
                  if f.box.intersects_image(width, height))
    if not faces:
        return GateDecision(False, (), "no faces")
    if not any(f.landmarks is not None for f in faces):
        return GateDecision(False, faces, "no landmarked face")
    return GateDecision(True, faces)


def gate_record(catalog: "Catalog", record: "ImageRecord",
                detector: FaceDetector) -> GateDecision:
    """Gate one downloaded record and store the decision plus faces."""
    from .catalog import DownloadStatus

    if record.download_status is not DownloadStatus.DOWNLOADED:
        raise ValueError(f"record {record.image_id} is not downloaded")
    decision = decide(catalog.blob_bytes(record.image_id), detector)
    catalog.set_gate(record.image_id, list(decision.faces), decision.keep,
                     decision.reason)
    return decision


def _expanded_box(face: FaceInstance, margin: float,
                  width: int, height: int) -> tuple[float, float, float, float]:
    box = face.box
    dx = margin * box.width
    dy = margin * box.height
    left = max(0.0, box.x - dx)
    top = max(0.0, box.y - dy)
    right = min(float(width), box.x + box.width + dx)
    bottom = min(float(height), box.y + box.height + dy)
    if right <= left or bottom <= top:
        raise ValueError("face box does not intersect the image")
    return left, top, right, bottom


def register_crop(image, face: FaceInstance, out_size: int,
                  margin: float = 0.0, grayscale: bool = False,
                  align_eyes: bool = False,
                  eye_indices: tuple[int, int] = (36, 45)) -> np.ndarray:
    """Crop a face with `margin` context per side, resample bilinearly to
    out_size x out_size, and return a float array in [0, 1] of shape
    (out_size, out_size, 1 or 3).

    `align_eyes` optionally rotates the image around the box center so the
    line through the two configured landmark indices is horizontal before
    cropping; registration is otherwise crop+resize only.
    """
    if out_size < 8:
        raise ValueError("out_size must be at least 8 pixels")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if isinstance(image, bytes):
        image = Image.open(io.BytesIO(image))
        image.load()
    if not isinstance(image, Image.Image):
        raise TypeError("image must be a PIL Image or raw bytes")
    img = image.convert("L" if grayscale else "RGB")

    if align_eyes and face.landmarks is not None:
        i, j = eye_indices
        (x1, y1), (x2, y2) = face.landmarks.points[i], face.landmarks.points[j]
        angle = math.degrees(math.atan2(y2 - y1, x2 - x1))
        center = (face.box.x + face.box.width / 2.0,
                  face.box.y + face.box.height / 2.0)
        img = img.rotate(angle, resample=Image.BILINEAR, center=center)

    bounds = _expanded_box(face, margin, img.width, img.height)
    crop = img.crop(tuple(int(round(v)) for v in bounds))
    crop = crop.resize((out_size, out_size), Image.BILINEAR)
    arr = np.asarray(crop, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr
