"""Persistent records for processed images: segments, boxes, label
assignments, and provenance, serialized as canonical-JSON sidecar files.

Canonical form: UTF-8, object keys sorted ascending by code point, no
insignificant whitespace. Equal records serialize to identical bytes, so
sidecars can be compared and cached by content.

Sidecar top level: schema_version, image_id, source_path, width, height,
segments[], assignments{}, image_caption?, provenance{}. Unknown top-level
keys survive a read/write cycle untouched; unknown keys nested deeper are
dropped on read.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import lexicon
from .raster import BoundingBox, ImageGrid, MaskRLE, RleError, Segment, rle_decode

SCHEMA_VERSION = 1
LABEL_SOURCES = ("caption-derived", "tagger", "grounder", "llm", "human")
METHODS = ("M1", "M2", "M3", "M4", "M4b", "native")

_HEX64 = re.compile(r"^[0-9a-f]{64}$")
_TOP_LEVEL_KEYS = frozenset(
    {"schema_version", "image_id", "source_path", "width", "height",
     "segments", "assignments", "image_caption", "provenance"}
)


class SidecarFormatError(ValueError):
    """Structurally invalid sidecar bytes; .path is the offending location."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class SidecarValidationError(ValueError):
    """A structurally sound record that violates invariants."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class LabelAssignment:
    text: str
    confidence: float = 1.0
    source: str = "human"
    concept_id: str | None = None
    definition: str | None = None


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


def parse_timestamp(value: str) -> datetime:
    # datetime.fromisoformat on 3.10 rejects a trailing Z designator.
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    return datetime.fromisoformat(value)


@dataclass(frozen=True)
class Provenance:
    method: str
    backend_ids: dict = field(default_factory=dict)
    prompt_hashes: tuple = ()
    timestamp: str = field(default_factory=utc_timestamp)
    degraded: bool = False


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    source_path: str
    width: int
    height: int
    segments: tuple
    assignments: dict
    provenance: Provenance
    image_caption: str | None = None
    # Foreign top-level keys read from disk, re-emitted verbatim on write.
    extra: dict = field(default_factory=dict)


def image_id_for(image_bytes: bytes) -> str:
    return hashlib.sha256(image_bytes).hexdigest()


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _segment_to_obj(seg: Segment) -> dict:
    return {
        "id": seg.id,
        "bbox": seg.bbox.as_list(),
        "area": seg.area,
        "mask": {"counts": list(seg.mask.counts)},
        "contour": [[x, y] for x, y in seg.contour],
    }


def _assignment_to_obj(a: LabelAssignment) -> dict:
    obj = {"text": a.text, "confidence": a.confidence, "source": a.source}
    if a.concept_id is not None:
        obj["concept_id"] = a.concept_id
    if a.definition is not None:
        obj["definition"] = a.definition
    return obj


def record_to_obj(record: ImageRecord) -> dict:
    obj = {
        "schema_version": SCHEMA_VERSION,
        "image_id": record.image_id,
        "source_path": record.source_path,
        "width": record.width,
        "height": record.height,
        "segments": [_segment_to_obj(s) for s in record.segments],
        "assignments": {
            str(sid): [_assignment_to_obj(a) for a in items]
            for sid, items in record.assignments.items()
        },
        "provenance": {
            "method": record.provenance.method,
            "backend_ids": dict(record.provenance.backend_ids),
            "prompt_hashes": list(record.provenance.prompt_hashes),
            "timestamp": record.provenance.timestamp,
            "degraded": record.provenance.degraded,
        },
    }
    if record.image_caption is not None:
        obj["image_caption"] = record.image_caption
    for key, value in record.extra.items():
        obj.setdefault(key, value)
    return obj


def _want(obj: dict, key: str, kinds, path: str, required=True):
    if key not in obj:
        if required:
            raise SidecarFormatError(f"{path}/{key}", "missing required key")
        return None
    value = obj[key]
    if kinds is not None and not isinstance(value, kinds):
        # bool is an int subclass; never accept it where a number is wanted
        raise SidecarFormatError(f"{path}/{key}", f"unexpected type {type(value).__name__}")
    if kinds is not None and isinstance(value, bool) and bool not in _as_tuple(kinds):
        raise SidecarFormatError(f"{path}/{key}", "unexpected type bool")
    return value


def _as_tuple(kinds):
    return kinds if isinstance(kinds, tuple) else (kinds,)


def _int_list(value, n, path) -> list:
    if not isinstance(value, list) or len(value) != n or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        raise SidecarFormatError(path, f"expected a list of {n} integers")
    return value


def _segment_from_obj(obj, path: str) -> Segment:
    if not isinstance(obj, dict):
        raise SidecarFormatError(path, "segment must be an object")
    sid = _want(obj, "id", int, path)
    bx = _int_list(_want(obj, "bbox", list, path), 4, f"{path}/bbox")
    area = _want(obj, "area", int, path)
    mask_obj = _want(obj, "mask", dict, path)
    counts = _want(mask_obj, "counts", list, f"{path}/mask")
    if not all(isinstance(c, int) and not isinstance(c, bool) for c in counts):
        raise SidecarFormatError(f"{path}/mask/counts", "counts must be integers")
    contour_raw = _want(obj, "contour", list, path)
    contour = []
    for i, pt in enumerate(contour_raw):
        contour.append(tuple(_int_list(pt, 2, f"{path}/contour/{i}")))
    bbox = BoundingBox(bx[0], bx[1], bx[2], bx[3])
    mask = MaskRLE(width=bx[2], height=bx[3], counts=tuple(counts))
    return Segment(id=sid, bbox=bbox, mask=mask, area=area, contour=tuple(contour))


def _assignment_from_obj(obj, path: str) -> LabelAssignment:
    if not isinstance(obj, dict):
        raise SidecarFormatError(path, "assignment must be an object")
    text = _want(obj, "text", str, path)
    confidence = _want(obj, "confidence", (int, float), path)
    source = _want(obj, "source", str, path)
    concept_id = _want(obj, "concept_id", str, path, required=False)
    definition = _want(obj, "definition", str, path, required=False)
    return LabelAssignment(
        text=text, confidence=float(confidence), source=source,
        concept_id=concept_id, definition=definition,
    )


def record_from_obj(doc: dict) -> ImageRecord:
    """Build a record from parsed JSON with path-labeled structure errors.
    Does not check invariants; callers follow up with validate_record."""
    if not isinstance(doc, dict):
        raise SidecarFormatError("/", "top level must be an object")
    version = _want(doc, "schema_version", int, "")
    if version > SCHEMA_VERSION or version < 1:
        raise SidecarFormatError("/schema_version", f"unsupported schema version {version}")
    image_id = _want(doc, "image_id", str, "")
    source_path = _want(doc, "source_path", str, "")
    width = _want(doc, "width", int, "")
    height = _want(doc, "height", int, "")
    segs_raw = _want(doc, "segments", list, "")
    segments = tuple(
        _segment_from_obj(s, f"/segments/{i}") for i, s in enumerate(segs_raw)
    )
    assign_raw = _want(doc, "assignments", dict, "")
    assignments = {}
    for key, items in assign_raw.items():
        path = f"/assignments/{key}"
        try:
            sid = int(key)
        except ValueError:
            raise SidecarFormatError(path, "segment id key must be an integer") from None
        if not isinstance(items, list):
            raise SidecarFormatError(path, "expected a list of assignments")
        assignments[sid] = tuple(
            _assignment_from_obj(a, f"{path}/{j}") for j, a in enumerate(items)
        )
    caption = _want(doc, "image_caption", str, "", required=False)
    prov_obj = _want(doc, "provenance", dict, "")
    method = _want(prov_obj, "method", str, "/provenance")
    backend_ids = _want(prov_obj, "backend_ids", dict, "/provenance")
    for k, v in backend_ids.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise SidecarFormatError("/provenance/backend_ids", "must map strings to strings")
    hashes = _want(prov_obj, "prompt_hashes", list, "/provenance")
    if not all(isinstance(h, str) for h in hashes):
        raise SidecarFormatError("/provenance/prompt_hashes", "must be a list of strings")
    timestamp = _want(prov_obj, "timestamp", str, "/provenance")
    degraded = _want(prov_obj, "degraded", bool, "/provenance", required=False)
    provenance = Provenance(
        method=method, backend_ids=dict(backend_ids), prompt_hashes=tuple(hashes),
        timestamp=timestamp, degraded=bool(degraded) if degraded is not None else False,
    )
    extra = {k: v for k, v in doc.items() if k not in _TOP_LEVEL_KEYS}
    return ImageRecord(
        image_id=image_id, source_path=source_path, width=width, height=height,
        segments=segments, assignments=assignments, provenance=provenance,
        image_caption=caption, extra=extra,
    )


def validate_record(record: ImageRecord, image_bytes: bytes | None = None) -> list:
    """Every violated invariant, each tagged with a JSON-pointer-style path.
    An empty list means the record is valid."""
    out: list[Violation] = []
    if not _HEX64.match(record.image_id or ""):
        out.append(Violation("/image_id", "must be 64 lowercase hex digits"))
    elif image_bytes is not None and image_id_for(image_bytes) != record.image_id:
        out.append(Violation("/image_id", "does not match the image bytes"))
    if record.width < 1 or record.height < 1:
        out.append(Violation("/width", "frame must be at least 1x1"))

    seen_ids = set()
    for i, seg in enumerate(record.segments):
        base = f"/segments/{i}"
        if seg.id < 1:
            out.append(Violation(f"{base}/id", "segment id must be >= 1"))
        if seg.id in seen_ids:
            out.append(Violation(f"{base}/id", f"duplicate segment id {seg.id}"))
        seen_ids.add(seg.id)
        b = seg.bbox
        if b.w < 1 or b.h < 1:
            out.append(Violation(f"{base}/bbox", "box extent must be at least 1x1"))
            continue
        if b.x < 0 or b.y < 0 or b.x + b.w > record.width or b.y + b.h > record.height:
            out.append(Violation(f"{base}/bbox", "box extends past the frame"))
        if seg.mask.width != b.w or seg.mask.height != b.h:
            out.append(Violation(f"{base}/mask", "mask dimensions differ from bbox"))
            continue
        try:
            local = rle_decode(seg.mask)
        except RleError as exc:
            out.append(Violation(f"{base}/mask", str(exc)))
            continue
        area = int(local.sum())
        if seg.area != area:
            out.append(Violation(f"{base}/area", f"area {seg.area} != {area} set mask pixels"))
        if area == 0:
            out.append(Violation(f"{base}/mask", "mask has no set pixels"))
        else:
            # tight box: the local mask must touch all four bbox edges
            if not (local[0, :].any() and local[-1, :].any()
                    and local[:, 0].any() and local[:, -1].any()):
                out.append(Violation(f"{base}/bbox", "bbox is not tight around the mask"))
        pixels = {
            (b.x + int(x), b.y + int(y))
            for y, x in zip(*np.nonzero(local))
        }
        for j, (cx, cy) in enumerate(seg.contour):
            if (cx, cy) not in pixels:
                out.append(Violation(f"{base}/contour/{j}", "contour pixel not in mask"))
                continue
            if all((cx + dx, cy + dy) in pixels for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0))):
                out.append(Violation(f"{base}/contour/{j}", "contour pixel is interior"))

    for sid, items in record.assignments.items():
        base = f"/assignments/{sid}"
        if sid not in seen_ids:
            out.append(Violation(base, f"references absent segment id {sid}"))
        for j, a in enumerate(items):
            if not lexicon.normalize_term(a.text):
                out.append(Violation(f"{base}/{j}/text", "label text empty after normalization"))
            if not (0.0 <= a.confidence <= 1.0):
                out.append(Violation(f"{base}/{j}/confidence", "confidence outside [0,1]"))
            if a.source not in LABEL_SOURCES:
                out.append(Violation(f"{base}/{j}/source", f"unknown source {a.source!r}"))

    prov = record.provenance
    if prov.method not in METHODS:
        out.append(Violation("/provenance/method", f"unknown method {prov.method!r}"))
    try:
        parse_timestamp(prov.timestamp)
    except (ValueError, TypeError):
        out.append(Violation("/provenance/timestamp", "not an ISO-8601 timestamp"))
    for k, h in enumerate(prov.prompt_hashes):
        if not _HEX64.match(h):
            out.append(Violation(f"/provenance/prompt_hashes/{k}", "not a sha256 hex digest"))
    return out


def record_to_bytes(record: ImageRecord) -> bytes:
    violations = validate_record(record)
    if violations:
        raise SidecarValidationError(violations)
    return canonical_json_bytes(record_to_obj(record))


def write_sidecar(record: ImageRecord, destination) -> bytes:
    """Validate, canonicalize, and persist. The file appears atomically
    (temp file + rename), so readers never see a partial sidecar."""
    data = record_to_bytes(record)
    destination = os.fspath(destination)
    directory = os.path.dirname(destination) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, destination)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return data


def read_sidecar(data: bytes | str) -> ImageRecord:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SidecarFormatError("/", f"invalid JSON: {exc}") from exc
    record = record_from_obj(doc)
    violations = validate_record(record)
    if violations:
        raise SidecarValidationError(violations)
    return record


def load_sidecar(path) -> ImageRecord:
    with open(path, "rb") as fh:
        return read_sidecar(fh.read())


def sidecar_path(image_path) -> str:
    return os.fspath(image_path) + ".segments.json"


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in integer pixel counts."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(ix, 0) * max(iy, 0)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union else 0.0


def render_overlay(grid: ImageGrid, record: ImageRecord) -> ImageGrid:
    """Copy of the grid with contour pixels at 255 and bbox border pixels
    at 0; boxes paint after contours where the two overlap."""
    if grid.width != record.width or grid.height != record.height:
        raise ValueError("grid dimensions do not match the record frame")
    px = np.array(grid.pixels, dtype=np.uint8)
    for seg in record.segments:
        for x, y in seg.contour:
            px[y, x] = 255
    for seg in record.segments:
        b = seg.bbox
        px[b.y, b.x:b.x + b.w] = 0
        px[b.y + b.h - 1, b.x:b.x + b.w] = 0
        px[b.y:b.y + b.h, b.x] = 0
        px[b.y:b.y + b.h, b.x + b.w - 1] = 0
    return ImageGrid(px)


@dataclass(frozen=True)
class Treatise:
    title: str
    language: str
    year: int
    images: tuple

    @property
    def count(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class CorpusManifest:
    treatises: tuple
    year_range: tuple | None = None

    @property
    def total_images(self) -> int:
        return sum(t.count for t in self.treatises)


def load_manifest(data: bytes | str) -> CorpusManifest:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("treatises"), list):
        raise ManifestError('top level must be {"treatises": [...]}')
    year_range = None
    if "year_range" in doc:
        yr = doc["year_range"]
        if (not isinstance(yr, list) or len(yr) != 2
                or not all(isinstance(v, int) for v in yr) or yr[0] > yr[1]):
            raise ManifestError("year_range must be [min, max] with min <= max")
        year_range = (yr[0], yr[1])
    treatises = []
    for i, raw in enumerate(doc["treatises"]):
        where = f"treatises[{i}]"
        if not isinstance(raw, dict):
            raise ManifestError(f"{where} must be an object")
        title = raw.get("title")
        language = raw.get("language")
        year = raw.get("year")
        images = raw.get("images")
        if not isinstance(title, str) or not title:
            raise ManifestError(f"{where}.title must be a non-empty string")
        if not isinstance(language, str) or not language:
            raise ManifestError(f"{where}.language must be a non-empty string")
        if not isinstance(year, int) or isinstance(year, bool):
            raise ManifestError(f"{where}.year must be an integer")
        if not isinstance(images, list) or not all(isinstance(p, str) for p in images):
            raise ManifestError(f"{where}.images must be a list of paths")
        if "count" in raw and raw["count"] != len(images):
            raise ManifestError(f"{where}.count does not match the image list")
        if year_range is not None and not (year_range[0] <= year <= year_range[1]):
            raise ManifestError(f"{where}.year {year} outside declared range")
        treatises.append(Treatise(title=title, language=language, year=year, images=tuple(images)))
    return CorpusManifest(treatises=tuple(treatises), year_range=year_range)
