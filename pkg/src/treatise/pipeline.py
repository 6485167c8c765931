"""Orchestration of the labeling pipeline over HTTP inference backends.

Method variants:

  M1     caption the page, derive one-word tags from the caption, ground
         the tags to boxes ("caption-derived" labels)
  M2/M3  closed-vocabulary tagging, then grounding ("tagger" labels);
         M2 and M3 differ only in which backend is configured
  M4     tagging restricted to a glossary-built vocabulary seed, then
         grounding ("tagger" labels)
  M4b    the seed's definition texts are sent directly to the grounder as
         very long tags ("llm" labels); kept for comparison, flagged
         degraded in provenance
  native local watershed segmentation, no labels, no backends

Segmentation can run before or after the labeling stages; the emitted
record is identical either way except for provenance ordering, which is
what makes the ordering an implementation detail rather than a modeling
choice.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import fixtures, lexicon
from .backends import BackendClient, WireSchemaError, resolve_endpoints
from .catalog import (
    METHODS,
    ImageRecord,
    LabelAssignment,
    Provenance,
    SidecarValidationError,
    box_iou,
    canonical_json_bytes,
    image_id_for,
    utc_timestamp,
    validate_record,
)
from .raster import (
    BoundingBox,
    MaskRLE,
    Segment,
    decode_pgm,
    extract_segments,
    gradient_magnitude,
    regional_minima_markers,
    rle_decode,
    rle_encode,
    trace_contour,
    watershed,
)

DEFAULT_DOMAIN_CONTEXT = "shipbuilding or nautical"
SEGMENTATION_STAGES = ("before_labeling", "after_labeling")

# stages that must have endpoints configured, per method
_REQUIRED_STAGES = {
    "M1": ("segment", "caption", "ground"),
    "M2": ("segment", "tag", "ground"),
    "M3": ("segment", "tag", "ground"),
    "M4": ("segment", "tag", "ground"),
    "M4b": ("segment", "ground"),
    "native": (),
}

_SOURCES = {"M1": "caption-derived", "M2": "tagger", "M3": "tagger",
            "M4": "tagger", "M4b": "llm"}


class PipelineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    method: str
    endpoints: dict = field(default_factory=dict)
    segmentation_stage: str = "before_labeling"
    vocabulary_path: str | None = None
    tag_vocabulary: tuple = ()  # optional closed list for M2/M3
    max_tags: int = 32
    timeout: float = 10.0
    domain_context: str = DEFAULT_DOMAIN_CONTEXT
    language: str = "en"
    h_threshold: int = 0          # native path: marker shallowness cutoff
    relief: str = "gradient"      # native path: "gradient" or "raw"


def check_config(config: PipelineConfig) -> None:
    if config.method not in METHODS:
        raise PipelineConfigError(f"unknown method {config.method!r}")
    if config.segmentation_stage not in SEGMENTATION_STAGES:
        raise PipelineConfigError(f"unknown segmentation_stage {config.segmentation_stage!r}")
    if config.max_tags < 1:
        raise PipelineConfigError("max_tags must be positive")
    if config.relief not in ("gradient", "raw"):
        raise PipelineConfigError(f"unknown relief {config.relief!r}")
    if config.method in ("M4", "M4b") and not config.vocabulary_path:
        raise PipelineConfigError(f"method {config.method} requires vocabulary_path")


@dataclass(frozen=True)
class VocabularySeed:
    """Term -> definition map built from glossary headwords; source_hash
    ties the seed to the exact glossary and prompt set that generated it."""

    entries: dict
    source_hash: str
    language: str = "en"

    @property
    def terms(self) -> tuple:
        return tuple(sorted(self.entries))


def derive_tags_from_caption(caption: str, max_tags: int = 32, stopwords=None) -> list[str]:
    """One-word tags from a caption: tokenize, normalize, drop stopwords,
    deduplicate in order, truncate."""
    if stopwords is None:
        stopwords = fixtures.stopwords("en")
    seen = set()
    out = []
    for tok in lexicon.tokenize(caption):
        if tok in stopwords or tok in seen:
            continue
        seen.add(tok)
        out.append(tok)
        if len(out) >= max_tags:
            break
    return out


def build_definition_prompt(term: str, domain_context: str = DEFAULT_DOMAIN_CONTEXT) -> str:
    if not term or not term.strip():
        raise ValueError("term must be non-empty")
    return f'In a {domain_context} context, define "{term}".'


def _headword(entry: lexicon.GlossEntry, language: str) -> str:
    variants = entry.variants.get(language)
    return variants[0] if variants else entry.id


def seed_source_hash(glossary: lexicon.Glossary, language: str,
                     domain_context: str = DEFAULT_DOMAIN_CONTEXT) -> str:
    prompts = [
        build_definition_prompt(_headword(glossary.entries[eid], language), domain_context)
        for eid in sorted(glossary.entries)
    ]
    basis = {"glossary": glossary.fingerprint(), "language": language, "prompts": prompts}
    return hashlib.sha256(canonical_json_bytes(basis)).hexdigest()


def load_vocabulary_seed(data: bytes | str) -> VocabularySeed:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    doc = json.loads(data)
    entries = doc.get("entries")
    source_hash = doc.get("source_hash")
    language = doc.get("language", "en")
    if not isinstance(entries, dict) or not isinstance(source_hash, str):
        raise ValueError("vocabulary seed must carry entries and source_hash")
    for term, definition in entries.items():
        if not isinstance(term, str) or lexicon.normalize_term(term) != term:
            raise ValueError(f"seed term {term!r} is not in normalized form")
        if not isinstance(definition, str) or not definition:
            raise ValueError(f"seed term {term!r} has an empty definition")
    return VocabularySeed(entries=dict(entries), source_hash=source_hash, language=language)


def read_vocabulary_seed(path) -> VocabularySeed:
    with open(path, "rb") as fh:
        return load_vocabulary_seed(fh.read())


def _write_seed(seed: VocabularySeed, path) -> None:
    obj = {
        "schema_version": 1,
        "source_hash": seed.source_hash,
        "language": seed.language,
        "entries": dict(seed.entries),
    }
    data = canonical_json_bytes(obj)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def build_label_vocabulary(glossary: lexicon.Glossary, definer_url: str | None = None,
                           language: str = "en", cache_path=None,
                           domain_context: str = DEFAULT_DOMAIN_CONTEXT,
                           timeout: float = 10.0, client: BackendClient | None = None,
                           ) -> VocabularySeed:
    """One definition per glossary entry, fetched from the definer backend.

    The result is cached at cache_path keyed by a hash of the glossary and
    the exact prompts; a matching cache satisfies the build with zero
    backend calls. Partial results are never persisted: the cache file is
    written only after every definition arrived.
    """
    want_hash = seed_source_hash(glossary, language, domain_context)
    if cache_path is not None and os.path.exists(cache_path):
        try:
            cached = read_vocabulary_seed(cache_path)
        except (ValueError, OSError):
            cached = None
        if cached is not None and cached.source_hash == want_hash:
            return cached
    if client is None:
        if not definer_url:
            raise ValueError("no definer endpoint and no usable cache")
        client = BackendClient({"define": definer_url}, timeout=timeout)
    entries = {}
    for eid in sorted(glossary.entries):
        head = _headword(glossary.entries[eid], language)
        term = lexicon.normalize_term(head)
        if term in entries:
            raise ValueError(f"two glossary entries normalize to the same headword {term!r}")
        prompt = build_definition_prompt(head, domain_context)
        entries[term] = client.define(prompt)["definition"]
    seed = VocabularySeed(entries=entries, source_hash=want_hash, language=language)
    if cache_path is not None:
        _write_seed(seed, cache_path)
    return seed


def enrich_labels(assignments: dict, glossary: lexicon.Glossary, ontology) -> dict:
    """Fill concept_id and definition on assignments whose normalized text
    hits a glossary entry linked (via gloss_id) to an ontology concept.
    Assignments are never dropped or reordered; filled fields are never
    overwritten."""
    out = {}
    for sid, items in assignments.items():
        new_items = []
        for a in items:
            hit = _resolve_label(a.text, glossary, ontology)
            if hit is None:
                new_items.append(a)
                continue
            concept_id, definition = hit
            new_items.append(replace(
                a,
                concept_id=a.concept_id if a.concept_id is not None else concept_id,
                definition=a.definition if a.definition is not None else definition,
            ))
        out[sid] = tuple(new_items)
    return out


def _resolve_label(text: str, glossary: lexicon.Glossary, ontology):
    """(concept_id, definition) for the first glossary hit carrying a
    concept link, or None. Entry ids and concept ids are scanned in sorted
    order so resolution is deterministic."""
    for eid in sorted(lexicon.lookup(glossary, text)):
        concepts = ontology.concepts_for_gloss(eid)
        if not concepts:
            continue
        defs = glossary.entries[eid].definitions
        definition = defs.get("en")
        if definition is None and defs:
            definition = defs[sorted(defs)[0]]
        return concepts[0], definition
    return None


def _segment_from_wire(obj: dict, seg_id: int, width: int, height: int) -> Segment | None:
    """Tighten a wire segment (bbox + RLE counts) into a Segment value with
    a traced contour. Returns None for an empty mask."""
    x, y, w, h = obj["bbox"]
    if x + w > width or y + h > height:
        raise WireSchemaError("segment", f"box [{x},{y},{w},{h}] extends past the frame")
    local = rle_decode(MaskRLE(width=w, height=h, counts=tuple(obj["mask"]["counts"])))
    if not local.any():
        return None
    ys, xs = np.nonzero(local)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    tight = local[y0:y1 + 1, x0:x1 + 1]
    bbox = BoundingBox(x + x0, y + y0, x1 - x0 + 1, y1 - y0 + 1)
    contour = [(px + bbox.x, py + bbox.y) for px, py in trace_contour(tight)]
    return Segment(
        id=seg_id,
        bbox=bbox,
        mask=rle_encode(tight, bbox.w, bbox.h),
        area=int(tight.sum()),
        contour=tuple(contour),
    )


def _segments_from_wire(resp: dict, width: int, height: int) -> tuple:
    segments = []
    for obj in resp["segments"]:
        seg = _segment_from_wire(obj, len(segments) + 1, width, height)
        if seg is not None:
            segments.append(seg)
    return tuple(segments)


def _native_segments(grid, config: PipelineConfig) -> tuple:
    markers = regional_minima_markers(grid, config.h_threshold)
    relief = gradient_magnitude(grid) if config.relief == "gradient" else grid
    segmap = watershed(relief, markers)
    return tuple(extract_segments(segmap))


def _canonical_map(terms) -> dict:
    """normalized form -> canonical vocabulary term (first wins)."""
    out = {}
    for t in terms:
        out.setdefault(lexicon.normalize_term(t), t)
    return out


def _collect_tags(client: BackendClient, image_bytes: bytes, config: PipelineConfig,
                  seed: VocabularySeed | None):
    """The labeling half of the stage graph: returns (caption, tags, source)
    where tags is what the grounder will receive."""
    method = config.method
    if method == "M1":
        caption = client.caption(image_bytes)["caption"]
        try:
            stop = fixtures.stopwords(config.language)
        except KeyError:
            stop = fixtures.stopwords("en")
        tags = derive_tags_from_caption(caption, config.max_tags, stop)
        return caption, tags, _SOURCES[method]
    if method in ("M2", "M3"):
        vocab = list(config.tag_vocabulary)
        resp = client.tag(image_bytes, vocabulary=vocab or None)
        raw = [t["text"] for t in resp["tags"]]
        if vocab:
            canon = _canonical_map(vocab)
            raw = [canon[n] for n in map(lexicon.normalize_term, raw) if n in canon]
        tags = _dedup(raw)[: config.max_tags]
        return None, tags, _SOURCES[method]
    if method == "M4":
        resp = client.tag(image_bytes, vocabulary=list(seed.terms))
        canon = _canonical_map(seed.terms)
        raw = [canon[n] for n in
               (lexicon.normalize_term(t["text"]) for t in resp["tags"]) if n in canon]
        tags = _dedup(raw)[: config.max_tags]
        return None, tags, _SOURCES[method]
    # M4b: the definition texts themselves go to the grounder
    tags = [seed.entries[t] for t in seed.terms][: config.max_tags]
    return None, tags, _SOURCES[method]


def _dedup(items) -> list:
    seen = set()
    out = []
    for x in items:
        if x not in seen:
            seen.add(x)
            out.append(x)
    return out


def _bind_detections(detections, segments, source: str) -> dict:
    """Attach each detection to the segment whose box overlaps it most
    (ties go to the lower segment id); zero-overlap detections are dropped."""
    assignments: dict[int, list] = {}
    for det in detections:
        dx, dy, dw, dh = det["bbox"]
        box = BoundingBox(dx, dy, dw, dh)
        best_id = None
        best_iou = 0.0
        for seg in segments:
            iou = box_iou(box, seg.bbox)
            if iou > best_iou:
                best_id, best_iou = seg.id, iou
        if best_id is None:
            continue
        assignments.setdefault(best_id, []).append(
            LabelAssignment(text=det["text"], confidence=float(det["confidence"]),
                            source=source)
        )
    return {sid: tuple(items) for sid, items in assignments.items()}


def run_pipeline(image_bytes: bytes, config: PipelineConfig,
                 glossary: lexicon.Glossary | None = None, ontology=None,
                 client: BackendClient | None = None,
                 source_path: str = "") -> ImageRecord:
    """Process one image into a validated ImageRecord.

    A fresh backend client is created unless one is injected; injecting a
    shared client across concurrent runs would interleave their call logs,
    so share only within one image's run.
    """
    check_config(config)
    grid = decode_pgm(image_bytes)
    image_id = image_id_for(image_bytes)

    if config.method == "native":
        record = ImageRecord(
            image_id=image_id, source_path=source_path,
            width=grid.width, height=grid.height,
            segments=_native_segments(grid, config),
            assignments={},
            provenance=Provenance(method="native", timestamp=utc_timestamp()),
        )
        _require_valid(record, image_bytes)
        return record

    if client is None:
        client = BackendClient(resolve_endpoints(config.endpoints), timeout=config.timeout)
    missing = [s for s in _REQUIRED_STAGES[config.method] if not client.endpoints.get(s)]
    if missing:
        raise PipelineConfigError(
            f"method {config.method} needs endpoints for: {', '.join(missing)}")

    seed = None
    if config.method in ("M4", "M4b"):
        if not os.path.exists(config.vocabulary_path):
            raise PipelineConfigError(
                f"vocabulary seed {config.vocabulary_path!r} not found; build it first")
        seed = read_vocabulary_seed(config.vocabulary_path)

    call_start = len(client.calls)
    segments = None
    if config.segmentation_stage == "before_labeling":
        segments = _segments_from_wire(client.segment(image_bytes), grid.width, grid.height)
    caption, tags, source = _collect_tags(client, image_bytes, config, seed)
    detections = client.ground(image_bytes, tags)["detections"] if tags else []
    if segments is None:
        segments = _segments_from_wire(client.segment(image_bytes), grid.width, grid.height)

    assignments = _bind_detections(detections, segments, source)
    if glossary is not None and ontology is not None:
        assignments = enrich_labels(assignments, glossary, ontology)

    calls = client.calls[call_start:]
    provenance = Provenance(
        method=config.method,
        backend_ids={c.stage: c.url for c in calls},
        prompt_hashes=tuple(c.request_sha256 for c in calls),
        timestamp=utc_timestamp(),
        degraded=config.method == "M4b",
    )
    record = ImageRecord(
        image_id=image_id, source_path=source_path,
        width=grid.width, height=grid.height,
        segments=segments, assignments=assignments,
        provenance=provenance, image_caption=caption,
    )
    _require_valid(record, image_bytes)
    return record


def _require_valid(record: ImageRecord, image_bytes: bytes) -> None:
    violations = validate_record(record, image_bytes)
    if violations:
        raise SidecarValidationError(violations)
