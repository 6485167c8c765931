"""Concept graph for ship components: is-a hierarchy (a DAG), part-of and
related-to edges, spatial zones, and prompt-context bundles.

File format:

    {"roots": ["HullComponent", ...],
     "concepts": {"<id>": {"label": "...", "is_a": [...], "part_of": [...],
                           "related_to": [...], "zone": "stern",
                           "gloss_id": "..."}}}

Zones are one of bow, stern, keel, bottom, deck, unspecified. part_of carries
no transitive reasoning here; related_to is treated as untyped and symmetric.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

ZONES = ("bow", "stern", "keel", "bottom", "deck", "unspecified")


class OntologyFormatError(ValueError):
    """Raised when an ontology file violates the format or its invariants."""


class CycleError(OntologyFormatError):
    """The is_a relation contains a cycle; offending ids are in .cycle."""

    def __init__(self, cycle):
        self.cycle = tuple(cycle)
        super().__init__("is_a cycle through: " + ", ".join(self.cycle))


class UnknownConceptError(KeyError):
    pass


@dataclass(frozen=True)
class Concept:
    id: str
    label: str
    is_a: tuple[str, ...] = ()
    part_of: tuple[str, ...] = ()
    related_to: tuple[str, ...] = ()
    zone: str = "unspecified"
    gloss_id: str | None = None


@dataclass(frozen=True)
class ContextBundle:
    """Prompt context for one concept: what it is (nearest ancestors first),
    which sibling categories it does not belong to, what it relates to, where
    it sits, and what it is part of. Ids drive reasoning; the parallel
    *_labels tuples hold the display strings, element for element."""

    concept_id: str
    ancestors: tuple[str, ...]
    excluded: tuple[str, ...]
    related: tuple[str, ...]
    zone: str
    part_of: tuple[str, ...]
    ancestor_labels: tuple[str, ...]
    excluded_labels: tuple[str, ...]
    related_labels: tuple[str, ...]
    part_of_labels: tuple[str, ...]


@dataclass(frozen=True)
class Ontology:
    concepts: dict[str, Concept]
    roots: tuple[str, ...]
    _related: dict[str, frozenset[str]] = field(repr=False, default_factory=dict)
    _by_gloss: dict[str, tuple[str, ...]] = field(repr=False, default_factory=dict)

    def __len__(self) -> int:
        return len(self.concepts)

    def concepts_for_gloss(self, gloss_id: str) -> tuple[str, ...]:
        """Concept ids linked to a glossary entry, sorted."""
        return self._by_gloss.get(gloss_id, ())


def _require(concepts: dict, cid: str, ref: str, kind: str):
    if ref not in concepts:
        raise OntologyFormatError(f"concept {cid!r}: {kind} reference {ref!r} does not exist")


def _find_is_a_cycle(concepts: dict[str, Concept]) -> list[str] | None:
    """Iterative DFS; returns the node sequence of one cycle if present."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {cid: WHITE for cid in concepts}
    for start in concepts:
        if color[start] != WHITE:
            continue
        stack = [(start, iter(concepts[start].is_a))]
        color[start] = GRAY
        path = [start]
        while stack:
            node, it = stack[-1]
            advanced = False
            for parent in it:
                if color[parent] == GRAY:
                    return path[path.index(parent):]
                if color[parent] == WHITE:
                    color[parent] = GRAY
                    path.append(parent)
                    stack.append((parent, iter(concepts[parent].is_a)))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                path.pop()
                stack.pop()
    return None


def load_ontology(data: bytes | str) -> Ontology:
    """Parse, validate references, and reject any is_a cycle eagerly."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise OntologyFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("concepts"), dict):
        raise OntologyFormatError('top level must be {"roots": [...], "concepts": {...}}')
    raw_roots = doc.get("roots", [])
    if not isinstance(raw_roots, list) or not all(isinstance(r, str) for r in raw_roots):
        raise OntologyFormatError("roots must be a list of concept ids")

    concepts: dict[str, Concept] = {}
    for cid, raw in doc["concepts"].items():
        if not isinstance(cid, str) or not cid:
            raise OntologyFormatError("concept id must be a non-empty string")
        if not isinstance(raw, dict):
            raise OntologyFormatError(f"concept {cid!r} must be an object")
        zone = raw.get("zone", "unspecified")
        if zone not in ZONES:
            raise OntologyFormatError(f"concept {cid!r}: unknown zone {zone!r}")
        gloss_id = raw.get("gloss_id")
        if gloss_id is not None and not isinstance(gloss_id, str):
            raise OntologyFormatError(f"concept {cid!r}: gloss_id must be a string")
        edges = {}
        for key in ("is_a", "part_of", "related_to"):
            val = raw.get(key, [])
            if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
                raise OntologyFormatError(f"concept {cid!r}: {key} must be a list of ids")
            edges[key] = tuple(val)
        concepts[cid] = Concept(
            id=cid,
            label=str(raw.get("label", cid)),
            is_a=edges["is_a"],
            part_of=edges["part_of"],
            related_to=edges["related_to"],
            zone=zone,
            gloss_id=gloss_id,
        )

    for cid, c in concepts.items():
        for ref in c.is_a:
            _require(concepts, cid, ref, "is_a")
        for ref in c.part_of:
            _require(concepts, cid, ref, "part_of")
        for ref in c.related_to:
            _require(concepts, cid, ref, "related_to")
    for r in raw_roots:
        if r not in concepts:
            raise OntologyFormatError(f"root {r!r} does not exist")

    cycle = _find_is_a_cycle(concepts)
    if cycle is not None:
        raise CycleError(cycle)

    related: dict[str, set[str]] = {cid: set(c.related_to) for cid, c in concepts.items()}
    for cid, c in concepts.items():
        for other in c.related_to:
            related[other].add(cid)
    by_gloss: dict[str, list[str]] = {}
    for cid, c in concepts.items():
        if c.gloss_id:
            by_gloss.setdefault(c.gloss_id, []).append(cid)
    return Ontology(
        concepts=concepts,
        roots=tuple(raw_roots),
        _related={k: frozenset(v) for k, v in related.items()},
        _by_gloss={k: tuple(sorted(v)) for k, v in by_gloss.items()},
    )


def _get(ontology: Ontology, cid: str) -> Concept:
    try:
        return ontology.concepts[cid]
    except KeyError:
        raise UnknownConceptError(cid) from None


def ancestors(ontology: Ontology, cid: str) -> list[str]:
    """Transitive is_a closure in BFS order, deduplicated, self excluded."""
    _get(ontology, cid)
    seen = {cid}
    order: list[str] = []
    queue = deque([cid])
    while queue:
        node = queue.popleft()
        for parent in ontology.concepts[node].is_a:
            if parent not in seen:
                seen.add(parent)
                order.append(parent)
                queue.append(parent)
    return order


def related(ontology: Ontology, cid: str) -> set[str]:
    """One-hop symmetric related_to closure: b is related to a if either
    of them lists the other."""
    _get(ontology, cid)
    return set(ontology._related.get(cid, frozenset()))


def spatial_zone(ontology: Ontology, cid: str) -> tuple[str, bool]:
    """The concept's own zone, or the nearest ancestor's specified zone
    (BFS order, first hit). Returns (zone, inherited)."""
    c = _get(ontology, cid)
    if c.zone != "unspecified":
        return c.zone, False
    for aid in ancestors(ontology, cid):
        if ontology.concepts[aid].zone != "unspecified":
            return ontology.concepts[aid].zone, True
    return "unspecified", False


def context_bundle(ontology: Ontology, cid: str) -> ContextBundle:
    """Everything the prompt builder wants to know about one concept,
    including the category roots it does NOT descend from."""
    c = _get(ontology, cid)
    anc = tuple(ancestors(ontology, cid))
    in_closure = set(anc) | {cid}
    excluded = tuple(r for r in ontology.roots if r not in in_closure)
    rel = tuple(sorted(related(ontology, cid)))
    zone, _ = spatial_zone(ontology, cid)

    def labels(ids):
        return tuple(ontology.concepts[i].label for i in ids)

    return ContextBundle(
        concept_id=cid,
        ancestors=anc,
        excluded=excluded,
        related=rel,
        zone=zone,
        part_of=c.part_of,
        ancestor_labels=labels(anc),
        excluded_labels=labels(excluded),
        related_labels=labels(rel),
        part_of_labels=labels(c.part_of),
    )
