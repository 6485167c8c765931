"""Query the packaged glossary and concept graph.

The glossary maps surface forms in several languages to shared entries; the
ontology relates concepts by is_a, part_of, and related_to and attaches a
spatial hull zone to some of them. Run with:

    python3 demos/03_knowledge_queries.py
"""

from treatise import fixtures, lexicon
from treatise.evaluation import label_score
from treatise.ontology import ancestors, context_bundle, related, spatial_zone


def main():
    glossary = fixtures.glossary()
    graph = fixtures.ontology()

    print("glossary entries:", ", ".join(sorted(glossary.entries)))

    hits = lexicon.lookup(glossary, "quilha")
    print(f'\n"quilha" resolves to entries {sorted(hits)}')
    print("  all surface forms:",
          ", ".join(sorted(lexicon.expand_terms(glossary, ["quilha"]))))
    print("  with related entries:",
          ", ".join(sorted(lexicon.expand_terms(glossary, ["quilha"],
                                                include_related=True))))

    print("\nconcept facts for RiderFrame:")
    print("  ancestors:", ancestors(graph, "RiderFrame"))
    print("  related:", sorted(related(graph, "RiderFrame")))
    bundle = context_bundle(graph, "RiderFrame")
    print("  excluded siblings:", sorted(bundle.excluded))
    print("  human-readable:", ", ".join(bundle.ancestor_labels))

    # Heel carries no zone of its own; it inherits one through part_of
    zone, inherited = spatial_zone(graph, "Heel")
    print(f"\nHeel sits in the {zone!r} zone"
          f" ({'inherited' if inherited else 'its own'})")

    frames = fixtures.frames_glossary()
    print("\nlabel agreement scores (1 exact, 0.5 subsumed, 0.25 related):")
    for a, b in [("keel", "quilha"), ("floor timber", "frame"),
                 ("rider frame", "frame"), ("keel", "scarf")]:
        use = frames if "frame" in a or "frame" in b else glossary
        print(f"  {a!r} vs {b!r}: {label_score(a, b, use, graph)}")


if __name__ == "__main__":
    main()
