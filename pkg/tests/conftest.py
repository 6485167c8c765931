import random

import pytest

from treatise import fixtures, lexicon, ontology


def make_pgm(rows):
    """Binary P5 bytes from a list of equal-length int rows."""
    h = len(rows)
    w = len(rows[0])
    body = bytes(v for row in rows for v in row)
    return f"P5\n{w} {h}\n255\n".encode() + body


@pytest.fixture(scope="session")
def parts_glossary():
    return lexicon.load_glossary(fixtures.read_bytes("glossary_fig4.json"))


@pytest.fixture(scope="session")
def frames_glossary():
    return lexicon.load_glossary(fixtures.read_bytes("glossary_frames.json"))


@pytest.fixture(scope="session")
def ship_ontology():
    return ontology.load_ontology(fixtures.read_bytes("ontology_fig6.json"))


def random_grid(rng: random.Random, w, h, lo=0, hi=9):
    return [[rng.randint(lo, hi) for _ in range(w)] for _ in range(h)]
