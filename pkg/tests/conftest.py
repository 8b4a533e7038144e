import numpy as np
import pytest

from kgpath.kg import KnowledgeGraph, bundled_kg_path, load_kg


def toy_records():
    """RF1 -> D1 -> D2 chain plus RF1 -> D1, used throughout the tests."""
    entities = [("RF1", "risk_factor"), ("D1", "disease"), ("D2", "disease")]
    triplets = [("RF1", "causes", "D1"), ("D1", "causes", "D2")]
    return entities, triplets


@pytest.fixture
def toy_kg():
    return KnowledgeGraph.from_records(*toy_records())


@pytest.fixture(scope="session")
def mini_kg():
    return load_kg(bundled_kg_path())


def random_kg(rng, n_entities=None, density=0.25):
    """Random typed graph; used by property tests and oracle checks."""
    m = int(n_entities or rng.integers(3, 13))
    kinds = rng.choice(["disease", "disease", "risk_factor", "disease_category"], size=m)
    kinds[0] = "disease"
    entities = [(f"E{i}", str(k)) for i, k in enumerate(kinds)]
    rels = ["causes", "is_a", "aggravates"]
    triplets = []
    for h in range(m):
        for t in range(m):
            if h != t and rng.random() < density:
                triplets.append((f"E{h}", str(rng.choice(rels)), f"E{t}"))
    return KnowledgeGraph.from_records(entities, triplets)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
