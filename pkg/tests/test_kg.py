import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgpath.kg import (
    PATIENT,
    KGFormatError,
    KnowledgeGraph,
    action_mask,
    action_space,
    link_patient,
    parse_kg,
)

from .conftest import random_kg


def ids(kg, *names):
    return [kg.entity_id(n) for n in names]


def test_self_loops_added(toy_kg):
    rf1, d1, d2 = ids(toy_kg, "RF1", "D1", "D2")
    causes, loop = toy_kg.relation_id("causes"), toy_kg.self_loop_relation
    assert set(toy_kg.adjacency[d1]) == {(causes, d2), (loop, d1)}
    assert toy_kg.adjacency[d2] == ((loop, d2),)
    assert all(len(adj) >= 1 for adj in toy_kg.adjacency)


def test_relation_types_have_one_have_and_one_self_loop(toy_kg):
    origins = [r.origin.value for r in toy_kg.relation_types]
    assert origins.count("have") == 1
    assert origins.count("self_loop") == 1


def test_mini_kg_counts(mini_kg):
    c = mini_kg.counts()
    assert c["entities"] == 22
    assert c["disease"] + c["disease_category"] + c["risk_factor"] == 22
    assert mini_kg.n_diseases == c["disease"]


def test_full_scale_counts_round_trip(rng):
    # a file with the published shape: 53 diseases, 5 categories, 7 risk factors, 326 triplets
    ents = [(f"D{i}", "disease") for i in range(53)] + [(f"C{i}", "disease_category") for i in range(5)]
    ents += [(f"R{i}", "risk_factor") for i in range(7)]
    names = [n for n, _ in ents]
    pairs = set()
    while len(pairs) < 326:
        h, t = rng.choice(65, size=2, replace=False)
        pairs.add((names[h], names[t]))
    text = "\n".join(f"entity\t{n}\t{k}" for n, k in ents) + "\n"
    text += "\n".join(f"triplet\t{h}\tcauses\t{t}" for h, t in sorted(pairs)) + "\n"
    kg = parse_kg(text)
    assert kg.counts() == {"entities": 65, "domain_triplets": 326, "disease": 53,
                           "disease_category": 5, "risk_factor": 7, "relation_types": 3}
    assert parse_kg(kg.to_text()).counts() == kg.counts()


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("", "no entities"),
        ("# only a comment\n", "no entities"),
        ("entity\tA\tdisease\nentity\tA\trisk_factor\n", "duplicate entity"),
        ("entity\tA\tdisease\ntriplet\tA\tcauses\tB\n", "unknown entity 'B'"),
        ("entity\tA\tnot_a_kind\n", "invalid entity kind"),
        ("entity\tA\n", "entity record"),
        ("entity\tA\tdisease\nentity\tB\tdisease\ntriplet\tA\tcauses\tB\ntriplet\tA\tcauses\tB\n",
         "duplicate triplet"),
        ("entity\tA\tdisease\nfoo\tbar\n", "unknown record"),
        ("entity\tA\tdisease\nentity\tB\tdisease\ntriplet\tA\thave\tB\n", "reserved"),
    ],
)
def test_load_errors(text, fragment):
    with pytest.raises(KGFormatError, match=fragment):
        parse_kg(text, source="kg.tsv")


def test_load_error_carries_line_number():
    with pytest.raises(KGFormatError, match=r"kg.tsv:3"):
        parse_kg("entity\tA\tdisease\n# c\ntriplet\tA\tcauses\tZ\n", source="kg.tsv")


def test_link_patient(toy_kg):
    g = link_patient(toy_kg, [1, 1, 0])
    assert g.patient_links == frozenset(ids(toy_kg, "RF1", "D1"))
    assert link_patient(toy_kg, [1, 1, 1]).patient_links == frozenset(range(3))
    with pytest.raises(ValueError, match="no connection to KG"):
        link_patient(toy_kg, [0, 0, 0])
    with pytest.raises(ValueError, match="length 3"):
        link_patient(toy_kg, [1, 0])


def test_action_space_examples(toy_kg):
    rf1, d1, d2 = ids(toy_kg, "RF1", "D1", "D2")
    causes, loop, have = toy_kg.relation_id("causes"), toy_kg.self_loop_relation, toy_kg.have_relation
    g = link_patient(toy_kg, [1, 1, 0])
    assert action_space(g, d1) == [(loop, d1), (causes, d2)]
    assert action_space(g, PATIENT) == [(have, rf1), (have, d1)]


def test_history_exclusion_keeps_self_loop():
    kg = KnowledgeGraph.from_records([("D1", "disease"), ("D2", "disease")], [("D2", "causes", "D1")])
    g = link_patient(kg, [1, 1])
    d1, d2 = kg.entity_id("D1"), kg.entity_id("D2")
    assert action_space(g, d2, [d1]) == [(kg.self_loop_relation, d2)]


def test_action_mask_examples():
    assert action_mask([(0, 1), (1, 2)], 3).tolist() == [0, 1, 1]
    assert action_mask([], 3).tolist() == [0, 0, 0]
    assert action_mask([(0, i) for i in range(4)], 4).tolist() == [1, 1, 1, 1]


def test_parallel_edges_keep_lowest_relation():
    kg = KnowledgeGraph.from_records(
        [("A", "disease"), ("B", "disease")],
        [("A", "causes", "B"), ("A", "aggravates", "B")],
    )
    assert kg.parallel_edges == ((0, 1),)
    from kgpath.kg import resolve_actions

    g = link_patient(kg, [1, 0])
    space = action_space(g, 0)
    assert action_mask(space, 2).tolist() == [1, 1]
    assert resolve_actions(space)[1] == kg.relation_id("aggravates")


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), data=st.data())
def test_action_space_properties(seed, data):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng)
    p_c = (rng.random(kg.m) < 0.4).astype(int)
    p_c[rng.integers(kg.m)] = 1
    g = link_patient(kg, p_c)
    assert len(action_space(g, PATIENT)) == p_c.sum()
    current = data.draw(st.integers(0, kg.m - 1))
    visited = [e for e in data.draw(st.lists(st.integers(0, kg.m - 1), max_size=4)) if e != current]
    space = action_space(g, current, visited)
    tails = [t for _, t in space]
    assert (kg.self_loop_relation, current) in space
    assert not set(tails) & (set(visited) - {current})
    assert tails == sorted(tails)
    assert action_mask(space, kg.m).sum() == len(set(tails))
    # purity
    assert action_space(g, current, visited) == space
