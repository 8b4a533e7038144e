import logging

import numpy as np
import pytest
from scipy.stats import chi2

from kgpath.cohort import (
    CohortFormatError,
    RawRecord,
    Rule,
    SynthConfig,
    expected_first_marginals,
    generate_raw,
    generate_synthetic,
    load_cohort,
    make_folds,
    preprocess,
    read_cohort,
    top_share,
    write_cohort,
)


def test_deterministic_rule_always_fires(toy_kg):
    cfg = SynthConfig(n_patients=50, noise=0.0, rules=(Rule("RF1", "D1", 1.0),),
                      prevalence={"RF1": 1.0}, risk_persistence=1.0, seed=3)
    cohort = generate_synthetic(toy_kg, cfg)
    d1 = toy_kg.entity_id("D1")
    labeled = cohort.labeled()
    assert labeled
    assert all(d1 in r.future_labels for r in labeled)


def test_imbalance_profile_top10_share(mini_kg):
    cohort = generate_synthetic(mini_kg, SynthConfig(n_patients=2000, imbalance=True, seed=0))
    counts = cohort.label_counts()
    ordered = np.sort(counts)[::-1]
    assert ordered[:10].sum() / ordered.sum() >= 0.85
    assert top_share(counts) == pytest.approx(ordered[:10].sum() / ordered.sum())


def test_same_seed_gives_identical_file(mini_kg, tmp_path):
    for name in ("a", "b"):
        raw, names = generate_raw(mini_kg, SynthConfig(n_patients=100, seed=11))
        write_cohort(tmp_path / f"{name}.tsv", raw, names)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    raw2, _ = generate_raw(mini_kg, SynthConfig(n_patients=100, seed=12))
    assert raw2 != raw


def test_rule_without_graph_path_is_rejected(toy_kg):
    # D2 -> D1 has no path (edges only run RF1 -> D1 -> D2)
    with pytest.raises(ValueError, match="no graph path"):
        generate_synthetic(toy_kg, SynthConfig(n_patients=5, rules=(Rule("D2", "D1", 0.5),)))
    # two hops is fine
    generate_synthetic(toy_kg, SynthConfig(n_patients=5, rules=(Rule("RF1", "D2", 0.5),)))


def test_first_admission_marginals_chi_square(mini_kg):
    cfg = SynthConfig(n_patients=10_000, seed=4, admissions=(2, 2))
    raw, _ = generate_raw(mini_kg, cfg)
    first = [r for r in raw if r.admission == 0]
    assert len(first) == 10_000
    counts = np.zeros(mini_kg.m)
    for r in first:
        for name in r.conditions:
            counts[mini_kg.entity_id(name)] += 1
    p = expected_first_marginals(mini_kg, cfg)
    live = p > 0
    n = len(first)
    exp_pos, exp_neg = n * p[live], n * (1 - p[live])
    stat = ((counts[live] - exp_pos) ** 2 / exp_pos + ((n - counts[live]) - exp_neg) ** 2 / exp_neg).sum()
    assert stat < chi2.ppf(0.999, live.sum())
    assert counts[~live].sum() == 0


def raw(pid, adm, conds, feats):
    return RawRecord(pid, adm, tuple(conds), tuple(feats))


def test_preprocess_filters_and_chains(toy_kg):
    records = [
        raw("a", 0, ["RF1"], [1.0, 5.0]),
        raw("a", 1, ["D1", "unmapped_code"], [3.0, 5.0]),
        raw("a", 2, ["unmapped_code"], [2.0, 5.0]),
        raw("b", 0, ["D1"], [0.0, 5.0]),  # only admission: patient dropped
    ]
    cohort = preprocess(records, toy_kg, ["x", "const"])
    assert [(r.patient_id, r.admission) for r in cohort.records] == [("a", 0), ("a", 1)]
    d1 = toy_kg.entity_id("D1")
    assert cohort.records[0].future_labels == frozenset({d1})
    # next admission has no graph link, so nothing to learn for admission 1
    assert cohort.records[1].future_labels == frozenset()
    assert cohort.labeled() == [cohort.records[0]]


def test_constant_feature_scales_to_half(toy_kg, caplog):
    records = [raw("a", 0, ["RF1"], [1.0, 7.0]), raw("a", 1, ["D1"], [3.0, 7.0])]
    with caplog.at_level(logging.WARNING):
        cohort = preprocess(records, toy_kg, ["x", "const"])
    assert "zero variance" in caplog.text
    assert [r.p_f[1] for r in cohort.records] == [0.5, 0.5]
    assert [r.p_f[0] for r in cohort.records] == [0.0, 1.0]
    np.testing.assert_allclose([r.p_f_std[0] for r in cohort.records], [-1.0, 1.0])


def test_mean_imputation_and_missing_column(toy_kg):
    nan = float("nan")
    records = [raw("a", 0, ["RF1"], [1.0, 2.0]), raw("a", 1, ["D1"], [nan, 4.0]), raw("a", 2, ["D2"], [3.0, 6.0])]
    cohort = preprocess(records, toy_kg, ["x", "y"])
    assert cohort.records[1].p_f_raw[0] == 2.0
    bad = [raw("a", 0, ["RF1"], [nan]), raw("a", 1, ["D1"], [nan])]
    with pytest.raises(CohortFormatError, match="entirely missing"):
        preprocess(bad, toy_kg, ["x"])


def test_preprocess_is_idempotent(mini_kg):
    cohort = generate_synthetic(mini_kg, SynthConfig(n_patients=60, seed=2))
    again = preprocess(cohort.to_raw(), mini_kg, cohort.feature_names)
    assert len(again.records) == len(cohort.records)
    for a, b in zip(cohort.records, again.records):
        assert (a.patient_id, a.admission, a.future_labels) == (b.patient_id, b.admission, b.future_labels)
        np.testing.assert_array_equal(a.p_c, b.p_c)
        np.testing.assert_allclose(a.p_f, b.p_f, atol=1e-12)


def test_file_round_trip_and_unknown_entity(mini_kg, tmp_path):
    raw_in, names = generate_raw(mini_kg, SynthConfig(n_patients=20, seed=1))
    path = tmp_path / "c.tsv"
    write_cohort(path, raw_in, names)
    raw_out, names_out = read_cohort(path, mini_kg)
    assert raw_out == raw_in and names_out == names
    cohort = load_cohort(path, mini_kg)
    assert cohort.summary()["patients"] == 20
    bad = "\t".join(["admission", "PX", "0", "obesity;hypertensoin"] + ["0.0"] * len(names))
    path.write_text(path.read_text() + bad + "\n")
    with pytest.raises(CohortFormatError, match=r"c.tsv:\d+: unknown entity 'hypertensoin'"):
        read_cohort(path, mini_kg)


def test_missing_header(tmp_path, mini_kg):
    (tmp_path / "x.tsv").write_text("admission\tP0\t0\tobesity\n")
    with pytest.raises(CohortFormatError, match="header"):
        read_cohort(tmp_path / "x.tsv", mini_kg)


def test_make_folds():
    pids = [f"p{i}" for i in range(10)]
    folds = make_folds(pids, 5, seed=0)
    assert sorted(np.bincount(list(folds.values()))) == [2] * 5
    assert make_folds(pids, 5, seed=0) == folds
    uneven = make_folds([f"p{i}" for i in range(12)], 5, seed=1)
    sizes = np.bincount(list(uneven.values()))
    assert sizes.max() - sizes.min() <= 1
    with pytest.raises(ValueError):
        make_folds(pids[:3], 5)


def test_folds_partition_records_by_patient(mini_kg):
    cohort = generate_synthetic(mini_kg, SynthConfig(n_patients=40, seed=5))
    folds = make_folds(cohort, 5, seed=3)
    for f in range(5):
        train = {r.patient_id for r in cohort.records if folds[r.patient_id] != f}
        test = {r.patient_id for r in cohort.records if folds[r.patient_id] == f}
        assert not train & test


def test_to_arrays_layout(mini_kg):
    cohort = generate_synthetic(mini_kg, SynthConfig(n_patients=10, seed=5))
    X, Y, groups = cohort.to_arrays()
    assert X.shape[1] == mini_kg.m + cohort.l
    assert Y.shape[1] == mini_kg.n_diseases
    assert (Y.sum(axis=1) >= 1).all()
    assert ((X[:, mini_kg.m:] >= 0) & (X[:, mini_kg.m:] <= 1)).all()
    assert len(groups) == len(X)
