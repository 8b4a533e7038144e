"""Patient records, preprocessing, cohort files and a synthetic generator."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kg import EntityKind, KnowledgeGraph

logger = logging.getLogger(__name__)

COHORT_HEADER = "#kgpath-cohort"
COHORT_VERSION = 1


class CohortFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    """One admission as read from a cohort file (features unscaled, NaN = missing)."""

    patient_id: str
    admission: int
    conditions: tuple[str, ...]
    features: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class PatientRecord:
    patient_id: str
    admission: int
    p_c: np.ndarray  # (m,) binary
    p_f: np.ndarray  # (l,) min-max scaled to [0, 1]
    p_f_std: np.ndarray  # (l,) z-scores, for reporting
    p_f_raw: np.ndarray  # (l,) mean-imputed raw values
    future_labels: frozenset[int]  # disease entity ids of the next admission


@dataclass
class Cohort:
    kg: KnowledgeGraph
    records: list[PatientRecord]
    feature_names: tuple[str, ...]
    folds: dict[str, int] | None = None

    @property
    def m(self) -> int:
        return self.kg.m

    @property
    def l(self) -> int:
        return len(self.feature_names)

    @property
    def patient_ids(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    def labeled(self) -> list[PatientRecord]:
        return [r for r in self.records if r.future_labels]

    def to_arrays(self, records: Sequence[PatientRecord] | None = None):
        """``X = [p_c | p_f]``, multilabel ``Y`` over diseases, and patient groups."""
        records = self.labeled() if records is None else records
        X = np.array([np.concatenate([r.p_c, r.p_f]) for r in records]).reshape(len(records), self.m + self.l)
        Y = np.zeros((len(records), self.kg.n_diseases), dtype=int)
        for i, r in enumerate(records):
            for e in r.future_labels:
                Y[i, self.kg.disease_index[e]] = 1
        groups = np.array([r.patient_id for r in records])
        return X, Y, groups

    def to_raw(self) -> list[RawRecord]:
        names = [e.name for e in self.kg.entities]
        return [
            RawRecord(r.patient_id, r.admission, tuple(names[i] for i in np.flatnonzero(r.p_c)),
                      tuple(float(v) for v in r.p_f_raw))
            for r in self.records
        ]

    def label_counts(self) -> np.ndarray:
        counts = np.zeros(self.kg.n_diseases, dtype=int)
        for r in self.records:
            for e in r.future_labels:
                counts[self.kg.disease_index[e]] += 1
        return counts

    def summary(self) -> dict:
        """Counts in the shape of a dataset-statistics table."""
        labeled = self.labeled()
        n_labels = [len(r.future_labels) for r in labeled] or [0]
        links = [int(r.p_c.sum()) for r in self.records] or [0]
        return {
            "patients": len(self.patient_ids),
            "admissions": len(self.records),
            "labeled_records": len(labeled),
            "features": self.l,
            "avg_labels": float(np.mean(n_labels)),
            "max_labels": int(np.max(n_labels)),
            "avg_links": float(np.mean(links)),
            "max_links": int(np.max(links)),
        }


def preprocess(raw: Iterable[RawRecord], kg: KnowledgeGraph, feature_names: Sequence[str]) -> Cohort:
    """Chain admissions into labelled records and scale features.

    Patients with a single admission are dropped, as are admissions with
    no condition that maps onto the graph (unknown names are ignored).
    Labels of admission ``t`` are the disease conditions of admission
    ``t + 1``. Missing feature values are mean-imputed; features are
    z-scored for reporting and min-max scaled for the autoencoder.
    """
    by_patient: dict[str, list[RawRecord]] = defaultdict(list)
    for rec in raw:
        by_patient[rec.patient_id].append(rec)

    kept = []
    for pid in sorted(by_patient):
        adms = sorted(by_patient[pid], key=lambda r: r.admission)
        if len(adms) < 2:
            continue
        for t, rec in enumerate(adms):
            ids = _resolve(kg, rec.conditions)
            if not ids:
                continue
            labels = frozenset()
            if t + 1 < len(adms):
                labels = frozenset(e for e in _resolve(kg, adms[t + 1].conditions) if kg.is_disease(e))
            kept.append((rec, ids, labels))

    l = len(feature_names)
    F = np.full((len(kept), l), np.nan)
    for i, (rec, _, _) in enumerate(kept):
        if len(rec.features) != l:
            raise CohortFormatError(
                f"patient {rec.patient_id} admission {rec.admission}: "
                f"{len(rec.features)} feature values, expected {l}"
            )
        F[i] = rec.features
    if len(kept):
        empty = np.isnan(F).all(axis=0)
        if empty.any():
            raise CohortFormatError(
                "feature column(s) entirely missing: " + ", ".join(np.asarray(feature_names)[empty])
            )
        F = np.where(np.isnan(F), np.nanmean(F, axis=0), F)
    F_std, F_unit = _scale(F, feature_names)

    records = []
    for i, (rec, ids, labels) in enumerate(kept):
        p_c = np.zeros(kg.m)
        p_c[sorted(ids)] = 1.0
        records.append(PatientRecord(rec.patient_id, rec.admission, p_c, F_unit[i], F_std[i], F[i], labels))
    return Cohort(kg, records, tuple(feature_names))


def _resolve(kg: KnowledgeGraph, names: Iterable[str]) -> set[int]:
    return {kg._entity_index[n] for n in names if n in kg._entity_index}


def _scale(F: np.ndarray, names: Sequence[str]):
    if F.shape[0] == 0:
        return F.copy(), F.copy()
    mean, std = F.mean(axis=0), F.std(axis=0)
    lo, hi = F.min(axis=0), F.max(axis=0)
    flat = hi - lo <= 0
    for j in np.flatnonzero(flat):
        logger.warning("feature %r has zero variance; scaled to constant 0.5", names[j])
    F_std = np.where(flat, 0.0, (F - mean) / np.where(flat, 1.0, std))
    F_unit = np.where(flat, 0.5, (F - lo) / np.where(flat, 1.0, hi - lo))
    return F_std, np.clip(F_unit, 0.0, 1.0)


def make_folds(cohort: Cohort | Sequence[str], folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Assign whole patients to folds with sizes differing by at most one."""
    pids = sorted(set(cohort.patient_ids if isinstance(cohort, Cohort) else cohort))
    if len(pids) < folds:
        raise ValueError(f"{len(pids)} patients cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(len(pids))
    return {pids[j]: pos % folds for pos, j in enumerate(order)}


# -- cohort files ---------------------------------------------------------------


def write_cohort(path, raw: Sequence[RawRecord], feature_names: Sequence[str]) -> None:
    lines = [f"{COHORT_HEADER}\t{COHORT_VERSION}", "#features\t" + "\t".join(feature_names),
             "# admission<TAB>patient<TAB>index<TAB>conditions(;)<TAB>feature values..."]
    for r in raw:
        vals = ["" if math.isnan(v) else repr(float(v)) for v in r.features]
        lines.append("\t".join(["admission", r.patient_id, str(r.admission), ";".join(r.conditions), *vals]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cohort(path, kg: KnowledgeGraph | None = None) -> tuple[list[RawRecord], tuple[str, ...]]:
    """Parse a cohort file; with ``kg`` given, unknown condition names are errors."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(COHORT_HEADER):
        raise CohortFormatError(f"{path}:1: missing {COHORT_HEADER} header")
    try:
        version = int(text[0].split("\t")[1])
    except (IndexError, ValueError):
        raise CohortFormatError(f"{path}:1: malformed header") from None
    if version != COHORT_VERSION:
        raise CohortFormatError(f"{path}:1: unsupported cohort version {version}")
    features: tuple[str, ...] | None = None
    raw, errors = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if line.startswith("#features"):
            features = tuple(f for f in line.split("\t")[1:] if f)
            continue
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if fields[0] != "admission" or len(fields) < 4:
            errors.append(f"{path}:{lineno}: malformed record")
            continue
        if features is None:
            raise CohortFormatError(f"{path}:{lineno}: record before #features line")
        conds = tuple(c for c in fields[3].split(";") if c)
        if kg is not None:
            errors += [f"{path}:{lineno}: unknown entity {c!r}" for c in conds if c not in kg._entity_index]
        vals = fields[4:]
        if len(vals) != len(features):
            errors.append(f"{path}:{lineno}: {len(vals)} feature values, expected {len(features)}")
            continue
        try:
            feats = tuple(float("nan") if v in ("", "NA") else float(v) for v in vals)
            admission = int(fields[2])
        except ValueError as exc:
            errors.append(f"{path}:{lineno}: {exc}")
            continue
        raw.append(RawRecord(fields[1], admission, conds, feats))
    if errors:
        raise CohortFormatError("\n".join(errors))
    return raw, features or ()


def load_cohort(path, kg: KnowledgeGraph) -> Cohort:
    raw, names = read_cohort(path, kg)
    return preprocess(raw, kg, names)


# -- synthetic generator --------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    source: str
    target: str
    probability: float


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the planted-rule generator.

    ``rules=None`` plants one rule per graph edge into a disease, with
    strengths drawn from the seed. ``prevalence`` overrides first-admission
    prevalence per entity name.
    """

    n_patients: int = 2000
    noise: float = 0.1
    imbalance: bool = True
    seed: int = 0
    rules: tuple[Rule, ...] | None = None
    prevalence: dict = field(default_factory=dict)
    persistence: float = 0.7
    risk_persistence: float = 0.95
    n_features: int = 12
    signal: float = 1.0
    admissions: tuple[int, int] = (2, 4)

    def __post_init__(self):
        if not 0 <= self.noise <= 1:
            raise ValueError("noise must lie in [0, 1]")
        if self.n_patients < 1:
            raise ValueError("need at least one patient")
        if self.admissions[0] < 2:
            raise ValueError("patients need at least two admissions")


def _hops(kg: KnowledgeGraph, source: int, target: int) -> int | None:
    first = {t.tail for t in kg.triplets if t.head == source}
    if target in first:
        return 1
    if any(t.head in first and t.tail == target for t in kg.triplets):
        return 2
    return None


def planted_rules(kg: KnowledgeGraph, cfg: SynthConfig) -> list[tuple[int, int, float]]:
    """Resolve and validate the rule set to ``(source id, target id, probability)``."""
    if cfg.rules is None:
        rng = np.random.default_rng([cfg.seed, 1])
        out = []
        for t in kg.triplets:
            if kg.is_disease(t.tail):
                out.append((t.head, t.tail, float(np.round(rng.uniform(0.15, 0.6), 3))))
        return out
    out = []
    for rule in cfg.rules:
        try:
            s, d = kg.entity_id(rule.source), kg.entity_id(rule.target)
        except KeyError as exc:
            raise ValueError(f"rule {rule}: {exc.args[0]}") from None
        if not kg.is_disease(d):
            raise ValueError(f"rule {rule}: target must be a disease")
        if not 0 <= rule.probability <= 1:
            raise ValueError(f"rule {rule}: probability outside [0, 1]")
        if _hops(kg, s, d) is None:
            raise ValueError(f"rule {rule}: no graph path of length <= 2 from source to target")
        out.append((s, d, rule.probability))
    return out


def prevalence(kg: KnowledgeGraph, cfg: SynthConfig) -> np.ndarray:
    """First-admission probability of each entity before the non-empty fallback."""
    p = np.zeros(kg.m)
    rank = {EntityKind.DISEASE: 0, EntityKind.RISK_FACTOR: 0}
    for e in kg.entities:
        if e.kind is EntityKind.DISEASE_CATEGORY:
            continue
        j = rank[e.kind]
        rank[e.kind] += 1
        if e.kind is EntityKind.DISEASE:
            p[e.id] = 0.4 / (j + 1) ** 1.3 if cfg.imbalance else 0.12
        else:
            p[e.id] = 0.35 / (j + 1) ** 0.5 if cfg.imbalance else 0.2
    for name, v in cfg.prevalence.items():
        p[kg.entity_id(name)] = v
    return p


def expected_first_marginals(kg: KnowledgeGraph, cfg: SynthConfig) -> np.ndarray:
    """Exact per-entity presence probability at the first admission."""
    p = prevalence(kg, cfg)
    none = float(np.prod(1 - p))
    return p + none * p / p.sum()


def feature_names_for(kg: KnowledgeGraph, cfg: SynthConfig) -> tuple[str, ...]:
    rf = [e.name for e in kg.entities if e.kind is EntityKind.RISK_FACTOR]
    ds = [kg.entities[d].name for d in kg.disease_ids]
    names = ["age"] + [f"marker_{n}" for n in rf] + [f"signal_{n}" for n in ds]
    names += [f"noise_{i}" for i in range(max(0, cfg.n_features - len(names)))]
    return tuple(names[: cfg.n_features])


def generate_raw(kg: KnowledgeGraph, cfg: SynthConfig) -> tuple[list[RawRecord], tuple[str, ...]]:
    """Draw admissions for ``cfg.n_patients`` patients from the planted rules.

    Each admission's disease labels (the next admission's diseases) come
    from persistence of current diseases, rules fired by current
    conditions, and with probability ``noise`` one extra disease drawn by
    prevalence. Features carry markers of current risk factors and weak
    signals of which diseases the rules will produce next.
    """
    rng = np.random.default_rng(cfg.seed)
    rules = planted_rules(kg, cfg)
    prev = prevalence(kg, cfg)
    diseases = kg.disease_ids
    d_prev = prev[diseases] / prev[diseases].sum() if prev[diseases].sum() > 0 else None
    names = feature_names_for(kg, cfg)
    col = {n: j for j, n in enumerate(names)}
    ent_names = [e.name for e in kg.entities]
    by_source = defaultdict(list)
    for s, d, p in rules:
        by_source[s].append((d, p))

    raw = []
    width = len(str(cfg.n_patients - 1))
    lo, hi = cfg.admissions
    for pnum in range(cfg.n_patients):
        pid = f"P{pnum:0{width}d}"
        n_adm = int(rng.integers(lo, hi + 1))
        present = rng.random(kg.m) < prev
        if not present.any():
            present[rng.choice(kg.m, p=prev / prev.sum())] = True
        age = rng.normal(60.0, 12.0)
        for adm in range(n_adm):
            current = set(np.flatnonzero(present).tolist())
            fired: set[int] = set()
            nxt: set[int] = set()
            for e in sorted(current):
                if kg.is_disease(e) and rng.random() < cfg.persistence:
                    nxt.add(e)
                for d, p in by_source.get(e, ()):
                    if rng.random() < p:
                        nxt.add(d)
                        fired.add(d)
            if d_prev is not None and rng.random() < cfg.noise:
                nxt.add(int(rng.choice(diseases, p=d_prev)))
            if not nxt:
                options = [(p, d) for e in sorted(current) for d, p in by_source.get(e, ())]
                if options:
                    nxt.add(max(options, key=lambda o: (o[0], -o[1]))[1])
                elif d_prev is not None:
                    nxt.add(int(diseases[np.argmax(d_prev)]))

            feats = rng.normal(0.0, 1.0, size=len(names))
            if "age" in col:
                feats[col["age"]] = age + 2.0 * adm
            for e in current:
                j = col.get(f"marker_{ent_names[e]}")
                if j is not None:
                    feats[j] += 2.0
            for d in fired - current:
                j = col.get(f"signal_{ent_names[d]}")
                if j is not None:
                    feats[j] += cfg.signal
            raw.append(RawRecord(pid, adm, tuple(ent_names[e] for e in sorted(current)),
                                 tuple(float(v) for v in feats)))

            present = np.zeros(kg.m, dtype=bool)
            present[sorted(nxt)] = True
            for e in current:
                if kg.entities[e].kind is EntityKind.RISK_FACTOR and rng.random() < cfg.risk_persistence:
                    present[e] = True
    return raw, names


def generate_synthetic(kg: KnowledgeGraph, cfg: SynthConfig | None = None) -> Cohort:
    cfg = cfg or SynthConfig()
    raw, names = generate_raw(kg, cfg)
    return preprocess(raw, kg, names)


def top_share(counts, top: int = 10) -> float:
    """Share of all labels held by the ``top`` most frequent diseases."""
    counts = np.sort(np.asarray(counts))[::-1]
    return float(counts[:top].sum() / counts.sum()) if counts.sum() else 0.0
