"""Knowledge graph storage, patient linking and per-step action spaces."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PATIENT = -1
HAVE = "have"
SELF_LOOP = "self_loop"


class KGFormatError(ValueError):
    """Raised when a graph file cannot be loaded; message carries the location."""


class EntityKind(str, Enum):
    DISEASE = "disease"
    DISEASE_CATEGORY = "disease_category"
    RISK_FACTOR = "risk_factor"


class RelationOrigin(str, Enum):
    DOMAIN = "domain"
    HAVE = "have"
    SELF_LOOP = "self_loop"


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    kind: EntityKind


@dataclass(frozen=True)
class RelationType:
    id: int
    name: str
    origin: RelationOrigin


@dataclass(frozen=True, order=True)
class Triplet:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Typed directed multigraph with a self-loop on every entity.

    Build with :meth:`from_records` or :func:`load_kg`; the constructor
    trusts its arguments. ``triplets`` holds domain triplets only, the
    self-loops live in ``adjacency``.
    """

    entities: tuple[Entity, ...]
    relation_types: tuple[RelationType, ...]
    triplets: tuple[Triplet, ...]
    adjacency: tuple[tuple[tuple[int, int], ...], ...]
    parallel_edges: tuple[tuple[int, int], ...] = ()
    _entity_index: dict = field(default_factory=dict, repr=False)
    _relation_index: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_records(
        cls,
        entities: Sequence[tuple[str, str]],
        triplets: Sequence[tuple[str, str, str]],
    ) -> "KnowledgeGraph":
        """Resolve ``(name, kind)`` and ``(head, relation, tail)`` records to dense ids."""
        records = [("entity", i + 1, e) for i, e in enumerate(entities)]
        records += [("triplet", len(entities) + i + 1, t) for i, t in enumerate(triplets)]
        return _build(records, source="<records>")

    @property
    def m(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relation_types)

    @cached_property
    def disease_ids(self) -> np.ndarray:
        return np.array(
            [e.id for e in self.entities if e.kind is EntityKind.DISEASE], dtype=int
        )

    @cached_property
    def disease_index(self) -> dict[int, int]:
        """Entity id -> column in the D-dimensional disease vector."""
        return {int(e): j for j, e in enumerate(self.disease_ids)}

    @property
    def n_diseases(self) -> int:
        return len(self.disease_ids)

    @cached_property
    def have_relation(self) -> int:
        return next(r.id for r in self.relation_types if r.origin is RelationOrigin.HAVE)

    @cached_property
    def self_loop_relation(self) -> int:
        return next(
            r.id for r in self.relation_types if r.origin is RelationOrigin.SELF_LOOP
        )

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_index[name]
        except KeyError:
            raise KeyError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_index[name]
        except KeyError:
            raise KeyError(f"unknown relation {name!r}") from None

    def is_disease(self, entity: int) -> bool:
        return entity >= 0 and self.entities[entity].kind is EntityKind.DISEASE

    def counts(self) -> dict[str, int]:
        out = {"entities": self.m, "domain_triplets": len(self.triplets)}
        for kind in EntityKind:
            out[kind.value] = sum(e.kind is kind for e in self.entities)
        out["relation_types"] = self.n_relations
        return out

    def __deepcopy__(self, memo):
        return self  # immutable; lets clone() share one graph across folds

    def to_text(self) -> str:
        lines = ["# entity<TAB>name<TAB>kind / triplet<TAB>head<TAB>relation<TAB>tail"]
        lines += [f"entity\t{e.name}\t{e.kind.value}" for e in self.entities]
        for t in self.triplets:
            lines.append(
                "triplet\t{}\t{}\t{}".format(
                    self.entities[t.head].name,
                    self.relation_types[t.relation].name,
                    self.entities[t.tail].name,
                )
            )
        return "\n".join(lines) + "\n"


def _build(records, source: str) -> KnowledgeGraph:
    entities: list[Entity] = []
    by_name: dict[str, int] = {}
    raw_triplets = []
    for kind, lineno, rec in records:
        where = f"{source}:{lineno}"
        if kind == "entity":
            if len(rec) != 2:
                raise KGFormatError(f"{where}: entity record needs name and kind")
            name, kind_name = (s.strip() for s in rec)
            if not name:
                raise KGFormatError(f"{where}: empty entity name")
            if name in by_name:
                raise KGFormatError(f"{where}: duplicate entity name {name!r}")
            try:
                ekind = EntityKind(kind_name)
            except ValueError:
                raise KGFormatError(f"{where}: invalid entity kind {kind_name!r}") from None
            by_name[name] = len(entities)
            entities.append(Entity(len(entities), name, ekind))
        else:
            if len(rec) != 3:
                raise KGFormatError(f"{where}: triplet record needs head, relation, tail")
            raw_triplets.append((where, *(s.strip() for s in rec)))

    if not entities:
        raise KGFormatError(f"{source}: no entities defined")

    rel_names = sorted({r for _, _, r, _ in raw_triplets})
    for where, _, rel, _ in raw_triplets:
        if not rel:
            raise KGFormatError(f"{where}: empty relation name")
        if rel in (HAVE, SELF_LOOP):
            raise KGFormatError(f"{where}: relation name {rel!r} is reserved")
    relation_types = [RelationType(i, n, RelationOrigin.DOMAIN) for i, n in enumerate(rel_names)]
    relation_types.append(RelationType(len(relation_types), HAVE, RelationOrigin.HAVE))
    relation_types.append(RelationType(len(relation_types), SELF_LOOP, RelationOrigin.SELF_LOOP))
    rel_index = {r.name: r.id for r in relation_types}
    self_loop = rel_index[SELF_LOOP]

    seen: set[Triplet] = set()
    triplets: list[Triplet] = []
    for where, head, rel, tail in raw_triplets:
        for name in (head, tail):
            if name not in by_name:
                raise KGFormatError(f"{where}: dangling reference to unknown entity {name!r}")
        t = Triplet(by_name[head], rel_index[rel], by_name[tail])
        if t.head == t.tail:
            raise KGFormatError(f"{where}: domain triplet {head!r} -> itself; self-loops are implicit")
        if t in seen:
            raise KGFormatError(f"{where}: duplicate triplet ({head}, {rel}, {tail})")
        seen.add(t)
        triplets.append(t)

    out: list[list[tuple[int, int]]] = [[(self_loop, e.id)] for e in entities]
    for t in triplets:
        out[t.head].append((t.relation, t.tail))
    adjacency = tuple(tuple(sorted(edges, key=lambda a: (a[1], a[0]))) for edges in out)

    pairs: dict[tuple[int, int], int] = {}
    for t in triplets:
        pairs[(t.head, t.tail)] = pairs.get((t.head, t.tail), 0) + 1
    parallel = tuple(sorted(p for p, c in pairs.items() if c > 1))
    for h, tl in parallel:
        logger.warning(
            "parallel relations between %s and %s; the lowest relation id is used as the action",
            entities[h].name,
            entities[tl].name,
        )

    return KnowledgeGraph(
        entities=tuple(entities),
        relation_types=tuple(relation_types),
        triplets=tuple(triplets),
        adjacency=adjacency,
        parallel_edges=parallel,
        _entity_index=by_name,
        _relation_index=rel_index,
    )


def parse_kg(text: str, source: str = "<string>") -> KnowledgeGraph:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = line.rstrip("\r\n").split("\t")
        tag = fields[0].strip()
        if tag not in ("entity", "triplet"):
            raise KGFormatError(f"{source}:{lineno}: unknown record type {tag!r}")
        records.append((tag, lineno, fields[1:]))
    return _build(records, source)


def load_kg(source: str | Path) -> KnowledgeGraph:
    """Load a tab-separated graph file and add a self-loop to every entity."""
    path = Path(source)
    kg = parse_kg(path.read_text(encoding="utf-8"), source=str(path))
    logger.info("loaded %s: %s", path, kg.counts())
    return kg


def bundled_kg_path() -> Path:
    """Path of the shipped illustrative (non-clinical) circulation mini-KG."""
    return Path(__file__).with_name("data") / "mini_kg.tsv"


@dataclass(frozen=True)
class LinkedGraph:
    """A knowledge graph plus one patient entity joined by ``have`` edges."""

    base: KnowledgeGraph
    patient_links: frozenset[int]

    @cached_property
    def patient_actions(self) -> tuple[tuple[int, int], ...]:
        have = self.base.have_relation
        return tuple((have, e) for e in sorted(self.patient_links))


def link_patient(kg: KnowledgeGraph, p_c) -> LinkedGraph:
    p_c = np.asarray(p_c)
    if p_c.shape != (kg.m,):
        raise ValueError(f"patient character vector must have length {kg.m}, got shape {p_c.shape}")
    if not np.isin(p_c, (0, 1)).all():
        raise ValueError("patient character vector must be binary")
    links = frozenset(int(i) for i in np.flatnonzero(p_c))
    if not links:
        raise ValueError("patient has no connection to KG")
    return LinkedGraph(kg, links)


def action_space(g: LinkedGraph, current: int, visited: Iterable[int] = ()) -> list[tuple[int, int]]:
    """Legal ``(relation id, tail id)`` actions from ``current``.

    Tails already on the walk are excluded, except the self-loop of
    ``current``. Pass :data:`PATIENT` as ``current`` for the first step.
    """
    if current == PATIENT:
        return list(g.patient_actions)
    kg = g.base
    if not 0 <= current < kg.m:
        raise IndexError(f"entity id {current} out of range")
    blocked = set(visited)
    blocked.discard(current)
    return [(r, e) for r, e in kg.adjacency[current] if e not in blocked]


def action_mask(space: Sequence[tuple[int, int]], m: int) -> np.ndarray:
    """Entity-indexed 0/1 mask of the tails reachable through ``space``."""
    mask = np.zeros(m, dtype=np.float64)
    for _, tail in space:
        if mask[tail]:
            logger.debug("relation collision on tail %d; keeping lowest relation id", tail)
        mask[tail] = 1.0
    return mask


def resolve_actions(space: Sequence[tuple[int, int]]) -> dict[int, int]:
    """Map each tail to the relation used to reach it (lowest id on collisions)."""
    out: dict[int, int] = {}
    for rel, tail in space:
        if tail not in out or rel < out[tail]:
            out[tail] = rel
    return out
