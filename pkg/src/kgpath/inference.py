"""Beam-search path enumeration, disease aggregation and explanation export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import ActionCache, ActorCritic, WalkContext, build_state
from .kg import PATIENT, EntityKind, KnowledgeGraph, LinkedGraph

EXPLANATION_FORMAT = "kgpath-explanation"
EXPLANATION_VERSION = 1


@dataclass(frozen=True)
class Path:
    entities: tuple[int, ...]  # entities[0] is PATIENT
    relations: tuple[int, ...]
    step_probs: tuple[float, ...]
    prob: float

    @property
    def terminal(self) -> int:
        return self.entities[-1]


@dataclass
class PredictionResult:
    probs: np.ndarray  # (D,) aligned with disease_ids
    disease_ids: np.ndarray
    paths: list[Path] = field(default_factory=list)
    dropped_mass: float = 0.0

    @property
    def path_probs(self) -> list[float]:
        return [p.prob for p in self.paths]


@dataclass(frozen=True)
class BeamConfig:
    """Per-step beam widths; ``widths=None`` means exact enumeration."""

    horizon: int = 2
    widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.widths is not None:
            if len(self.widths) != self.horizon:
                raise ValueError(f"need {self.horizon} beam widths, got {len(self.widths)}")
            if min(self.widths) < 1:
                raise ValueError("beam widths must be >= 1")

    @property
    def exact(self) -> bool:
        return self.widths is None

    @classmethod
    def default(cls, horizon: int, m: int) -> "BeamConfig":
        if horizon == 2 and m <= 100:
            return cls(horizon)
        return cls(horizon, (8,) * horizon)

    def width(self, t: int) -> float:
        return math.inf if self.widths is None else self.widths[t]


def beam_predict(net: ActorCritic, g: LinkedGraph, p_e, ctx: WalkContext, cfg: BeamConfig,
                 cache: ActionCache | None = None) -> PredictionResult:
    """Expand every kept path by its top-K_t actions for ``cfg.horizon`` steps."""
    kg = g.base
    if net.state_dim != ctx.state_dim or net.m != kg.m:
        raise ValueError(
            f"agent expects state width {net.state_dim} and {net.m} entities; "
            f"graph/embeddings give {ctx.state_dim} and {kg.m}"
        )
    cache = cache or ActionCache(kg)
    beam = [Path((PATIENT,), (), (), 1.0)]
    for t in range(cfg.horizon):
        live, states, masks, maps = [], [], [], []
        nxt: list[Path] = []
        for path in beam:
            cur = path.entities[-1]
            mask, tails = cache.lookup(g, cur, frozenset(path.entities[1:]))
            if not tails:
                nxt.append(path)  # dead end: the walk stays where it stopped
                continue
            prev = None if cur == PATIENT else (path.entities[-2], path.relations[-1])
            live.append(path)
            states.append(build_state(p_e, ctx, cur, prev))
            masks.append(mask)
            maps.append(tails)
        if live:
            probs, _, _ = net.forward(np.array(states), np.array(masks))
            k = cfg.width(t)
            for path, pi, tails in zip(live, probs, maps):
                ranked = sorted(tails, key=lambda e: (-pi[e], e))
                if k < len(ranked):
                    ranked = ranked[:k]
                for e in ranked:
                    nxt.append(Path(path.entities + (e,), path.relations + (tails[e],),
                                    path.step_probs + (float(pi[e]),), path.prob * float(pi[e])))
        beam = nxt
    return aggregate(kg, beam)


def aggregate(kg: KnowledgeGraph, paths: Sequence[Path]) -> PredictionResult:
    P = np.zeros(kg.n_diseases)
    dropped = 0.0
    for path in paths:
        idx = kg.disease_index.get(path.terminal)
        if idx is None:
            dropped += path.prob
        else:
            P[idx] += path.prob
    return PredictionResult(P, kg.disease_ids.copy(), list(paths), dropped)


def rank_diseases(result: PredictionResult, top_k: int | None = None) -> list[tuple[int, float]]:
    """Diseases by descending probability, ties by ascending entity id."""
    order = sorted(range(len(result.probs)), key=lambda j: (-result.probs[j], result.disease_ids[j]))
    if top_k is not None:
        order = order[:top_k]
    return [(int(result.disease_ids[j]), float(result.probs[j])) for j in order]


def _name(kg: KnowledgeGraph, e: int) -> str:
    return "patient" if e == PATIENT else kg.entities[e].name


def export_paths(result: PredictionResult, kg: KnowledgeGraph, fmt: str = "json",
                 min_edge_prob: float = 0.1) -> str:
    """Render paths as a JSON explanation document or Graphviz dot text.

    In dot output a path is drawn only when its probability exceeds
    ``min_edge_prob``; each edge is labelled with the summed probability
    of the drawn paths through it.
    """
    if fmt == "json":
        return _to_json(result, kg)
    if fmt == "dot":
        return _to_dot(result, kg, min_edge_prob)
    raise ValueError(f"unknown export format {fmt!r}; use 'json' or 'dot'")


def _to_json(result: PredictionResult, kg: KnowledgeGraph) -> str:
    doc = {
        "format": EXPLANATION_FORMAT,
        "version": EXPLANATION_VERSION,
        "diseases": [{"entity": _name(kg, e), "probability": p} for e, p in rank_diseases(result)],
        "dropped_mass": result.dropped_mass,
        "paths": [
            {
                "entities": [_name(kg, e) for e in path.entities],
                "relations": [kg.relation_types[r].name for r in path.relations],
                "step_probabilities": list(path.step_probs),
                "probability": path.prob,
            }
            for path in result.paths
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


_SHAPES = {EntityKind.DISEASE: "ellipse", EntityKind.DISEASE_CATEGORY: "box",
           EntityKind.RISK_FACTOR: "diamond"}


def _to_dot(result: PredictionResult, kg: KnowledgeGraph, threshold: float) -> str:
    edges: dict[tuple[int, int, int], float] = {}
    for path in result.paths:
        if path.prob <= threshold:
            continue
        for u, r, v in zip(path.entities, path.relations, path.entities[1:]):
            edges[(u, r, v)] = edges.get((u, r, v), 0.0) + path.prob
    nodes = sorted({u for u, _, _ in edges} | {v for _, _, v in edges})
    lines = ["digraph progression {", "  rankdir=LR;"]
    for e in nodes:
        shape = "doublecircle" if e == PATIENT else _SHAPES[kg.entities[e].kind]
        lines.append(f'  "{_name(kg, e)}" [shape={shape}];')
    for (u, r, v), p in sorted(edges.items()):
        lines.append(
            f'  "{_name(kg, u)}" -> "{_name(kg, v)}" '
            f'[label="{kg.relation_types[r].name} ({p:.3f})", color=red];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
