"""Knowledge-graph path reasoning for next-visit disease prediction."""

from .cohort import Cohort, SynthConfig, generate_synthetic, load_cohort
from .estimator import KGPathPredictor
from .evaluation import cross_validate, macro_auc, sweep, topk_hit
from .inference import BeamConfig, beam_predict, export_paths
from .kg import KnowledgeGraph, bundled_kg_path, link_patient, load_kg

__all__ = [
    "BeamConfig", "Cohort", "KGPathPredictor", "KnowledgeGraph", "SynthConfig", "beam_predict",
    "bundled_kg_path", "cross_validate", "export_paths", "generate_synthetic", "link_patient",
    "load_cohort", "load_kg", "macro_auc", "sweep", "topk_hit",
]
