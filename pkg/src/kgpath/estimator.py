"""scikit-learn style front end: fit embeddings and agent, predict disease probabilities."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .agent import ActionCache, ActorCritic, TrainConfig, TrainingData, WalkContext, train_agent
from .embeddings import PatientAutoencoder, RBMEmbedding
from .inference import BeamConfig, PredictionResult, beam_predict
from .kg import KnowledgeGraph, link_patient
from .nn import load_params, save_params


class KGPathPredictor(ClassifierMixin, BaseEstimator):
    """Disease predictor that walks a knowledge graph from the patient entity.

    ``X`` rows are ``[p_c | p_f]``: the first ``kg.m`` columns are the
    binary character vector, the rest are features scaled to ``[0, 1]``.
    ``Y`` is a multilabel indicator over the graph's diseases, in
    ascending entity-id order.

    Embeddings (RBM over ``p_c``, autoencoder over ``p_f``) are fitted
    first and then frozen while the actor-critic agent is trained.
    ``embedding_dim`` is shared by entities and patients because the
    patient code fills the entity slot of the start state.
    """

    def __init__(self, kg: KnowledgeGraph | None = None, embedding_dim=32, ae_hidden=64,
                 embedding_epochs=100, embedding_lr=1e-3, horizon=2, gamma=0.99,
                 entropy_weight=0.13, critic_weight=0.5, lr=1e-3, episodes_per_patient=4,
                 epochs=30, batch_size=32, hidden=(64, 64), optimizer="adam",
                 beam_widths=None, random_state=0):
        self.kg = kg
        self.embedding_dim = embedding_dim
        self.ae_hidden = ae_hidden
        self.embedding_epochs = embedding_epochs
        self.embedding_lr = embedding_lr
        self.horizon = horizon
        self.gamma = gamma
        self.entropy_weight = entropy_weight
        self.critic_weight = critic_weight
        self.lr = lr
        self.episodes_per_patient = episodes_per_patient
        self.epochs = epochs
        self.batch_size = batch_size
        self.hidden = hidden
        self.optimizer = optimizer
        self.beam_widths = beam_widths
        self.random_state = random_state

    def _split(self, X):
        if self.kg is None:
            raise ValueError("KGPathPredictor needs a knowledge graph (kg=...)")
        X = check_array(X, dtype=np.float64)
        m = self.kg.m
        if X.shape[1] <= m:
            raise ValueError(f"X needs {m} character columns followed by at least one feature")
        return X[:, :m], X[:, m:]

    def _seeds(self):
        seq = np.random.SeedSequence(self.random_state)
        return [int(s.generate_state(1)[0]) for s in seq.spawn(3)]

    def train_config(self) -> TrainConfig:
        return TrainConfig(horizon=self.horizon, gamma=self.gamma, entropy_weight=self.entropy_weight,
                           critic_weight=self.critic_weight, episodes_per_patient=self.episodes_per_patient,
                           epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           optimizer=self.optimizer, hidden=tuple(self.hidden),
                           seed=self._seeds()[2])

    def fit_embeddings(self, X):
        """Stage one: fit the RBM and the autoencoder."""
        P_c, P_f = self._split(X)
        s_rbm, s_ae, _ = self._seeds()
        self.rbm_ = RBMEmbedding(n_components=self.embedding_dim, learning_rate=self.embedding_lr,
                                 n_iter=self.embedding_epochs, random_state=s_rbm).fit(P_c)
        self.autoencoder_ = PatientAutoencoder(hidden_dim=self.ae_hidden, code_dim=self.embedding_dim,
                                               learning_rate=self.embedding_lr, n_iter=self.embedding_epochs,
                                               random_state=s_ae).fit(P_f)
        return self

    def fit_agent(self, X, Y, on_epoch=None):
        """Stage two: train the walker with embeddings held fixed."""
        check_is_fitted(self, ["rbm_", "autoencoder_"])
        P_c, P_f = self._split(X)
        Y = check_array(Y, dtype=int)
        kg = self.kg
        if Y.shape != (P_c.shape[0], kg.n_diseases):
            raise ValueError(f"Y must have shape ({P_c.shape[0]}, {kg.n_diseases})")
        cfg = self.train_config()
        ctx = self.context_
        data = TrainingData(
            graphs=[link_patient(kg, pc) for pc in P_c],
            codes=self.autoencoder_.transform(P_f),
            labels=[frozenset(int(e) for e in kg.disease_ids[np.flatnonzero(y)]) for y in Y],
        )
        rng = np.random.default_rng(cfg.seed)
        net = ActorCritic.initialize(ctx.state_dim, kg.m, cfg.hidden, rng)
        self.agent_, self.history_ = train_agent(net, kg, data, ctx, cfg, rng, on_epoch)
        return self

    def fit(self, X, Y, on_epoch=None):
        self.fit_embeddings(X)
        return self.fit_agent(X, Y, on_epoch)

    @property
    def context_(self) -> WalkContext:
        return WalkContext(self.rbm_.weights_, self.kg.n_relations)

    @property
    def classes_(self):
        return self.kg.disease_ids

    def beam_config(self) -> BeamConfig:
        if self.beam_widths is None:
            return BeamConfig.default(self.horizon, self.kg.m)
        if self.beam_widths == "exact":
            return BeamConfig(self.horizon)
        widths = self.beam_widths
        if np.isscalar(widths):
            widths = (int(widths),) * self.horizon
        return BeamConfig(self.horizon, tuple(int(w) for w in widths))

    def explain(self, X) -> list[PredictionResult]:
        """Full beam-search output (probabilities and paths) per row."""
        check_is_fitted(self, "agent_")
        P_c, P_f = self._split(np.atleast_2d(X))
        codes = self.autoencoder_.transform(P_f)
        cfg, ctx, cache = self.beam_config(), self.context_, ActionCache(self.kg)
        return [beam_predict(self.agent_, link_patient(self.kg, pc), code, ctx, cfg, cache)
                for pc, code in zip(P_c, codes)]

    def predict_proba(self, X) -> np.ndarray:
        return np.array([r.probs for r in self.explain(X)]).reshape(-1, self.kg.n_diseases)

    def predict(self, X) -> np.ndarray:
        """Indicator of the single most probable disease per row (ties: lowest id)."""
        P = self.predict_proba(X)
        out = np.zeros_like(P, dtype=int)
        out[np.arange(len(P)), np.argmax(P, axis=1)] = 1
        return out

    # -- snapshots ----------------------------------------------------------

    def save(self, directory) -> list[Path]:
        check_is_fitted(self, ["rbm_", "autoencoder_"])
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = [d / "rbm.json", d / "autoencoder.json"]
        save_params(written[0], {"W": self.rbm_.weights_, "a": self.rbm_.visible_bias_,
                                 "b": self.rbm_.hidden_bias_},
                    {"kind": "rbm", "history": self.rbm_.history_})
        save_params(written[1], self.autoencoder_.params_,
                    {"kind": "autoencoder", "history": self.autoencoder_.history_})
        if hasattr(self, "agent_"):
            written.append(d / "agent.json")
            save_params(written[2], self.agent_.params, {"kind": "agent"})
        return written

    def load(self, directory, require_agent: bool = True):
        d = Path(directory)
        if not (d / "rbm.json").exists() or not (d / "autoencoder.json").exists():
            raise FileNotFoundError(f"{d}: embedding snapshots missing; run the embedding stage first")
        arrays, meta = load_params(d / "rbm.json")
        self.rbm_ = RBMEmbedding(n_components=arrays["W"].shape[1])
        self.rbm_.weights_, self.rbm_.visible_bias_, self.rbm_.hidden_bias_ = arrays["W"], arrays["a"], arrays["b"]
        self.rbm_.history_ = meta.get("history", [])
        self.rbm_.n_features_in_ = arrays["W"].shape[0]
        arrays, meta = load_params(d / "autoencoder.json")
        self.autoencoder_ = PatientAutoencoder(hidden_dim=arrays["enc1.weights"].shape[1],
                                               code_dim=arrays["enc2.weights"].shape[1])
        self.autoencoder_.params_ = arrays
        self.autoencoder_.history_ = meta.get("history", [])
        self.autoencoder_.n_features_in_ = arrays["enc1.weights"].shape[0]
        if (d / "agent.json").exists():
            self.agent_ = ActorCritic(load_params(d / "agent.json")[0])
        elif require_agent:
            raise FileNotFoundError(f"{d}: agent snapshot missing; run training first")
        return self


def history_lines(history) -> str:
    return "".join(json.dumps(h.as_dict(), sort_keys=True) + "\n" for h in history)
