"""Actor-critic walker over a patient-linked knowledge graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kg import PATIENT, KnowledgeGraph, LinkedGraph, action_mask, action_space, resolve_actions
from .nn import DenseLayer, GradientTape, Optimizer, apply_update, masked_entropy, masked_softmax

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = 2
    gamma: float = 0.99
    entropy_weight: float = 0.13
    critic_weight: float = 0.5
    episodes_per_patient: int = 4
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    hidden: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.entropy_weight < 0:
            raise ValueError("entropy weight must be >= 0")
        if self.episodes_per_patient < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("episodes, batch size and epochs must be positive")


class ActionCache:
    """Memoised masks and tail->relation maps for one knowledge graph."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg
        self._cache: dict = {}

    def lookup(self, g: LinkedGraph, current: int, visited: frozenset):
        if current == PATIENT:
            key = ("p", g.patient_links)
        else:
            key = (current, visited - {current})
        hit = self._cache.get(key)
        if hit is None:
            space = action_space(g, current, visited)
            hit = (action_mask(space, self.kg.m), resolve_actions(space))
            self._cache[key] = hit
        return hit


@dataclass
class WalkContext:
    """What the walker needs to turn a path prefix into a state vector."""

    entity_vectors: np.ndarray  # (m, k)
    n_relations: int

    @property
    def state_dim(self) -> int:
        return 3 * self.entity_vectors.shape[1] + self.n_relations


def build_state(p_e, ctx: WalkContext, current: int = PATIENT, previous: tuple[int, int] | None = None):
    """Concatenate ``(p_e, e_t, e_{t-1}, one_hot(r_t))``.

    At the start of the walk both entity slots hold ``p_e`` and the
    history is zero. ``previous`` is ``(entity, relation)`` of the step
    just taken; the patient (``PATIENT``) contributes ``p_e`` as its
    entity vector.
    """
    p_e = np.asarray(p_e, dtype=np.float64)
    k = ctx.entity_vectors.shape[1]
    if p_e.shape != (k,):
        raise ValueError(f"patient code has shape {p_e.shape}, entity embeddings have width {k}")
    history = np.zeros(k + ctx.n_relations)
    if current == PATIENT:
        return np.concatenate([p_e, p_e, history])
    if previous is not None:
        prev_entity, relation = previous
        history[:k] = p_e if prev_entity == PATIENT else ctx.entity_vectors[prev_entity]
        history[k + relation] = 1.0
    return np.concatenate([p_e, ctx.entity_vectors[current], history])


class ActorCritic:
    """Shared two-layer ReLU trunk with a policy head (m logits) and a value head."""

    LAYERS = ("trunk1", "trunk2", "policy", "value")

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @classmethod
    def initialize(cls, state_dim: int, m: int, hidden=(64, 64), rng=None, zero_heads=False):
        rng = np.random.default_rng(rng)
        h1, h2 = hidden
        layers = {
            "trunk1": DenseLayer.glorot(state_dim, h1, rng),
            "trunk2": DenseLayer.glorot(h1, h2, rng),
            "policy": DenseLayer.zeros(h2, m) if zero_heads else DenseLayer.glorot(h2, m, rng),
            "value": DenseLayer.zeros(h2, 1) if zero_heads else DenseLayer.glorot(h2, 1, rng),
        }
        params = {}
        for name, layer in layers.items():
            params[f"{name}.weights"] = layer.weights
            params[f"{name}.bias"] = layer.bias
        return cls(params)

    def layer(self, name: str) -> DenseLayer:
        return DenseLayer(self.params[f"{name}.weights"], self.params[f"{name}.bias"])

    @property
    def state_dim(self) -> int:
        return self.params["trunk1.weights"].shape[0]

    @property
    def m(self) -> int:
        return self.params["policy.weights"].shape[1]

    def with_params(self, params) -> "ActorCritic":
        return ActorCritic(params)

    def forward(self, states, masks, tape: GradientTape | None = None):
        """Batched ``(probs, values, x)``; ``x`` is the trunk representation."""
        tape = tape if tape is not None else GradientTape()
        h = tape.dense(self.layer("trunk1"), states, "relu", name="trunk1")
        x = tape.dense(self.layer("trunk2"), h, "relu", name="trunk2")
        logits = self.layer("policy")(x)
        values = self.layer("value")(x)[:, 0]
        return masked_softmax(logits, masks), values, x


def policy_value(net: ActorCritic, state, mask):
    """Policy over the m entities and the scalar state value."""
    probs, values, _ = net.forward(np.atleast_2d(state), np.atleast_2d(mask))
    return probs[0], float(values[0])


@dataclass
class Trajectory:
    entities: list[int]  # starts with PATIENT
    relations: list[int]
    states: np.ndarray  # (steps, state_dim)
    masks: np.ndarray  # (steps, m)
    policies: np.ndarray  # (steps, m)
    values: np.ndarray  # (steps,)
    reward: float = 0.0
    dead_end: bool = False

    @property
    def actions(self) -> np.ndarray:
        return np.asarray(self.entities[1:], dtype=int)

    @property
    def terminal(self) -> int:
        return self.entities[-1]

    def __len__(self):
        return len(self.relations)


def _sample_rows(probs, rng) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=1)
    # guard against rounding past the last admissible entry
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def rollout_batch(net: ActorCritic, graphs: Sequence[LinkedGraph], p_es, ctx: WalkContext,
                  horizon: int, rng, cache: ActionCache | None = None) -> list[Trajectory]:
    """Sample one walk of ``horizon`` steps per (graph, patient code) pair."""
    n = len(graphs)
    p_es = np.atleast_2d(np.asarray(p_es, dtype=np.float64))
    cache = cache or ActionCache(graphs[0].base)
    paths = [[PATIENT] for _ in range(n)]
    rels: list[list[int]] = [[] for _ in range(n)]
    rec = [dict(states=[], masks=[], policies=[], values=[]) for _ in range(n)]
    active = list(range(n))
    dead = [False] * n
    for _ in range(horizon):
        rows, states, masks, maps = [], [], [], []
        for i in active:
            cur = paths[i][-1]
            mask, tails = cache.lookup(graphs[i], cur, frozenset(paths[i][1:]))
            if not tails:
                dead[i] = True
                continue
            prev = None if cur == PATIENT else (paths[i][-2], rels[i][-1])
            rows.append(i)
            states.append(build_state(p_es[i], ctx, cur, prev))
            masks.append(mask)
            maps.append(tails)
        if not rows:
            break
        S, M = np.array(states), np.array(masks)
        probs, values, _ = net.forward(S, M)
        choice = _sample_rows(probs, rng)
        for j, i in enumerate(rows):
            e = int(choice[j])
            paths[i].append(e)
            rels[i].append(maps[j][e])
            r = rec[i]
            r["states"].append(S[j])
            r["masks"].append(M[j])
            r["policies"].append(probs[j])
            r["values"].append(values[j])
        active = rows
    out = []
    for i in range(n):
        r = rec[i]
        out.append(Trajectory(
            entities=paths[i],
            relations=rels[i],
            states=np.array(r["states"]).reshape(len(r["states"]), ctx.state_dim),
            masks=np.array(r["masks"]).reshape(len(r["masks"]), net.m),
            policies=np.array(r["policies"]).reshape(len(r["policies"]), net.m),
            values=np.array(r["values"]),
            dead_end=dead[i],
        ))
    return out


def rollout(net: ActorCritic, g: LinkedGraph, p_e, ctx: WalkContext, horizon: int, rng,
            cache: ActionCache | None = None) -> Trajectory:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return rollout_batch(net, [g], np.atleast_2d(p_e), ctx, horizon, rng, cache)[0]


def terminal_reward(kg: KnowledgeGraph, terminal: int, future_labels) -> int:
    """+1 for a disease that occurs next, 0 for another disease, -1 otherwise."""
    if not kg.is_disease(terminal):
        return -1
    return 1 if terminal in future_labels else 0


def discounted_returns(reward: float, n_steps: int, gamma: float) -> np.ndarray:
    """Per-step returns when only the final transition is rewarded."""
    return reward * gamma ** np.arange(n_steps - 1, -1, -1, dtype=np.float64)


def returns(traj: Trajectory, gamma: float) -> np.ndarray:
    return discounted_returns(traj.reward, len(traj), gamma)


@dataclass
class StepBatch:
    """Flattened steps of several trajectories, ready for one gradient step."""

    states: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    n_trajectories: int

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], gamma: float) -> "StepBatch":
        if not trajs:
            raise ValueError("empty trajectory batch")
        used = [t for t in trajs if len(t)]
        return cls(
            states=np.concatenate([t.states for t in used]),
            masks=np.concatenate([t.masks for t in used]),
            actions=np.concatenate([t.actions for t in used]),
            returns=np.concatenate([returns(t, gamma) for t in used]),
            n_trajectories=len(trajs),
        )


def objective(net: ActorCritic, batch: StepBatch, entropy_weight: float, critic_weight: float,
              advantages=None, grad: bool = True):
    """Surrogate objective to maximise and its gradients.

    ``J = mean_traj sum_t [log pi(a_t) * A_t + alpha * H(pi_t) - c * (G_t - v_t)^2]``
    with ``A_t = G_t - v_t`` held constant. Pass ``advantages`` to freeze
    them explicitly (finite-difference checks do this).
    """
    tape = GradientTape()
    probs, values, x = net.forward(batch.states, batch.masks, tape)
    n = batch.n_trajectories
    rows = np.arange(len(batch.actions))
    adv = batch.returns - values if advantages is None else np.asarray(advantages)
    logp = np.log(probs[rows, batch.actions])
    entropy = masked_entropy(probs, batch.masks)
    td = batch.returns - values
    J = (np.sum(logp * adv) + entropy_weight * np.sum(entropy) - critic_weight * np.sum(td**2)) / n
    diag = {
        "objective": float(J),
        "mean_entropy": float(entropy.mean()),
        "critic_loss": float(np.mean(td**2)),
    }
    if not grad:
        return J, None, diag

    keep = batch.masks > 0
    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    d_logp = (onehot - probs) * adv[:, None]
    logs = np.log(np.where(keep, probs, 1.0))
    d_ent = np.where(keep, -probs * (logs + entropy[:, None]), 0.0)
    d_logits = (d_logp + entropy_weight * d_ent) / n
    d_values = 2.0 * critic_weight * td / n

    grads = {
        "policy.weights": x.T @ d_logits,
        "policy.bias": d_logits.sum(axis=0),
        "value.weights": x.T @ d_values[:, None],
        "value.bias": np.array([d_values.sum()]),
    }
    dx = d_logits @ net.params["policy.weights"].T + d_values[:, None] @ net.params["value.weights"].T
    trunk_grads, _ = tape.backward(dx)
    grads.update(trunk_grads)
    return J, grads, diag


def update(net: ActorCritic, opt: Optimizer, trajs: Sequence[Trajectory], cfg: TrainConfig,
           frozen: Sequence[str] = ()) -> tuple[ActorCritic, dict]:
    """One ascent step on the entropy-regularised actor-critic objective."""
    batch = StepBatch.from_trajectories(trajs, cfg.gamma)
    J, grads, diag = objective(net, batch, cfg.entropy_weight, cfg.critic_weight)
    if not np.isfinite(J):
        raise FloatingPointError(f"non-finite objective; diagnostics {diag}")
    grads = {k: g for k, g in grads.items() if k.split(".")[0] not in frozen}
    new = apply_update(opt, net.params, grads, "ascend")
    diag["mean_return"] = float(np.mean([t.reward for t in trajs]))
    return net.with_params(new), diag


@dataclass
class TrainingData:
    graphs: list[LinkedGraph]
    codes: np.ndarray  # (n, d_e)
    labels: list[frozenset]


@dataclass
class EpochLog:
    epoch: int
    mean_return: float
    mean_entropy: float
    critic_loss: float
    hit_rate: float
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"epoch": self.epoch, "mean_return": self.mean_return, "mean_entropy": self.mean_entropy,
                "critic_loss": self.critic_loss, "hit_rate": self.hit_rate}


def train_agent(net: ActorCritic, kg: KnowledgeGraph, data: TrainingData, ctx: WalkContext,
                cfg: TrainConfig, rng=None,
                on_epoch: Callable[[EpochLog], None] | None = None) -> tuple[ActorCritic, list[EpochLog]]:
    """Run ``cfg.epochs`` passes of rollouts and updates over the training patients."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    opt = Optimizer(lr=cfg.lr, kind=cfg.optimizer)
    cache = ActionCache(kg)
    n = len(data.graphs)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        stats = {"ret": [], "ent": [], "critic": [], "hit": []}
        for start in range(0, n, cfg.batch_size):
            idx = np.repeat(order[start:start + cfg.batch_size], cfg.episodes_per_patient)
            trajs = rollout_batch(net, [data.graphs[i] for i in idx], data.codes[idx], ctx,
                                  cfg.horizon, rng, cache)
            for i, t in zip(idx, trajs):
                t.reward = terminal_reward(kg, t.terminal, data.labels[i])
            net, diag = update(net, opt, trajs, cfg)
            w = len(trajs)
            stats["ret"].append((diag["mean_return"], w))
            stats["ent"].append((diag["mean_entropy"], w))
            stats["critic"].append((diag["critic_loss"], w))
            stats["hit"].append((np.mean([t.reward == 1 for t in trajs]), w))
        avg = {k: float(np.average([v for v, _ in s], weights=[w for _, w in s])) if s else 0.0
               for k, s in stats.items()}
        log = EpochLog(epoch, avg["ret"], avg["ent"], avg["critic"], avg["hit"])
        history.append(log)
        logger.info("epoch %d return %.4f entropy %.4f critic %.4f hit %.4f",
                    epoch, log.mean_return, log.mean_entropy, log.critic_loss, log.hit_rate)
        if on_epoch is not None:
            on_epoch(log)
    return net, history
