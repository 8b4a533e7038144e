"""Independent oracles and random-instance builders shared by the tests."""

import numpy as np

from kgpath.agent import ActorCritic, StepBatch, WalkContext, build_state, objective, rollout
from kgpath.kg import PATIENT, action_space, link_patient, resolve_actions
from kgpath.nn import masked_softmax

from .conftest import random_kg


def random_instance(rng, m=None, k=4, hidden=(6, 5)):
    """A random graph, linked patient, embeddings and network with nonzero biases."""
    kg = random_kg(rng, m)
    p_c = (rng.random(kg.m) < 0.3).astype(int)
    p_c[rng.integers(kg.m)] = 1
    g = link_patient(kg, p_c)
    ctx = WalkContext(rng.normal(size=(kg.m, k)), kg.n_relations)
    net = ActorCritic.initialize(ctx.state_dim, kg.m, hidden, rng)
    for name in list(net.params):
        if name.endswith("bias"):
            net.params[name] = rng.normal(scale=0.5, size=net.params[name].shape)
    return kg, g, ctx, net, rng.normal(size=k)


def enumerate_paths(net, g, p_e, ctx, horizon):
    """All depth-``horizon`` walks with their probabilities, by plain recursion.

    Uses only ``action_space`` and the network's forward pass on single
    states; shares no code with the beam search.
    """
    m = g.base.m
    out = {}

    def walk(entities, relations, prob):
        if len(relations) == horizon:
            out[(tuple(entities), tuple(relations))] = prob
            return
        cur = entities[-1]
        space = action_space(g, cur, set(entities[1:]) - {cur})
        if not space:
            out[(tuple(entities), tuple(relations))] = prob
            return
        mask = np.zeros(m)
        for _, t in space:
            mask[t] = 1
        prev = None if cur == PATIENT else (entities[-2], relations[-1])
        s = build_state(p_e, ctx, cur, prev)
        pi = masked_softmax(_logits(net, s), mask)
        rel_of = resolve_actions(space)
        for t in sorted(rel_of):
            walk(entities + [t], relations + [rel_of[t]], prob * pi[t])

    walk([PATIENT], [], 1.0)
    return out


def _logits(net, s):
    h = np.maximum(s @ net.params["trunk1.weights"] + net.params["trunk1.bias"], 0)
    x = np.maximum(h @ net.params["trunk2.weights"] + net.params["trunk2.bias"], 0)
    return x @ net.params["policy.weights"] + net.params["policy.bias"]


def random_objective_case(rng):
    """(net, batch, alpha, critic weight, frozen advantages) for a gradient check."""
    kg, g, ctx, net, p_e = random_instance(rng)
    T = int(rng.integers(1, 5))
    trajs = [rollout(net, g, p_e, ctx, T, rng) for _ in range(int(rng.integers(1, 3)))]
    for t in trajs:
        t.reward = float(rng.choice([-1, 0, 1]))
    batch = StepBatch.from_trajectories(trajs, gamma=float(rng.uniform(0.5, 1.0)))
    _, values, _ = net.forward(batch.states, batch.masks)
    adv = batch.returns - values
    return net, batch, float(rng.uniform(0, 1)), float(rng.uniform(0.1, 1)), adv


def gradient_check(net, batch, alpha, c, adv, h=1e-5):
    """Max per-coordinate relative error between analytic and central-difference gradients."""
    _, grads, _ = objective(net, batch, alpha, c, advantages=adv)
    worst = 0.0
    for name, p in net.params.items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = objective(net, batch, alpha, c, advantages=adv, grad=False)[0]
            p[idx] = orig - h
            down = objective(net, batch, alpha, c, advantages=adv, grad=False)[0]
            p[idx] = orig
            fd = (up - down) / (2 * h)
            a = grads[name][idx]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst
