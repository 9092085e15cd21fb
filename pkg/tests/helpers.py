"""Shared builders for the test suite: a four-cell corridor knowledge base
and random POMDPs."""
import numpy as np

from hpomdp.pomdp import Pomdp

CORRIDOR_GENERAL = """\
# a robot in a corridor
module move
var loc
action left modifies loc
action right modifies loc
rel here vv over loc
rel to_left vv over loc
rel to_right vv over loc
rel wall_left vv over loc
rel wall_right vv over loc
rel seen vo over loc
rel seen_near vo over loc
trans left rel here 0.2
trans left rel to_left 0.8
trans right rel here 0.2
trans right rel to_right 0.8
obs left rel seen rest
obs left rel seen_near 0.1
obs right rel seen rest
obs right rel seen_near 0.1
exec-forbid left when wall_left
exec-forbid right when wall_right
hier over loc
"""

CORRIDOR_SPECIFIC = """\
values loc a1 a2 a3 a4
observations loc z1 z2 z3 z4
abstract A B
pair here a1 a1
pair here a2 a2
pair here a3 a3
pair here a4 a4
pair to_left a2 a1
pair to_left a3 a2
pair to_left a4 a3
pair to_right a1 a2
pair to_right a2 a3
pair to_right a3 a4
pair wall_left a1 a1
pair wall_right a4 a4
pair seen a1 z1
pair seen a2 z2
pair seen a3 z3
pair seen a4 z4
pair seen_near a1 z2
pair seen_near a2 z1
pair seen_near a2 z3
pair seen_near a3 z2
pair seen_near a3 z4
pair seen_near a4 z3
hpair a1 A
hpair a2 A
hpair a3 B
hpair a4 B
hpair A root
hpair B root
"""


def random_stochastic(rng, rows, cols, density=1.0):
    m = rng.random((rows, cols)) * (rng.random((rows, cols)) < density)
    empty = m.sum(axis=1) == 0
    m[empty, rng.integers(cols, size=empty.sum())] = 1.0
    return m / m.sum(axis=1, keepdims=True)


def random_pomdp(rng, S, A, O, density=1.0, reward=True, discount=0.95) -> Pomdp:
    T = [random_stochastic(rng, S, S, density) for _ in range(A)]
    Z = [random_stochastic(rng, S, O, density) for _ in range(A)]
    R = None
    if reward:
        R = [np.where(t > 0, rng.normal(size=(S, S)), 0.0) for t in T]
        R = [_pattern(r, t) for r, t in zip(R, T)]
    return Pomdp(range(S), range(A), range(O), T, Z, R, discount)


def _pattern(r, t):
    import scipy.sparse as sp
    from hpomdp.pomdp import _csr
    rows, cols = np.nonzero(t)
    return _csr(rows, cols, r[rows, cols], t.shape)


def random_belief(rng, n, support=None):
    b = rng.random(n)
    if support is not None:
        b *= rng.random(n) < support
        if b.sum() == 0:
            b[rng.integers(n)] = 1.0
    return b / b.sum()


def enumerate_outcome_row(aa, lower, sst, neighbors, max_steps, cutoff=1e-7):
    """Termination distribution of an abstract action's policy, by
    propagating every (true state, belief) branch; the oracle for the
    Monte-Carlo estimate.

    Branches lighter than `cutoff` are dropped; returns ``(row, dropped)``
    where `dropped` bounds the error of every entry of `row`.
    """
    from hpomdp.hierarchy import _ancestor
    from hpomdp.pomdp import belief_update, best_action, delta_belief
    local, P, d = aa.local, aa.local.pomdp, aa.height
    n = local.n_nonspecial
    frontier = [(lower.state_index[local.nodes[s0]], delta_belief(P.n_states, s0), 1.0 / n)
                for s0 in range(n)]
    ends: dict = {}
    dropped = 0.0

    def finish(s, p):
        node = sst.nodes[d][_ancestor(sst, lower.states[s], d)]
        ends[node] = ends.get(node, 0.0) + p

    for _ in range(max_steps):
        nxt = []
        for s, b, p in frontier:
            a, _ = best_action(aa.policy, b)
            if a == local.terminate:
                finish(s, p)
                continue
            la = local.lower_actions[a]
            idx, probs = lower.transition_row(s, la)
            for s2, q in zip(idx.tolist(), probs.tolist()):
                oidx, oprobs = lower.observation_row(s2, la)
                for o, r in zip(oidx.tolist(), oprobs.tolist()):
                    w = p * q * r
                    if w < cutoff:
                        dropped += w
                        continue
                    b2, _ = belief_update(P, b, a, local.obs_map.get(o, local.extra_obs))
                    nxt.append((s2, b2, w))
        frontier = nxt
        if not frontier:
            break
    for s, _, p in frontier:
        finish(s, p)
    domain = [aa.source] + neighbors.neighbors(d, aa.source, sst.index[d])
    total = sum(ends.get(k, 0.0) for k in domain)
    return {k: ends.get(k, 0.0) / total for k in domain}, dropped


def identity_observation_pomdp(rng, S, A):
    """Fully observable POMDP with sparse random dynamics."""
    T = []
    for _ in range(A):
        t = np.zeros((S, S))
        for s in range(S):
            succ = rng.choice(S, size=min(S, 3), replace=False)
            t[s, succ] = rng.random(len(succ)) + 0.05
        T.append(t / t.sum(axis=1, keepdims=True))
    R = [np.where(t > 0, rng.normal(size=(S, S)), 0.0) for t in T]
    return Pomdp(range(S), range(A), range(S), T, [np.eye(S)] * A,
                 [np.where(t > 0, r, 0.0) for t, r in zip(T, R)], 0.9)


def value_iteration(P, tol=1e-12):
    T, _, r = P.dense()
    V = np.zeros(P.n_states)
    while True:
        Q = r + P.discount * T @ V
        V2 = Q.max(axis=0)
        if np.max(np.abs(V2 - V)) < tol:
            return Q
        V = V2
