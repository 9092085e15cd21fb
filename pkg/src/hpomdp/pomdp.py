"""Discrete POMDPs with sparse rows, beliefs, alpha-vector policies and a
seeded simulator.

Transition and observation functions are stored per action as CSR matrices
(rows sorted by target index).  The observation function is keyed by the
*reached* state: ``observation_fn[a][s2, o] = P(o | s2, a)``.  Rewards live on
``(s, a, s2)`` triples and share the sparsity pattern of the transition
matrix, so every transition with positive probability carries a reward.
Beliefs are plain 1-d float arrays over the state list.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
import scipy.sparse as sp

ROW_TOL = 1e-9
DEFAULT_DISCOUNT = 0.95
NORMALIZER_EPS = 1e-12
DENSE_LIMIT = 256  # belief updates use dense arrays up to this many states


class PomdpError(ValueError):
    pass


class Pomdp:
    """Immutable discrete POMDP.

    Parameters
    ----------
    states, actions, observations : sequences of hashable labels
    transition : list of (S, S) CSR matrices, one per action
    observation_fn : list of (S, O) CSR matrices, one per action
    reward : list of (S, S) CSR matrices aligned with `transition`, or None
    discount : float in (0, 1)
    """

    def __init__(self, states, actions, observations, transition, observation_fn,
                 reward=None, discount: float = DEFAULT_DISCOUNT):
        self.states = tuple(states)
        self.actions = tuple(actions)
        self.observations = tuple(observations)
        self.transition = [sp.csr_matrix(m) for m in transition]
        self.observation_fn = [sp.csr_matrix(m) for m in observation_fn]
        for m in self.transition + self.observation_fn:
            m.sort_indices()
        self.reward = None if reward is None else [sp.csr_matrix(m) for m in reward]
        if not 0.0 < discount < 1.0:
            raise PomdpError(f"discount must be in (0, 1), got {discount}")
        self.discount = float(discount)
        nS, nA, nO = len(self.states), len(self.actions), len(self.observations)
        if len(self.transition) != nA or len(self.observation_fn) != nA:
            raise PomdpError("one transition and observation matrix per action required")
        for m in self.transition:
            if m.shape != (nS, nS):
                raise PomdpError(f"transition shape {m.shape} != {(nS, nS)}")
        for m in self.observation_fn:
            if m.shape != (nS, nO):
                raise PomdpError(f"observation shape {m.shape} != {(nS, nO)}")
        self.state_index = {s: i for i, s in enumerate(self.states)}
        self.action_index = {a: i for i, a in enumerate(self.actions)}
        self.observation_index = {o: i for i, o in enumerate(self.observations)}
        self._transposed = None
        self._obs_csc = None
        self._dense = None
        self._dense_tz = None

    @property
    def n_states(self):
        return len(self.states)

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def n_observations(self):
        return len(self.observations)

    def transition_T(self, a: int):
        if self._transposed is None:
            self._transposed = [m.T.tocsr() for m in self.transition]
        return self._transposed[a]

    def observation_column(self, a: int, o: int):
        """(state indices, probabilities) of P(o | ., a)."""
        if self._obs_csc is None:
            self._obs_csc = [m.tocsc() for m in self.observation_fn]
        m = self._obs_csc[a]
        lo, hi = m.indptr[o], m.indptr[o + 1]
        return m.indices[lo:hi], m.data[lo:hi]

    def transition_row(self, s: int, a: int):
        m = self.transition[a]
        lo, hi = m.indptr[s], m.indptr[s + 1]
        return m.indices[lo:hi], m.data[lo:hi]

    def observation_row(self, s2: int, a: int):
        m = self.observation_fn[a]
        lo, hi = m.indptr[s2], m.indptr[s2 + 1]
        return m.indices[lo:hi], m.data[lo:hi]

    def expected_reward(self) -> np.ndarray:
        """r[a, s] = sum_s2 T(s, a, s2) R(s, a, s2)."""
        if self.reward is None:
            raise PomdpError("POMDP has no reward")
        return np.stack([
            np.asarray(t.multiply(r).sum(axis=1)).ravel()
            for t, r in zip(self.transition, self.reward)
        ])

    def dense_tz(self):
        """Dense (T[A,S,S], Z[A,S,O]) arrays."""
        if self._dense_tz is None:
            nS, nO = self.n_states, self.n_observations
            T = np.stack([m.toarray() for m in self.transition]) if self.transition \
                else np.zeros((0, nS, nS))
            Z = np.stack([m.toarray() for m in self.observation_fn]) if self.observation_fn \
                else np.zeros((0, nS, nO))
            self._dense_tz = (T, Z)
        return self._dense_tz

    def dense(self):
        """Dense (T[A,S,S], Z[A,S,O], r[A,S]) arrays for solvers."""
        if self._dense is None:
            T, Z = self.dense_tz()
            r = self.expected_reward() if self.reward is not None else None
            self._dense = (T, Z, r)
        return self._dense

    def check(self) -> list[str]:
        """Row-normalization and reward-coverage problems (empty if valid)."""
        problems = []
        for a, (t, z) in enumerate(zip(self.transition, self.observation_fn)):
            for name, m in (("transition", t), ("observation", z)):
                if m.nnz and (m.data < 0).any():
                    problems.append(f"negative {name} probability for action {self.actions[a]!r}")
                sums = np.asarray(m.sum(axis=1)).ravel()
                bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
                for s in bad[:5]:
                    problems.append(
                        f"{name} row ({self.states[s]!r}, {self.actions[a]!r}) sums to {sums[s]:.12g}")
            if self.reward is not None:
                r = self.reward[a]
                same = (np.array_equal(r.indptr, t.indptr) and np.array_equal(r.indices, t.indices))
                if not same:
                    problems.append(f"reward pattern differs from transition for {self.actions[a]!r}")
                elif not np.all(np.isfinite(r.data[t.data > 0])):
                    problems.append(f"undefined reward on a possible transition of {self.actions[a]!r}")
        return problems

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        def entries(mats):
            out = []
            for a, m in enumerate(mats):
                coo = m.tocoo()
                order = np.lexsort((coo.col, coo.row))
                out.extend([a, int(coo.row[i]), int(coo.col[i]), float(coo.data[i])] for i in order)
            return out

        return {
            "discount": self.discount,
            "states": [_label_out(s) for s in self.states],
            "actions": [_label_out(a) for a in self.actions],
            "observations": [_label_out(o) for o in self.observations],
            "transition": entries(self.transition),
            "observation": entries(self.observation_fn),
            "reward": None if self.reward is None else entries(self.reward),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pomdp":
        states = [_label_in(s) for s in d["states"]]
        actions = [_label_in(a) for a in d["actions"]]
        observations = [_label_in(o) for o in d["observations"]]
        nS, nA, nO = len(states), len(actions), len(observations)

        def mats(entries, ncols):
            buckets = [([], [], []) for _ in range(nA)]
            for a, r, c, v in entries:
                buckets[a][0].append(r)
                buckets[a][1].append(c)
                buckets[a][2].append(v)
            return [_csr(rows, cols, vals, (nS, ncols)) for rows, cols, vals in buckets]

        reward = None if d.get("reward") is None else mats(d["reward"], nS)
        return cls(states, actions, observations, mats(d["transition"], nS),
                   mats(d["observation"], nO), reward, d["discount"])


def _csr(rows, cols, vals, shape):
    """CSR matrix that keeps explicit entries (including zeros) in row order."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    m = sp.csr_matrix((vals, cols, indptr), shape=shape)
    m.has_sorted_indices = True
    return m


def _label_out(label):
    return list(label) if isinstance(label, tuple) else label


def _label_in(label):
    return tuple(label) if isinstance(label, list) else label


class PomdpBuilder:
    """Accumulates sparse entries and produces a :class:`Pomdp`.

    Repeated (s, a, s2) transition entries are summed; a reward set for a
    triple applies to the merged entry.
    """

    def __init__(self, states: Sequence[Hashable], actions: Sequence[Hashable],
                 observations: Sequence[Hashable]):
        self.states = list(states)
        self.actions = list(actions)
        self.observations = list(observations)
        self._t = [dict() for _ in self.actions]
        self._z = [dict() for _ in self.actions]
        self._r = [dict() for _ in self.actions]

    def transition(self, s: int, a: int, s2: int, p: float, reward: float | None = None):
        if p <= 0.0:
            return
        row = self._t[a]
        row[(s, s2)] = row.get((s, s2), 0.0) + p
        if reward is not None:
            self._r[a][(s, s2)] = reward

    def observation(self, s2: int, a: int, o: int, p: float):
        if p <= 0.0:
            return
        row = self._z[a]
        row[(s2, o)] = row.get((s2, o), 0.0) + p

    def set_reward(self, s: int, a: int, s2: int, reward: float):
        self._r[a][(s, s2)] = reward

    def build(self, discount: float = DEFAULT_DISCOUNT, with_reward: bool = False) -> Pomdp:
        nS, nO = len(self.states), len(self.observations)
        trans, obs, rew = [], [], []
        for a in range(len(self.actions)):
            keys = sorted(self._t[a])
            rows = [k[0] for k in keys]
            cols = [k[1] for k in keys]
            trans.append(_csr(rows, cols, [self._t[a][k] for k in keys], (nS, nS)))
            if with_reward:
                rew.append(_csr(rows, cols, [self._r[a].get(k, np.nan) for k in keys], (nS, nS)))
            zkeys = sorted(self._z[a])
            obs.append(_csr([k[0] for k in zkeys], [k[1] for k in zkeys],
                            [self._z[a][k] for k in zkeys], (nS, nO)))
        return Pomdp(self.states, self.actions, self.observations, trans, obs,
                     rew if with_reward else None, discount)


# ---------------------------------------------------------------------------
# beliefs


def delta_belief(n: int, i: int) -> np.ndarray:
    b = np.zeros(n)
    b[i] = 1.0
    return b


def uniform_belief(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def is_belief(b: np.ndarray, tol: float = 1e-9) -> bool:
    b = np.asarray(b)
    return b.ndim == 1 and bool(np.all(b >= 0)) and abs(b.sum() - 1.0) <= tol


def belief_update(P: Pomdp, b: np.ndarray, a: int, o: int) -> tuple[np.ndarray, bool]:
    """Bayes filter step.

    Returns ``(posterior, consistent)``.  When the observation has (numerically)
    zero likelihood under the prediction, the prediction-only belief is
    returned with ``consistent=False``.
    """
    if not 0 <= a < P.n_actions or not 0 <= o < P.n_observations:
        raise PomdpError(f"invalid action/observation index ({a}, {o})")
    if P.n_states <= DENSE_LIMIT:
        T, Z = P.dense_tz()
        pred = b @ T[a]
        post = pred * Z[a][:, o]
    else:
        pred = P.transition_T(a) @ b
        idx, lik = P.observation_column(a, o)
        post = np.zeros_like(pred)
        post[idx] = pred[idx] * lik
    norm = post.sum()
    if norm < NORMALIZER_EPS:
        return pred / pred.sum(), False
    return post / norm, True


# ---------------------------------------------------------------------------
# policies


@dataclass(eq=False)
class AlphaVectorPolicy:
    """Piecewise-linear value function; ``actions[k]`` is the action of
    ``vectors[k]``."""
    vectors: np.ndarray
    actions: np.ndarray
    state_labels: tuple = ()

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        if len(self.vectors) == 0:
            raise PomdpError("policy needs at least one alpha vector")
        if len(self.actions) != len(self.vectors):
            raise PomdpError("one action per alpha vector required")

    def value(self, b: np.ndarray) -> float:
        return float(np.max(self.vectors @ b))

    def to_dict(self) -> dict:
        return {
            "actions": self.actions.tolist(),
            "vectors": self.vectors.tolist(),
            "state_labels": [_label_out(s) for s in self.state_labels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaVectorPolicy":
        return cls(np.array(d["vectors"], dtype=float), np.array(d["actions"], dtype=np.int64),
                   tuple(_label_in(s) for s in d["state_labels"]))


def best_action(pol: AlphaVectorPolicy, b: np.ndarray) -> tuple[int, float]:
    """Action of the maximizing vector; ties go to the lowest vector index."""
    b = np.asarray(b, dtype=float)
    if b.shape != (pol.vectors.shape[1],):
        raise PomdpError(f"belief of length {b.shape} does not match {pol.vectors.shape[1]} states")
    values = pol.vectors @ b
    k = int(np.argmax(values))
    return int(pol.actions[k]), float(values[k])


# ---------------------------------------------------------------------------
# simulation


def _draw(indices: np.ndarray, probs: np.ndarray, u: float) -> int:
    cum = probs.cumsum()
    k = int(cum.searchsorted(u * cum[-1], side="right"))
    return int(indices[min(k, len(indices) - 1)])


def sample_step(P: Pomdp, s: int, a: int, rng: np.random.Generator) -> tuple[int, int]:
    """Sample (s2, o); always consumes exactly two uniform draws."""
    idx, probs = P.transition_row(s, a)
    if len(idx) == 0:
        raise PomdpError(f"no transition row for ({P.states[s]!r}, {P.actions[a]!r})")
    s2 = _draw(idx, probs, rng.random())
    oidx, oprobs = P.observation_row(s2, a)
    if len(oidx) == 0:
        raise PomdpError(f"no observation row for ({P.states[s2]!r}, {P.actions[a]!r})")
    return s2, _draw(oidx, oprobs, rng.random())


@dataclass
class Trace:
    steps: list = field(default_factory=list)  # (s, a, o, b) before each step
    final_state: int = -1
    last_action: int | None = None
    truncated: bool = False

    def __len__(self):
        return len(self.steps)


def simulate_policy(P: Pomdp, pol: AlphaVectorPolicy, s0: int, b0: np.ndarray,
                    stop: Callable[[int], bool], max_steps: int,
                    rng: np.random.Generator) -> Trace:
    """Run `pol` on the true model `P` until ``stop(action)`` or `max_steps`."""
    trace = Trace(final_state=s0)
    s, b = s0, np.asarray(b0, dtype=float)
    for _ in range(max_steps):
        a, _ = best_action(pol, b)
        trace.last_action = a
        if stop(a):
            trace.final_state = s
            return trace
        s2, o = sample_step(P, s, a, rng)
        trace.steps.append((s, a, o, b))
        b, _ = belief_update(P, b, a, o)
        s = s2
    trace.final_state = s
    trace.truncated = True
    return trace
