"""Grounding of a knowledge base into the bottom POMDP (no reward, no B0)."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

from .kbmodel import KnowledgeBase, LiteralEntry, RelationEntry
from .pomdp import DEFAULT_DISCOUNT, Pomdp, PomdpBuilder


class GroundingError(ValueError):
    pass


@dataclass(frozen=True)
class BottomPomdp:
    pomdp: Pomdp
    state_tuples: tuple[tuple[str, ...], ...]
    obs_labels: tuple[str, ...]
    variable_names: tuple[str, ...]

    def state_of(self, **assignment) -> int:
        key = tuple(assignment[v] for v in self.variable_names)
        return self.pomdp.state_index[key]


def _valid_states(kb: KnowledgeBase) -> list[tuple[str, ...]]:
    names = [v.name for v in kb.variables]
    forbidden = [dict(t) for t in kb.constraints.forbidden_tuples]
    states = []
    for combo in itertools.product(*(v.values for v in kb.variables)):
        assignment = dict(zip(names, combo))
        if any(all(assignment.get(k) == val for k, val in f.items()) for f in forbidden):
            continue
        states.append(combo)
    return states


def build_bottom(kb: KnowledgeBase, discount: float = DEFAULT_DISCOUNT) -> BottomPomdp:
    """Cross product of value sets, union of actions and observations.

    Executability-forbidden (state, action) pairs become self-loops; mass
    sent to constraint-forbidden states is returned to the self-transition.
    """
    names = tuple(v.name for v in kb.variables)
    var_pos = {n: i for i, n in enumerate(names)}
    states = _valid_states(kb)
    if not states:
        raise GroundingError("every state is forbidden by the state constraints")
    state_index = {s: i for i, s in enumerate(states)}
    actions = [a for a, _ in kb.actions]
    observations = list(dict.fromkeys(o for v in kb.variables for o in v.observations))
    obs_index = {o: i for i, o in enumerate(observations)}

    builder = PomdpBuilder(states, actions, observations)
    for ai, (action, var) in enumerate(kb.actions):
        k = var_pos[var]
        forbidden = kb.forbidden_values(action)
        trans_cache: dict[str, dict[str, float]] = {}
        obs_cache: dict[str, dict[str, float]] = {}
        for si, s in enumerate(states):
            if s[k] in forbidden:
                builder.transition(si, ai, si, 1.0)
            else:
                row = trans_cache.get(s[k])
                if row is None:
                    row = trans_cache[s[k]] = kb.transition_row(action, s[k])
                if not any(p > 0 for p in row.values()):
                    raise GroundingError(f"no legal outcome for ({s}, {action})")
                for value, p in row.items():
                    target = s[:k] + (value,) + s[k + 1:]
                    builder.transition(si, ai, state_index.get(target, si), p)
            orow = obs_cache.get(s[k])
            if orow is None:
                orow = obs_cache[s[k]] = kb.observation_row(action, s[k])
            if not any(p > 0 for p in orow.values()):
                raise GroundingError(f"no observation row for ({s}, {action})")
            for o, p in orow.items():
                builder.observation(si, ai, obs_index[o], p)
    pomdp = builder.build(discount)
    return BottomPomdp(pomdp, tuple(states), tuple(observations), names)


def neighbor_pairs_bottom(kb: KnowledgeBase, bp: BottomPomdp | None = None) -> set[tuple[tuple, tuple]]:
    """Ordered pairs of distinct bottom states related by some action's
    value-value relation (or literal transition entry)."""
    if bp is None:
        bp = build_bottom(kb)
    names = bp.variable_names
    valid = set(bp.state_tuples)
    pairs: set[tuple[tuple, tuple]] = set()
    for action, var in kb.actions:
        k = names.index(var)
        succ: dict[str, set[str]] = {}
        for e in kb.transition_entries(action):
            if isinstance(e, RelationEntry):
                for a, b in kb.relation(e.relation).pairs:
                    succ.setdefault(a, set()).add(b)
            elif isinstance(e, LiteralEntry) and (e.prob is None or e.prob > 0):
                succ.setdefault(e.source, set()).add(e.target)
        forbidden = kb.forbidden_values(action)
        for s in bp.state_tuples:
            if s[k] in forbidden:
                continue
            for value in succ.get(s[k], ()):
                t = s[:k] + (value,) + s[k + 1:]
                if t != s and t in valid:
                    pairs.add((s, t))
    return pairs
