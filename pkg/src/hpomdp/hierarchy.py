"""State-space tree, lifted neighbor relations, abstract actions as local
POMDPs, and the bottom-up construction of the hierarchy of actions."""
from __future__ import annotations

import dataclasses
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .grounding import BottomPomdp
from .kbmodel import ROOT, KBError, KnowledgeBase
from .pbvi import SolverParams, solve
from .pomdp import (AlphaVectorPolicy, Pomdp, PomdpBuilder, _csr, belief_update,
                    best_action, delta_belief, sample_step)

log = logging.getLogger(__name__)

EXTRA, ABSB_G, ABSB_NG = "extra", "absb_g", "absb_ng"
TERMINATE, HELP = "terminate", "help"
NONE_OBS, EXTRA_OBS = "none", "extra"
REWARD_MAGNITUDE = 100.0
STEP_COST = -1.0


class HierarchyError(ValueError):
    pass


def node_name(node: tuple) -> str:
    return ",".join(node)


def derive_seed(master: int, *parts) -> int:
    """Stable per-item seed from a master seed and identifying parts."""
    key = "|".join(str(p) for p in parts).encode()
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(key)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# state space tree


@dataclass
class Sst:
    depth: int
    nodes: list[list[tuple]]          # nodes[h]: ordered nodes at height h
    parent: list[np.ndarray]          # parent[h][i]: index at h-1 (h >= 1)
    children: list[list[list[int]]]   # children[h][i]: indices at h+1
    index: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.index:
            self.index = [{n: i for i, n in enumerate(level)} for level in self.nodes]

    @property
    def root(self) -> tuple:
        return self.nodes[0][0]

    def height_of(self, node: tuple) -> int:
        for h, idx in enumerate(self.index):
            if node in idx:
                return h
        raise KeyError(node)

    def parent_of(self, node: tuple) -> tuple:
        h = self.height_of(node)
        if h == 0:
            raise KeyError("root has no parent")
        return self.nodes[h - 1][self.parent[h][self.index[h][node]]]

    def children_of(self, node: tuple) -> list[tuple]:
        h = self.height_of(node)
        if h == self.depth:
            return []
        return [self.nodes[h + 1][c] for c in self.children[h][self.index[h][node]]]

    def ancestor_index(self, leaf_idx: int, height: int) -> int:
        i = leaf_idx
        for h in range(self.depth, height, -1):
            i = self.parent[h][i]
        return int(i)

    def path(self, leaf: tuple) -> list[tuple]:
        if leaf not in self.index[self.depth]:
            raise KeyError(f"{leaf!r} is not a leaf of the state space tree")
        i = self.index[self.depth][leaf]
        out = [leaf]
        for h in range(self.depth, 0, -1):
            i = self.parent[h][i]
            out.append(self.nodes[h - 1][i])
        return out[::-1]


def build_sst(kb: KnowledgeBase, bp: BottomPomdp) -> Sst:
    hier = kb.hier_fn
    if hier is None:
        raise KBError("knowledge base has no hierarchical function")
    j = bp.variable_names.index(hier.variable)
    F = hier.parent
    depths = {v: hier.depth_of(v) for v in kb.variable(hier.variable).values}
    depth = max(depths.values())
    ragged = sorted(v for v, d in depths.items() if d != depth)
    if ragged:
        raise HierarchyError(f"leaves at the wrong depth (ragged hierarchy): {ragged[:5]}")
    root = tuple(ROOT for _ in bp.variable_names)

    nodes: list[list[tuple]] = [[] for _ in range(depth + 1)]
    nodes[depth] = list(bp.state_tuples)
    parent: list[np.ndarray] = [np.zeros(0, dtype=np.int64) for _ in range(depth + 1)]
    for h in range(depth, 0, -1):
        idx: dict[tuple, int] = {}
        par = np.empty(len(nodes[h]), dtype=np.int64)
        for i, n in enumerate(nodes[h]):
            up = F[n[j]]
            p = root if up == ROOT else n[:j] + (up,) + n[j + 1:]
            if h == 1 and p != root or h > 1 and p == root:
                raise HierarchyError(f"node {n} reaches the root at the wrong height")
            if p not in idx:
                idx[p] = len(idx)
            par[i] = idx[p]
        nodes[h - 1] = list(idx)
        parent[h] = par
    children: list[list[list[int]]] = []
    for h in range(depth + 1):
        ch = [[] for _ in nodes[h]]
        if h < depth:
            for c, p in enumerate(parent[h + 1]):
                ch[p].append(c)
        children.append(ch)
    return Sst(depth, nodes, parent, children)


# ---------------------------------------------------------------------------
# neighbors


@dataclass
class NeighborIndex:
    pairs: list[set]                  # pairs[h]: ordered neighbor pairs at height h
    _out: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._out:
            self._out = []
            for level in self.pairs:
                out: dict[tuple, list] = {}
                for a, b in level:
                    out.setdefault(a, []).append(b)
                self._out.append(out)

    def neighbors(self, height: int, node: tuple, order: dict | None = None) -> list[tuple]:
        """Neig(node); sorted by `order` (node -> index) when given."""
        out = self._out[height].get(node, [])
        if order is not None:
            return sorted(out, key=order.__getitem__)
        return sorted(out)


def lift_neighbors(sst: Sst, bottom_pairs) -> NeighborIndex:
    pairs: list[set] = [set() for _ in range(sst.depth + 1)]
    pairs[sst.depth] = {(a, b) for a, b in bottom_pairs if a != b}
    for h in range(sst.depth, 0, -1):
        idx, par, up = sst.index[h], sst.parent[h], sst.nodes[h - 1]
        lifted = set()
        for a, b in pairs[h]:
            pa, pb = par[idx[a]], par[idx[b]]
            if pa != pb:
                lifted.add((up[pa], up[pb]))
        pairs[h - 1] = lifted
    return NeighborIndex(pairs)


# ---------------------------------------------------------------------------
# local POMDPs


@dataclass
class LocalModel:
    """A local POMDP over nodes at one height plus special states.

    ``lower_actions[k]`` is the action index in the level dynamics for
    regular actions and ``-1``/``-2`` for terminate/help.  ``obs_map`` maps a
    level observation index to the local observation index.
    """
    pomdp: Pomdp
    height: int
    nodes: tuple
    core: tuple
    goals: tuple
    lower_actions: tuple
    obs_map: dict
    extra: int | None
    absb_g: int
    absb_ng: int
    terminate: int
    help: int | None
    extra_obs: int | None
    none_obs: int

    @property
    def n_nonspecial(self) -> int:
        return len(self.nodes)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("height", "extra", "absb_g", "absb_ng", "terminate",
                                           "help", "extra_obs", "none_obs")}
        d.update(
            pomdp=self.pomdp.to_dict(),
            nodes=[list(n) for n in self.nodes],
            core=[list(n) for n in self.core],
            goals=[list(n) for n in self.goals],
            lower_actions=list(self.lower_actions),
            obs_map=[[int(k), int(v)] for k, v in sorted(self.obs_map.items())],
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LocalModel":
        kw = dict(d)
        kw["pomdp"] = Pomdp.from_dict(d["pomdp"])
        for k in ("nodes", "core", "goals"):
            kw[k] = tuple(tuple(n) for n in d[k])
        kw["lower_actions"] = tuple(d["lower_actions"])
        kw["obs_map"] = {k: v for k, v in d["obs_map"]}
        return cls(**kw)


def relevant_actions(lower: Pomdp, local_idx: np.ndarray, sources: list | None) -> list[int]:
    """Level actions with positive probability of moving between two
    distinct local states."""
    local_set = set(local_idx.tolist())
    out = []
    for a in range(lower.n_actions):
        if sources is not None and lower.state_index[sources[a]] not in local_set:
            continue
        for s in local_idx:
            idx, p = lower.transition_row(int(s), a)
            if any(t != s and t in local_set and q > 0 for t, q in zip(idx.tolist(), p.tolist())):
                out.append(a)
                break
    return out


def build_local_pomdp(lower: Pomdp, sources: list | None, height: int, core: list[tuple],
                      goals: list[tuple], neighbors: NeighborIndex, mode: str,
                      with_extra: bool, with_help: bool = False,
                      reward: float = REWARD_MAGNITUDE, node_order: dict | None = None,
                      discount: float | None = None, require_actions: bool = True) -> LocalModel:
    """Local POMDP over `core` plus its outside neighbors.

    mode ``"aa"`` builds an abstract action (terminate pays off anywhere
    outside `core`, with the absorbing goal reached from `goals`); mode
    ``"lp"`` builds a goal-based local policy (terminate pays off only at the
    single goal; help leaves the extra state).
    """
    if mode not in ("aa", "lp"):
        raise ValueError(mode)
    order = node_order if node_order is not None else lower.state_index
    core_set = set(core)
    outer = sorted({t for c in core for t in neighbors.neighbors(height, c) if t not in core_set},
                   key=order.__getitem__)
    nodes = list(core) + outer
    n = len(nodes)
    local_of = {lower.state_index[x]: i for i, x in enumerate(nodes)}
    local_idx = np.array(list(local_of), dtype=np.int64)

    lower_acts = relevant_actions(lower, local_idx, sources)
    if not lower_acts and require_actions:
        raise HierarchyError(f"degenerate abstract action over {[node_name(c) for c in core][:4]}...")
    obs_ids: set[int] = set()
    for a in lower_acts:
        for s in local_idx:
            idx, p = lower.observation_row(int(s), a)
            obs_ids.update(int(o) for o, q in zip(idx, p) if q > 0)
    lower_obs = sorted(obs_ids)

    states = list(nodes)
    extra = None
    if with_extra:
        extra = len(states)
        states.append(EXTRA)
    absb_g, absb_ng = len(states), len(states) + 1
    states += [ABSB_G, ABSB_NG]
    actions = [lower.actions[a] for a in lower_acts] + [TERMINATE]
    term = len(actions) - 1
    help_ = None
    if with_help:
        help_ = len(actions)
        actions.append(HELP)
    observations = [lower.observations[o] for o in lower_obs] + [NONE_OBS]
    none_obs = len(observations) - 1
    extra_obs = None
    if with_extra:
        extra_obs = len(observations)
        observations.append(EXTRA_OBS)
    obs_map = {o: i for i, o in enumerate(lower_obs)}

    node_pos = {x: i for i, x in enumerate(nodes)}
    goal_set = {node_pos[g] for g in goals if g in node_pos}
    core_ids = set(range(len(core)))
    avoid = set(range(n)) - core_ids - goal_set
    src_local = None
    if sources is not None:
        src_local = [sources[a] for a in lower_acts]
    R, step = reward, STEP_COST

    def r_lower(s, k, s2):
        if s == extra or s2 == extra or s2 in avoid:
            return -R
        if s in (absb_g, absb_ng):
            return step
        if src_local is not None and (s >= n or nodes[s] != src_local[k]):
            return -R
        return step

    def r_term(s):
        if s == absb_g:
            return R
        if mode == "aa":
            if s == absb_ng:
                return step
            return -R if s in core_ids else R
        return R if s in goal_set else -R

    b = PomdpBuilder(states, actions, observations)
    for s in range(n):
        ls = lower.state_index[nodes[s]]
        for k, a in enumerate(lower_acts):
            idx, p = lower.transition_row(ls, a)
            for t, q in zip(idx.tolist(), p.tolist()):
                s2 = local_of.get(t)
                if s2 is None:
                    if extra is None:
                        raise HierarchyError(f"transition leaves the local space of {node_name(core[0])} "
                                             f"without an extra state")
                    s2 = extra
                b.transition(s, k, s2, q, r_lower(s, k, s2))
            oidx, op = lower.observation_row(ls, a)
            for o, q in zip(oidx.tolist(), op.tolist()):
                b.observation(s, k, obs_map[o], q)
        b.transition(s, term, absb_g if s in goal_set else absb_ng, 1.0, r_term(s))
        if help_ is not None:
            b.transition(s, help_, absb_ng, 1.0, -R)
    if extra is not None:
        for k in range(len(lower_acts)):
            b.transition(extra, k, extra, 1.0, -R)
            b.observation(extra, k, extra_obs, 1.0)
        if mode == "aa":
            b.transition(extra, term, absb_ng, 1.0, r_term(extra))
        else:
            b.transition(extra, term, extra, 1.0, -R)
        if help_ is not None:
            b.transition(extra, help_, absb_ng, 1.0, R)
    for s in (absb_g, absb_ng):
        for k in range(len(lower_acts)):
            b.transition(s, k, s, 1.0, r_lower(s, k, s))
            b.observation(s, k, none_obs, 1.0)
        b.transition(s, term, s, 1.0, r_term(s))
        if help_ is not None:
            target = absb_g if s == absb_g else absb_ng
            b.transition(s, help_, target, 1.0, -R)
    for s in range(len(states)):
        b.observation(s, term, none_obs, 1.0)
        if help_ is not None:
            b.observation(s, help_, none_obs, 1.0)

    gamma = discount if discount is not None else lower.discount
    pomdp = b.build(gamma, with_reward=True)
    return LocalModel(
        pomdp=pomdp, height=height, nodes=tuple(nodes), core=tuple(core),
        goals=tuple(nodes[i] for i in sorted(goal_set)),
        lower_actions=tuple(lower_acts) + (-1,) + ((-2,) if help_ is not None else ()),
        obs_map=obs_map, extra=extra, absb_g=absb_g, absb_ng=absb_ng, terminate=term,
        help=help_, extra_obs=extra_obs, none_obs=none_obs,
    )


def local_seed_beliefs(local: LocalModel) -> np.ndarray:
    """Delta beliefs on every non-special local state."""
    return np.eye(local.pomdp.n_states)[:local.n_nonspecial]


# ---------------------------------------------------------------------------
# abstract actions and levels


@dataclass
class AbstractAction:
    source: tuple
    target: tuple
    height: int
    local: LocalModel
    policy: AlphaVectorPolicy
    outcome_row: dict = field(default_factory=dict)
    discarded: float = 0.0

    @property
    def label(self) -> str:
        return f"{node_name(self.source)}>{node_name(self.target)}"

    def to_dict(self) -> dict:
        return {
            "source": list(self.source), "target": list(self.target), "height": self.height,
            "local": self.local.to_dict(), "policy": self.policy.to_dict(),
            "outcome_row": [[list(k), v] for k, v in self.outcome_row.items()],
            "discarded": self.discarded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AbstractAction":
        return cls(tuple(d["source"]), tuple(d["target"]), d["height"],
                   LocalModel.from_dict(d["local"]), AlphaVectorPolicy.from_dict(d["policy"]),
                   {tuple(k): v for k, v in d["outcome_row"]}, d["discarded"])


@dataclass
class HierarchyLevel:
    height: int
    pomdp: Pomdp
    abstract_actions: list[AbstractAction]

    @property
    def sources(self) -> list[tuple]:
        return [aa.source for aa in self.abstract_actions]


def build_level(height: int, sst: Sst, aas: list[AbstractAction],
                discount: float) -> HierarchyLevel:
    """Abstract-level dynamics: outcome rows from each action's source,
    identity elsewhere, and one certain observation per state."""
    states = sst.nodes[height]
    idx = sst.index[height]
    n = len(states)
    eye = _csr(np.arange(n), np.arange(n), np.ones(n), (n, n))
    trans = []
    for aa in aas:
        si = idx[aa.source]
        rows = [r for r in range(n) if r != si]
        cols, vals = list(rows), [1.0] * len(rows)
        for node, p in aa.outcome_row.items():
            if p > 0:
                rows.append(si)
                cols.append(idx[node])
                vals.append(p)
        trans.append(_csr(rows, cols, vals, (n, n)))
    pomdp = Pomdp(states, [aa.label for aa in aas], [f"o:{node_name(s)}" for s in states],
                  trans, [eye] * len(aas), None, discount)
    return HierarchyLevel(height, pomdp, aas)


def estimate_outcome_row(aa: AbstractAction, lower: Pomdp, sst: Sst, neighbors: NeighborIndex,
                         M: int, max_steps: int, rng: np.random.Generator):
    """Monte-Carlo estimate of where the abstract action ends, over
    ``{source} ∪ Neig(source)``; returns ``(row, discarded_fraction)``."""
    if M <= 0:
        raise ValueError("number of simulations M must be positive")
    local = aa.local
    P = local.pomdp
    d = aa.height
    domain = [aa.source] + neighbors.neighbors(d, aa.source, sst.index[d])
    counts = dict.fromkeys(domain, 0)
    n_local = local.n_nonspecial
    for _ in range(M):
        s0 = int(rng.integers(n_local))
        s_true = lower.state_index[local.nodes[s0]]
        b = delta_belief(P.n_states, s0)
        for _ in range(max_steps):
            a, _ = best_action(aa.policy, b)
            if a == local.terminate:
                break
            s_true, o = sample_step(lower, s_true, local.lower_actions[a], rng)
            b, _ = belief_update(P, b, a, local.obs_map.get(o, local.extra_obs))
        end = sst.nodes[d][_ancestor(sst, lower.states[s_true], d)]
        if end in counts:
            counts[end] += 1
    total = sum(counts.values())
    discarded = 1.0 - total / M
    if total == 0:
        return {aa.source: 1.0}, discarded
    return {k: v / total for k, v in counts.items() if v > 0}, discarded


def _ancestor(sst: Sst, node: tuple, height: int) -> int:
    h = sst.height_of(node)
    i = sst.index[h][node]
    for hh in range(h, height, -1):
        i = sst.parent[hh][i]
    return int(i)


# ---------------------------------------------------------------------------
# hierarchy


@dataclass(frozen=True)
class HierarchyParams:
    reward: float = REWARD_MAGNITUDE
    simulations: int = 100
    solver: SolverParams = SolverParams()
    seed: int = 0
    max_steps_factor: int = 20


@dataclass
class Hierarchy:
    levels: list[HierarchyLevel]      # heights depth-1 ... 1
    bp: BottomPomdp
    sst: Sst
    neighbors: NeighborIndex
    params: HierarchyParams = HierarchyParams()
    init_seconds: float = 0.0

    def level(self, height: int) -> HierarchyLevel:
        return self.levels[self.sst.depth - 1 - height]

    def dynamics(self, height: int) -> tuple[Pomdp, list | None]:
        """(level POMDP, action sources or None) for nodes at `height`."""
        if height == self.sst.depth:
            return self.bp.pomdp, None
        lvl = self.level(height)
        return lvl.pomdp, lvl.sources

    def abstract_action(self, height: int, k: int) -> AbstractAction:
        return self.level(height).abstract_actions[k]

    def all_abstract_actions(self):
        for lvl in self.levels:
            yield from lvl.abstract_actions


def build_abstract_action(s_i: tuple, s_j: tuple, d: int, lower: Pomdp, sources, sst: Sst,
                          neighbors: NeighborIndex, params: HierarchyParams) -> AbstractAction:
    core = sst.children_of(s_i)
    goals = sst.children_of(s_j)
    local = build_local_pomdp(lower, sources, d + 1, core, goals, neighbors, "aa",
                              with_extra=True, reward=params.reward,
                              node_order=sst.index[d + 1])
    seed = derive_seed(params.seed, d, node_name(s_i), node_name(s_j))
    policy = solve(local.pomdp, local_seed_beliefs(local),
                   dataclasses.replace(params.solver, seed=seed))
    aa = AbstractAction(s_i, s_j, d, local, policy)
    rng = np.random.default_rng(seed)
    aa.outcome_row, aa.discarded = estimate_outcome_row(
        aa, lower, sst, neighbors, params.simulations,
        params.max_steps_factor * local.pomdp.n_states, rng)
    if aa.discarded > 0:
        log.debug("%s: %.3f of simulations ended outside the neighborhood", aa.label, aa.discarded)
    return aa


def build_hierarchy(bp: BottomPomdp, sst: Sst, neighbors: NeighborIndex,
                    params: HierarchyParams = HierarchyParams()) -> Hierarchy:
    """Build abstract actions level by level, from height depth-1 up to 1."""
    levels: list[HierarchyLevel] = []
    lower, sources = bp.pomdp, None
    for d in range(sst.depth - 1, 0, -1):
        aas = []
        for s_i in sst.nodes[d]:
            for s_j in neighbors.neighbors(d, s_i, sst.index[d]):
                aas.append(build_abstract_action(s_i, s_j, d, lower, sources, sst, neighbors, params))
        level = build_level(d, sst, aas, bp.pomdp.discount)
        levels.append(level)
        lower, sources = level.pomdp, level.sources
        log.info("height %d: %d abstract actions", d, len(aas))
    return Hierarchy(levels, bp, sst, neighbors, params)


def hierarchy_to_dict(h: Hierarchy) -> dict:
    p = h.params
    return {
        "params": {"reward": p.reward, "simulations": p.simulations, "seed": p.seed,
                   "max_steps_factor": p.max_steps_factor,
                   "solver": dataclasses.asdict(p.solver)},
        "levels": [{"height": lvl.height,
                    "actions": [aa.to_dict() for aa in lvl.abstract_actions]}
                   for lvl in h.levels],
    }


def hierarchy_from_dict(d: dict, bp: BottomPomdp, sst: Sst, neighbors: NeighborIndex) -> Hierarchy:
    pd = dict(d["params"])
    pd["solver"] = SolverParams(**pd["solver"])
    params = HierarchyParams(**pd)
    levels = []
    for lvl in d["levels"]:
        aas = [AbstractAction.from_dict(a) for a in lvl["actions"]]
        levels.append(build_level(lvl["height"], sst, aas, bp.pomdp.discount))
    return Hierarchy(levels, bp, sst, neighbors, params)
