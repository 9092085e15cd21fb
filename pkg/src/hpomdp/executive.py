"""Hierarchical policies for goal requests and their execution against an
environment, driven by a multi-resolution (global) belief."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .hierarchy import (HELP, TERMINATE, Hierarchy, LocalModel, Sst, build_local_pomdp,
                        derive_seed, node_name)
from .pbvi import SolverParams, solve
from .pomdp import AlphaVectorPolicy, Pomdp, belief_update, best_action, sample_step

log = logging.getLogger(__name__)

COVERAGE_TOL = 1e-9
RATIO_SNAP = 1e-12


class ExecutionError(RuntimeError):
    pass


class BudgetExhausted(ExecutionError):
    pass


# ---------------------------------------------------------------------------
# global belief


@dataclass
class GlobalBelief:
    """Per-height probability arrays mirroring the SST; ``levels[h][i]`` is
    the probability of ``sst.nodes[h][i]``."""
    sst: Sst
    levels: list[np.ndarray]

    @property
    def leaves(self) -> np.ndarray:
        return self.levels[self.sst.depth]

    def probability(self, node: tuple) -> float:
        h = self.sst.height_of(node)
        return float(self.levels[h][self.sst.index[h][node]])

    def max_parent_gap(self) -> float:
        """Largest |p(node) - sum of children| over internal nodes."""
        gap = abs(float(self.levels[0].sum()) - 1.0)
        for h in range(1, self.sst.depth + 1):
            sums = np.bincount(self.sst.parent[h], weights=self.levels[h],
                               minlength=len(self.levels[h - 1]))
            gap = max(gap, float(np.max(np.abs(sums - self.levels[h - 1]))))
        return gap

    def copy(self) -> "GlobalBelief":
        return GlobalBelief(self.sst, [lv.copy() for lv in self.levels])


def _aggregate(sst: Sst, leaves: np.ndarray) -> list[np.ndarray]:
    levels = [np.empty(0)] * (sst.depth + 1)
    levels[sst.depth] = leaves
    for h in range(sst.depth, 0, -1):
        levels[h - 1] = np.bincount(sst.parent[h], weights=levels[h], minlength=len(sst.nodes[h - 1]))
    return levels


def build_global_belief(b0: np.ndarray, sst: Sst) -> GlobalBelief:
    b0 = np.asarray(b0, dtype=float)
    if b0.shape != (len(sst.nodes[sst.depth]),):
        raise ValueError(f"initial belief has {b0.shape} entries, expected {len(sst.nodes[sst.depth])}")
    if np.any(b0 < 0) or abs(b0.sum() - 1.0) > 1e-9:
        raise ValueError("initial belief is not normalized")
    return GlobalBelief(sst, _aggregate(sst, b0.copy()))


def update_global_belief(B: GlobalBelief, bp: Pomdp, a: int, z: int) -> tuple[GlobalBelief, bool]:
    """Bayes update of the bottom level, then child sums upwards."""
    leaves, consistent = belief_update(bp, B.leaves, a, z)
    return GlobalBelief(B.sst, _aggregate(B.sst, leaves)), consistent


def hierarchical_state(goal: tuple, sst: Sst) -> list[tuple]:
    """Path ``[root, ..., goal]`` through the SST."""
    return sst.path(goal)


def map_belief_to_local(local: LocalModel, B: GlobalBelief) -> np.ndarray:
    """Local belief: in-space nodes copy the global probability, the rest of
    the height's mass goes to ``extra``, absorbing states get zero."""
    h = local.height
    idx = B.sst.index[h]
    probs = B.levels[h]
    pos = np.fromiter((idx[n] for n in local.nodes), dtype=np.int64, count=local.n_nonspecial)
    b = np.zeros(local.pomdp.n_states)
    b[:local.n_nonspecial] = probs[pos]
    outside = max(0.0, float(probs.sum() - b.sum()))
    if local.extra is None:
        if outside > COVERAGE_TOL:
            raise ExecutionError(f"coverage violation: {outside:.3g} of the belief lies outside "
                                 f"a local space without an extra state")
    else:
        b[local.extra] = outside
    total = b.sum()
    return b / total if total > 0 else b


def _outside_probs(local: LocalModel, B: GlobalBelief) -> np.ndarray:
    h = local.height
    mask = np.ones(len(B.levels[h]), dtype=bool)
    mask[[B.sst.index[h][n] for n in local.nodes]] = False
    return B.levels[h][mask]


def entropy_ratio(q: np.ndarray) -> float:
    """Normalized entropy E/E_max of the out-of-space mass (0 if degenerate)."""
    total = float(q.sum())
    if len(q) <= 1 or total < 1e-12:
        return 0.0
    p = q[q > 0] / total
    ratio = float(-(p * np.log(p)).sum() / np.log(len(q)))
    # a uniform spread is exactly 1; log round-off would otherwise leave 1 - eps
    return 1.0 if ratio > 1.0 - RATIO_SNAP else min(ratio, 1.0)


def entropy_weight(policy: AlphaVectorPolicy, local: LocalModel, B: GlobalBelief) -> AlphaVectorPolicy:
    """Shrink the extra coordinate of every vector by the dispersion of the
    mass it stands for; the policy is returned unchanged when E = 0."""
    if local.extra is None:
        raise ExecutionError("local state space has no extra state")
    ratio = entropy_ratio(_outside_probs(local, B))
    if ratio == 0.0:
        return policy
    vecs = policy.vectors.copy()
    col = vecs[:, local.extra]
    vecs[:, local.extra] = col / (1.0 + np.abs(col * ratio))
    return AlphaVectorPolicy(vecs, policy.actions, policy.state_labels)


# ---------------------------------------------------------------------------
# hierarchical policies


@dataclass
class LocalPolicy:
    height: int
    goal: tuple
    local: LocalModel
    policy: AlphaVectorPolicy

    @property
    def states(self) -> tuple:
        return self.local.pomdp.states

    @property
    def actions(self) -> tuple:
        return self.local.pomdp.actions


@dataclass
class HierarchicalPolicy:
    goal: tuple
    goal_path: list[tuple]
    policies: list[LocalPolicy]
    planning_seconds: float = 0.0

    def __len__(self):
        return len(self.policies)


def local_policy_seeds(local: LocalModel, B: GlobalBelief | None) -> np.ndarray:
    """Delta beliefs on every non-special local state, plus the mapped
    initial belief when one is given."""
    seeds = list(np.eye(local.pomdp.n_states)[:local.n_nonspecial])
    if B is not None:
        try:
            seeds.append(map_belief_to_local(local, B))
        except ExecutionError:
            pass
    return np.asarray(seeds)


def build_local_policy(goal_path: list[tuple], i: int, hierarchy: Hierarchy,
                       solver: SolverParams = SolverParams(),
                       B: GlobalBelief | None = None) -> LocalPolicy:
    """Local policy driving the agent to ``goal_path[i]`` among the children
    of ``goal_path[i-1]``."""
    sst = hierarchy.sst
    if not 1 <= i <= sst.depth:
        raise ValueError(f"local policy height {i} outside 1..{sst.depth}")
    goal = goal_path[i]
    if goal not in sst.index[i]:
        raise ValueError(f"goal node {goal} is not at height {i}")
    lower, sources = hierarchy.dynamics(i)
    core = sst.children_of(goal_path[i - 1])
    local = build_local_pomdp(lower, sources, i, core, [goal], hierarchy.neighbors, "lp",
                              with_extra=i > 1, with_help=i > 1, reward=hierarchy.params.reward,
                              node_order=sst.index[i], require_actions=False)
    seed = derive_seed(solver.seed, "lp", i, node_name(goal))
    policy = solve(local.pomdp, local_policy_seeds(local, B), dataclasses.replace(solver, seed=seed))
    return LocalPolicy(i, goal, local, policy)


def build_hierarchical_policy(goal: tuple, hierarchy: Hierarchy,
                              solver: SolverParams | None = None,
                              b0: np.ndarray | None = None) -> HierarchicalPolicy:
    """One local policy per non-root node of the goal's hierarchical state,
    ordered top-down; the wall-clock build time is the planning time."""
    t0 = time.perf_counter()
    solver = solver or hierarchy.params.solver
    path = hierarchical_state(tuple(goal), hierarchy.sst)
    B = build_global_belief(b0, hierarchy.sst) if b0 is not None else None
    policies = [build_local_policy(path, i, hierarchy, solver, B) for i in range(1, len(path))]
    return HierarchicalPolicy(tuple(goal), path, policies, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# environments


class EnvironmentPort(Protocol):
    def execute(self, action: int) -> int:
        """Perform a concrete action (bottom POMDP index); return the observation index."""
        ...


class SimulatedEnvironment:
    """Environment simulated from the bottom POMDP with its own generator."""

    def __init__(self, bp: Pomdp, state: int, rng: np.random.Generator | int):
        self.bp = bp
        self.state = int(state)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.steps = 0

    def execute(self, action: int) -> int:
        self.state, o = sample_step(self.bp, self.state, action, self.rng)
        self.steps += 1
        return o

    @property
    def true_state(self) -> int:
        return self.state


# ---------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class Budgets:
    per_policy_factor: int = 20        # decisions per policy invocation = factor * |S_loc|
    concrete_actions: int | None = None  # default: 50 * number of bottom states
    oscillation: int = 10
    decisions_factor: int = 20         # total decisions cap = factor * concrete budget


@dataclass
class ExecutionReport:
    task_id: str = ""
    seed: int = 0
    success: bool = False
    failed: bool = False
    reason: str = ""
    concrete_actions: int = 0
    planning_seconds: float = 0.0
    execution_seconds: float = 0.0
    final_distance: float = float("nan")
    final_belief: np.ndarray | None = None
    truncations: int = 0
    stalls: int = 0
    transfers: list = field(default_factory=list)   # (from LP index, returned action, to LP index)
    actions: list = field(default_factory=list)     # (concrete action, observation)

    FIELDS = ("task_id", "seed", "success", "concrete_actions", "planning_seconds",
              "execution_seconds", "final_distance")

    def record(self, sep: str = ",") -> str:
        vals = [self.task_id, str(self.seed), "1" if self.success else "0", str(self.concrete_actions),
                f"{self.planning_seconds:.6f}", f"{self.execution_seconds:.6f}", f"{self.final_distance:g}"]
        return sep.join(vals)


class _Run:
    def __init__(self, hierarchy: Hierarchy, env: EnvironmentPort, B: GlobalBelief,
                 budgets: Budgets, report: ExecutionReport):
        self.h = hierarchy
        self.env = env
        self.B = B
        self.budgets = budgets
        self.report = report
        n = hierarchy.bp.pomdp.n_states
        self.max_concrete = budgets.concrete_actions or 50 * n
        self.max_decisions = budgets.decisions_factor * self.max_concrete
        self.decisions = 0

    def concrete(self, a: int) -> None:
        if self.report.concrete_actions >= self.max_concrete:
            raise BudgetExhausted("global concrete-action budget exhausted")
        z = self.env.execute(a)
        self.report.concrete_actions += 1
        self.report.actions.append((a, z))
        self.B, _ = update_global_belief(self.B, self.h.bp.pomdp, a, z)

    def execute(self, local: LocalModel, policy: AlphaVectorPolicy) -> tuple[str, bool]:
        """Run one policy until terminate/help; returns (action, truncated).

        An abstract action that returns without any concrete step leaves the
        belief unchanged, so it is excluded from the next choices until the
        belief moves again (otherwise the same choice would repeat forever).
        """
        d = local.height
        budget = self.budgets.per_policy_factor * local.pomdp.n_states
        stalled: set[int] = set()
        for _ in range(budget):
            self.decisions += 1
            if self.decisions > self.max_decisions:
                raise BudgetExhausted("decision budget exhausted")
            b = map_belief_to_local(local, self.B)
            pol = entropy_weight(policy, local, self.B) if local.extra is not None else policy
            a = _choose(pol, b, stalled)
            if a is None:
                self.report.stalls += 1
                return (HELP if local.help is not None else TERMINATE), True
            if a == local.terminate:
                return TERMINATE, False
            if a == local.help:
                return HELP, False
            lower = local.lower_actions[a]
            if d == self.h.sst.depth:
                self.concrete(lower)
                stalled.clear()
            else:
                aa = self.h.abstract_action(d, lower)
                before = self.report.concrete_actions
                self.execute(aa.local, aa.policy)
                if self.report.concrete_actions == before:
                    stalled.add(a)
                else:
                    stalled.clear()
        self.report.truncations += 1
        return (HELP if local.help is not None else TERMINATE), True


def _choose(pol: AlphaVectorPolicy, b: np.ndarray, excluded: set[int]) -> int | None:
    """Best action at `b` ignoring vectors of excluded actions."""
    if not excluded:
        return best_action(pol, b)[0]
    values = pol.vectors @ b
    values[np.isin(pol.actions, list(excluded))] = -np.inf
    k = int(np.argmax(values))
    return None if values[k] == -np.inf else int(pol.actions[k])


def execute_policy(local: LocalModel, policy: AlphaVectorPolicy, B: GlobalBelief,
                   hierarchy: Hierarchy, env: EnvironmentPort,
                   budgets: Budgets = Budgets()) -> tuple[str, GlobalBelief, ExecutionReport]:
    """Execute one local policy or abstract action; returns the last
    action (terminate/help), the updated global belief and a report."""
    report = ExecutionReport()
    run = _Run(hierarchy, env, B, budgets, report)
    last, _ = run.execute(local, policy)
    return last, run.B, report


def execute_hierarchical_policy(hp: HierarchicalPolicy, b0: np.ndarray, hierarchy: Hierarchy,
                                env: EnvironmentPort, budgets: Budgets = Budgets(),
                                report: ExecutionReport | None = None) -> ExecutionReport:
    """Top-down execution: terminate hands control to the next LP below,
    help hands it back to the LP above."""
    report = report or ExecutionReport()
    report.planning_seconds = hp.planning_seconds
    t0 = time.perf_counter()
    run = _Run(hierarchy, env, build_global_belief(b0, hierarchy.sst), budgets, report)
    i, bounce, last_bounce = 0, 0, None
    try:
        while i < len(hp.policies):
            lp = hp.policies[i]
            before = report.concrete_actions
            action, _ = run.execute(lp.local, lp.policy)
            j = i + 1 if action == TERMINATE else max(i - 1, 0)
            report.transfers.append((i, action, j))
            if report.concrete_actions == before and action == HELP:
                bounce = bounce + 1 if last_bounce == i else 1
                last_bounce = i
                if bounce > budgets.oscillation:
                    raise ExecutionError("oscillation between local policies without progress")
            elif report.concrete_actions != before:
                bounce, last_bounce = 0, None
            i = j
    except ExecutionError as exc:
        report.failed = True
        report.reason = str(exc)
    report.final_belief = run.B.leaves
    report.execution_seconds = time.perf_counter() - t0
    return report
