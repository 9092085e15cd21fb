import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_belief
from hpomdp.executive import (Budgets, ExecutionError, ExecutionReport, GlobalBelief,
                              SimulatedEnvironment, _choose, build_global_belief,
                              build_hierarchical_policy, build_local_policy, entropy_ratio,
                              entropy_weight, execute_hierarchical_policy, execute_policy,
                              map_belief_to_local, update_global_belief)
from hpomdp.hierarchy import build_hierarchy, build_local_pomdp
from hpomdp.pomdp import AlphaVectorPolicy, delta_belief


@pytest.fixture(scope="module")
def small_hierarchy(small_setup):
    s = small_setup
    return build_hierarchy(s.bp, s.sst, s.neighbors)


@pytest.fixture(scope="module")
def leaf_local(small_setup):
    """Cell-level local model over the first section, with an extra state."""
    s = small_setup
    sst = s.sst
    core = sst.children_of(sst.nodes[sst.depth - 1][0])
    return build_local_pomdp(s.bp.pomdp, None, sst.depth, core, [core[-1]], s.neighbors, "lp",
                             with_extra=True, with_help=True, node_order=sst.index[sst.depth])


def test_global_belief_sums(corridor):
    _, bp, sst, _ = corridor
    B = build_global_belief(np.array([0.1, 0.2, 0.3, 0.4]), sst)
    assert B.probability(("A",)) == pytest.approx(0.3)
    assert B.probability(("root",)) == pytest.approx(1.0)
    assert B.max_parent_gap() < 1e-12


def test_global_belief_rejects_bad_input(corridor):
    _, _, sst, _ = corridor
    with pytest.raises(ValueError):
        build_global_belief(np.ones(3) / 3, sst)
    with pytest.raises(ValueError):
        build_global_belief(np.array([0.5, 0.5, 0.5, 0.0]), sst)


def test_global_update_matches_leaf_update(corridor):
    _, bp, sst, _ = corridor
    B = build_global_belief(np.full(4, 0.25), sst)
    B2, ok = update_global_belief(B, bp.pomdp, 1, 2)
    assert ok
    assert B2.max_parent_gap() < 1e-12
    assert B2.probability(("B",)) == pytest.approx(B2.leaves[2:].sum())


def test_entropy_ratio_cases():
    assert entropy_ratio(np.array([0.3])) == 0.0
    assert entropy_ratio(np.zeros(4)) == 0.0
    assert entropy_ratio(np.array([0.2, 0.0, 0.0])) == 0.0
    assert entropy_ratio(np.full(5, 0.1)) == pytest.approx(1.0)
    assert 0.0 < entropy_ratio(np.array([0.5, 0.25, 0.0])) < 1.0


def _belief_with_outside(setup, local, outside):
    sst = setup.sst
    leaves = np.zeros(len(sst.nodes[sst.depth]))
    idx = sst.index[sst.depth]
    inside = [idx[n] for n in local.nodes]
    others = [i for i in range(len(leaves)) if i not in inside]
    leaves[inside] = (1.0 - sum(outside.values())) / len(inside)
    for k, p in outside.items():
        leaves[others[k]] = p
    return build_global_belief(leaves, sst), others


def test_entropy_weight_identity_when_concentrated(small_setup, leaf_local):
    B, _ = _belief_with_outside(small_setup, leaf_local, {0: 0.4})
    pol = AlphaVectorPolicy(np.random.default_rng(0).normal(size=(5, leaf_local.pomdp.n_states)),
                            np.arange(5))
    assert entropy_weight(pol, leaf_local, B) is pol


def test_entropy_weight_uniform_outside_mass(small_setup, leaf_local):
    sst = small_setup.sst
    n_out = len(sst.nodes[sst.depth]) - leaf_local.n_nonspecial
    B, _ = _belief_with_outside(small_setup, leaf_local, {k: 0.5 / n_out for k in range(n_out)})
    V = np.random.default_rng(1).normal(scale=50, size=(6, leaf_local.pomdp.n_states))
    out = entropy_weight(AlphaVectorPolicy(V, np.arange(6)), leaf_local, B)
    x = leaf_local.extra
    np.testing.assert_array_equal(out.vectors[:, x], V[:, x] / (1 + np.abs(V[:, x])))
    keep = np.arange(V.shape[1]) != x
    np.testing.assert_array_equal(out.vectors[:, keep], V[:, keep])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_entropy_weight_only_touches_extra(small_setup, leaf_local, seed):
    rng = np.random.default_rng(seed)
    sst = small_setup.sst
    n_out = len(sst.nodes[sst.depth]) - leaf_local.n_nonspecial
    mass = rng.random(n_out) * (rng.random(n_out) < 0.7)
    outside = {k: float(m) for k, m in enumerate(mass / max(mass.sum(), 1e-9) * rng.random())}
    B, _ = _belief_with_outside(small_setup, leaf_local, outside)
    V = rng.normal(scale=rng.uniform(0.1, 100), size=(4, leaf_local.pomdp.n_states))
    out = entropy_weight(AlphaVectorPolicy(V, np.arange(4)), leaf_local, B)
    keep = np.arange(V.shape[1]) != leaf_local.extra
    np.testing.assert_array_equal(out.vectors[:, keep], V[:, keep])
    assert np.all(np.abs(out.vectors[:, leaf_local.extra]) <= np.abs(V[:, leaf_local.extra]))


def test_map_belief_to_local(small_setup, leaf_local):
    B, _ = _belief_with_outside(small_setup, leaf_local, {0: 0.3})
    b = map_belief_to_local(leaf_local, B)
    assert b[leaf_local.extra] == pytest.approx(0.3)
    assert b[leaf_local.absb_g] == b[leaf_local.absb_ng] == 0.0
    assert b.sum() == pytest.approx(1.0)


def test_coverage_violation_without_extra(corridor):
    _, bp, sst, nb = corridor
    local = build_local_pomdp(bp.pomdp, None, 2, [("a1",)], [("a2",)], nb, "lp",
                              with_extra=True, node_order=sst.index[2])
    local = dataclasses.replace(local, extra=None)
    B = build_global_belief(np.array([0.0, 0.5, 0.5, 0.0]), sst)
    with pytest.raises(ExecutionError, match="coverage"):
        map_belief_to_local(local, B)


def test_choose_skips_excluded_actions():
    pol = AlphaVectorPolicy(np.array([[3.0, 0.0], [2.0, 0.0], [1.0, 0.0]]), [0, 1, 2])
    b = np.array([1.0, 0.0])
    assert _choose(pol, b, set()) == 0
    assert _choose(pol, b, {0}) == 1
    assert _choose(pol, b, {0, 1, 2}) is None


def test_hierarchical_policy_shape(corridor_hierarchy):
    hp = build_hierarchical_policy(("a4",), corridor_hierarchy)
    assert hp.goal_path == [("root",), ("B",), ("a4",)]
    assert [lp.height for lp in hp.policies] == [1, 2]
    assert hp.policies[0].local.extra is None and hp.policies[1].local.help is not None


def test_corridor_task_reaches_goal(corridor, corridor_hierarchy):
    _, bp, _, _ = corridor
    successes = 0
    for seed in range(10):
        b0 = delta_belief(4, 0)
        hp = build_hierarchical_policy(("a4",), corridor_hierarchy, b0=b0)
        env = SimulatedEnvironment(bp.pomdp, 0, seed)
        report = execute_hierarchical_policy(hp, b0, corridor_hierarchy, env)
        successes += env.true_state == 3 and not report.failed
        assert report.concrete_actions == env.steps == len(report.actions)
    assert successes >= 9


def test_goal_at_start_needs_no_action(corridor, corridor_hierarchy):
    _, bp, _, _ = corridor
    b0 = delta_belief(4, 2)
    hp = build_hierarchical_policy(("a3",), corridor_hierarchy, b0=b0)
    env = SimulatedEnvironment(bp.pomdp, 2, 0)
    report = execute_hierarchical_policy(hp, b0, corridor_hierarchy, env)
    assert report.concrete_actions == 0 and not report.failed
    assert report.transfers[-1][2] == len(hp.policies)


def test_abstract_action_execution(corridor, corridor_hierarchy):
    _, bp, sst, _ = corridor
    aa = corridor_hierarchy.abstract_action(1, 0)
    B = build_global_belief(delta_belief(4, 0), sst)
    last, B2, report = execute_policy(aa.local, aa.policy, B, corridor_hierarchy,
                                      SimulatedEnvironment(bp.pomdp, 0, 3))
    assert last == "terminate"
    assert B2.probability(("B",)) > 0.5 and report.concrete_actions >= 2


def test_budget_exhaustion_is_a_failure(corridor, corridor_hierarchy):
    _, bp, _, _ = corridor
    b0 = delta_belief(4, 0)
    hp = build_hierarchical_policy(("a4",), corridor_hierarchy, b0=b0)
    report = execute_hierarchical_policy(hp, b0, corridor_hierarchy,
                                         SimulatedEnvironment(bp.pomdp, 0, 0),
                                         Budgets(concrete_actions=1))
    assert report.failed and "budget" in report.reason
    assert report.concrete_actions == 1


def test_report_record():
    r = ExecutionReport(task_id="a4", seed=3, success=True, concrete_actions=5,
                        planning_seconds=0.5, execution_seconds=0.25, final_distance=0.0)
    assert r.record() == "a4,3,1,5,0.500000,0.250000,0"
    assert len(ExecutionReport.FIELDS) == len(r.record().split(","))


def test_local_policy_validates_height(corridor_hierarchy):
    path = [("root",), ("B",), ("a4",)]
    with pytest.raises(ValueError):
        build_local_policy(path, 3, corridor_hierarchy)


def test_parent_sums_hold_along_a_rollout(small_setup):
    rng = np.random.default_rng(0)
    P = small_setup.bp.pomdp
    B = build_global_belief(random_belief(rng, P.n_states), small_setup.sst)
    env = SimulatedEnvironment(P, 0, rng)
    for _ in range(200):
        a = int(rng.integers(P.n_actions))
        B, _ = update_global_belief(B, P, a, env.execute(a))
        assert B.max_parent_gap() < 1e-9
