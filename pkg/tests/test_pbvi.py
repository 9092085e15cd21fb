import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import identity_observation_pomdp, random_belief, random_pomdp, value_iteration
from hpomdp.pbvi import (SolverParams, SolveStats, _backup_batch, _backup_sparse, backup,
                         blind_vectors, expand_beliefs, prune, solve)
from hpomdp.pomdp import Pomdp, best_action, delta_belief, is_belief


def test_delta_beliefs_act_like_value_iteration():
    rng = np.random.default_rng(8)
    P = identity_observation_pomdp(rng, 8, 3)
    Q = value_iteration(P)
    pol = solve(P, np.eye(8), SolverParams(backup_sweeps=400, epsilon=1e-10))
    for s in range(8):
        a, v = best_action(pol, delta_belief(8, s))
        assert Q[a, s] == pytest.approx(Q[:, s].max(), abs=1e-6)
        assert v == pytest.approx(Q[:, s].max(), abs=1e-4)


def test_blind_vectors_are_fixed_points():
    P = random_pomdp(np.random.default_rng(4), 5, 2, 3)
    vecs, acts = blind_vectors(P)
    T, _, r = P.dense()
    for v, a in zip(vecs, acts):
        np.testing.assert_allclose(v, r[a] + P.discount * T[a] @ v, atol=1e-10)


def test_sparse_backup_matches_dense_backup():
    rng = np.random.default_rng(12)
    P = random_pomdp(rng, 12, 3, 5, density=0.4)
    T, Z, r = P.dense()
    G = rng.normal(size=(6, 12))
    B = np.array([random_belief(rng, 12, support=0.5) for _ in range(9)])
    dense = _backup_batch(T, Z, r, P.discount, G, B)
    sparse = _backup_sparse(P, r, G, B)
    np.testing.assert_allclose(sparse[2], dense[2], atol=1e-10)
    np.testing.assert_array_equal(sparse[1], dense[1])
    np.testing.assert_allclose(sparse[0], dense[0], atol=1e-10)


def test_backup_improves_on_the_input_set():
    rng = np.random.default_rng(13)
    P = random_pomdp(rng, 6, 2, 3)
    vecs, _ = blind_vectors(P)
    b = random_belief(rng, 6)
    alpha = backup(P, vecs, b)
    assert alpha.values @ b >= np.max(vecs @ b) - 1e-9


def test_prune_drops_dominated_and_duplicates():
    V = np.array([[1.0, 1.0], [0.0, 2.0], [0.5, 0.5], [1.0, 1.0], [2.0, 0.0]])
    kept, acts = prune(V, np.arange(5))
    np.testing.assert_array_equal(acts, [0, 1, 4])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 6))
def test_prune_keeps_the_upper_surface(seed, K, S):
    rng = np.random.default_rng(seed)
    V = np.round(rng.normal(size=(K, S)), 1)
    kept, _ = prune(V, np.arange(K))
    beliefs = rng.dirichlet(np.ones(S), size=50)
    np.testing.assert_allclose((kept @ beliefs.T).max(axis=0), (V @ beliefs.T).max(axis=0))
    for i in range(len(kept)):
        for j in range(len(kept)):
            if i != j:
                assert not np.all(kept[i] >= kept[j])


def test_expansion_respects_limit_and_produces_beliefs():
    rng = np.random.default_rng(0)
    P = random_pomdp(rng, 7, 3, 4)
    pts = np.eye(7)[:2]
    for _ in range(5):
        pts = expand_beliefs(P, pts, rng, limit=10)
    assert len(pts) <= 10
    assert all(is_belief(p) for p in pts)


def test_solve_is_deterministic_and_above_blind_value():
    rng = np.random.default_rng(21)
    P = random_pomdp(rng, 6, 3, 3)
    seeds = np.eye(6)
    stats = SolveStats()
    a = solve(P, seeds, SolverParams(seed=3), stats)
    b = solve(P, seeds, SolverParams(seed=3))
    np.testing.assert_array_equal(a.vectors, b.vectors)
    blind, _ = blind_vectors(P)
    for s in range(6):
        assert a.value(delta_belief(6, s)) >= blind[:, s].max() - 1e-9
    assert stats.points >= 6 and stats.vectors == len(a.vectors)


def test_solver_parameter_validation():
    with pytest.raises(ValueError):
        SolverParams(belief_points=0)
    with pytest.raises(ValueError):
        SolverParams(epsilon=0)
