import numpy as np
import pytest

from helpers import random_belief, random_pomdp
from hpomdp.pomdp import (DENSE_LIMIT, AlphaVectorPolicy, Pomdp, PomdpBuilder, PomdpError,
                          belief_update, best_action, delta_belief, is_belief, sample_step,
                          simulate_policy)


def bayes(P, b, a, o):
    T, Z = P.dense_tz()
    post = np.array([Z[a][s2, o] * sum(b[s] * T[a][s, s2] for s in range(P.n_states))
                     for s2 in range(P.n_states)])
    return post / post.sum()


def test_belief_update_matches_hand_bayes():
    rng = np.random.default_rng(3)
    for _ in range(20):
        P = random_pomdp(rng, 6, 2, 3, reward=False)
        b = random_belief(rng, 6)
        a, o = int(rng.integers(2)), int(rng.integers(3))
        post, ok = belief_update(P, b, a, o)
        assert ok
        np.testing.assert_allclose(post, bayes(P, b, a, o), atol=1e-12)


def test_sparse_path_agrees_with_dense_computation():
    rng = np.random.default_rng(5)
    S = DENSE_LIMIT + 40
    P = random_pomdp(rng, S, 2, 6, density=0.02, reward=False)
    T, Z = P.dense_tz()
    for _ in range(5):
        b = random_belief(rng, S, support=0.1)
        a, o = int(rng.integers(2)), int(rng.integers(6))
        post, ok = belief_update(P, b, a, o)
        expected = (b @ T[a]) * Z[a][:, o]
        if expected.sum() > 0:
            np.testing.assert_allclose(post, expected / expected.sum(), atol=1e-12)


def test_impossible_observation_returns_prediction():
    b = PomdpBuilder(["x", "y"], ["go"], ["ox", "oy"])
    b.transition(0, 0, 1, 1.0)
    b.transition(1, 0, 1, 1.0)
    b.observation(0, 0, 0, 1.0)
    b.observation(1, 0, 1, 1.0)
    P = b.build()
    post, ok = belief_update(P, delta_belief(2, 0), 0, 0)
    assert not ok
    np.testing.assert_array_equal(post, [0.0, 1.0])


def test_invalid_indices_raise():
    P = random_pomdp(np.random.default_rng(0), 3, 2, 2, reward=False)
    with pytest.raises(PomdpError):
        belief_update(P, delta_belief(3, 0), 5, 0)


def test_builder_merges_entries_and_checks_rows():
    b = PomdpBuilder(["x", "y"], ["go"], ["o"])
    b.transition(0, 0, 1, 0.5, reward=-1.0)
    b.transition(0, 0, 1, 0.5, reward=-1.0)
    b.transition(1, 0, 1, 0.9, reward=0.0)
    b.observation(0, 0, 0, 1.0)
    b.observation(1, 0, 0, 1.0)
    P = b.build(with_reward=True)
    assert P.transition[0][0, 1] == 1.0
    problems = P.check()
    assert len(problems) == 1 and "sums to 0.9" in problems[0]


def test_missing_reward_is_reported():
    b = PomdpBuilder(["x"], ["stay"], ["o"])
    b.transition(0, 0, 0, 1.0)
    b.observation(0, 0, 0, 1.0)
    assert any("undefined reward" in p for p in b.build(with_reward=True).check())


def test_serialization_round_trip():
    P = random_pomdp(np.random.default_rng(1), 5, 3, 4, density=0.5)
    Q = Pomdp.from_dict(P.to_dict())
    for a in range(3):
        assert (P.transition[a] != Q.transition[a]).nnz == 0
        assert (P.observation_fn[a] != Q.observation_fn[a]).nnz == 0
        assert (P.reward[a] != Q.reward[a]).nnz == 0
    assert Q.discount == P.discount


def test_sample_step_frequencies():
    rng = np.random.default_rng(11)
    P = random_pomdp(rng, 4, 1, 3, reward=False)
    T, Z = P.dense_tz()
    n = 20000
    counts = np.zeros((4, 3))
    for _ in range(n):
        s2, o = sample_step(P, 2, 0, rng)
        counts[s2, o] += 1
    expected = T[0][2][:, None] * Z[0]
    np.testing.assert_allclose(counts / n, expected, atol=0.015)


def test_best_action_breaks_ties_by_vector_order():
    pol = AlphaVectorPolicy(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 2.0]]), [4, 7, 1])
    assert best_action(pol, np.array([1.0, 0.0])) == (4, 1.0)
    assert best_action(pol, np.array([0.0, 1.0]))[0] == 1
    with pytest.raises(PomdpError):
        best_action(pol, np.ones(3) / 3)


def test_simulation_stops_on_request():
    rng = np.random.default_rng(2)
    P = random_pomdp(rng, 3, 2, 2, reward=False)
    pol = AlphaVectorPolicy(np.zeros((1, 3)), [1])
    trace = simulate_policy(P, pol, 0, delta_belief(3, 0), lambda a: a == 1, 10, rng)
    assert len(trace) == 0 and not trace.truncated and trace.last_action == 1
    trace = simulate_policy(P, pol, 0, delta_belief(3, 0), lambda a: False, 7, rng)
    assert len(trace) == 7 and trace.truncated
    assert all(is_belief(b) for _, _, _, b in trace.steps)
