"""Point-based value iteration.

The value function starts from the blind-policy vectors (the exact value of
repeating one action forever), which lower-bound the optimal value, so
point-based backups only ever raise the value at a retained belief point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .pomdp import AlphaVectorPolicy, Pomdp

log = logging.getLogger(__name__)

# above this |S|*|O| the sparse batched backup replaces the dense one
BATCH_LIMIT = 6000
BATCH_ELEMENTS = 2_000_000
NEW_POINT_TOL = 1e-9
PRUNE_PROBES = 64


@dataclass(frozen=True)
class SolverParams:
    belief_points: int = 128
    expansions: int = 4
    backup_sweeps: int = 60
    epsilon: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if min(self.belief_points, self.expansions, self.backup_sweeps) < 1:
            raise ValueError("solver counts must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class AlphaVector:
    action: int
    values: np.ndarray


@dataclass
class SolveStats:
    points: int = 0
    sweeps: int = 0
    residual: float = float("inf")
    vectors: int = 0


def expand_beliefs(P: Pomdp, points: np.ndarray, rng: np.random.Generator,
                   limit: int | None = None) -> np.ndarray:
    """One round of stochastic-simulation expansion.

    For every point, one simulated step per action yields candidate successor
    beliefs; the candidate farthest (L1) from the current set is added.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    T, Z = P.dense_tz()
    A = P.n_actions
    Np, S = points.shape
    room = Np if limit is None else max(0, min(Np, limit - Np))
    if room == 0 or A == 0:
        return points
    src = points[:room]
    u = rng.random((3, room, A))
    acts = np.broadcast_to(np.arange(A), (room, A))
    cumb = np.repeat(src.cumsum(axis=1)[:, None, :], A, axis=1)
    s = _draw_many(cumb.reshape(-1, S), u[0].ravel()).reshape(room, A)
    s2 = _draw_many(T.cumsum(axis=2)[acts, s].reshape(-1, S), u[1].ravel()).reshape(room, A)
    o = _draw_many(Z.cumsum(axis=2)[acts, s2].reshape(-1, Z.shape[2]), u[2].ravel()).reshape(room, A)
    post = np.matmul(src[None], T).transpose(1, 0, 2) * Z[acts, :, o]     # (room, A, S)
    post /= post.sum(axis=2, keepdims=True)
    chunk = max(1, BATCH_ELEMENTS // (A * Np * S))
    dist = np.concatenate([
        np.abs(post[i:i + chunk, :, None, :] - points[None, None]).sum(axis=3).min(axis=2)
        for i in range(0, room, chunk)])
    added = []
    for i in range(room):
        if added:
            d_new = np.abs(post[i][:, None, :] - np.asarray(added)[None]).sum(axis=2).min(axis=1)
            dist[i] = np.minimum(dist[i], d_new)
        k = int(np.argmax(dist[i]))
        if dist[i, k] > NEW_POINT_TOL:
            added.append(post[i, k])
    return np.vstack([points] + added) if added else points


def _draw_many(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row of the cumulative matrix `cum`."""
    k = (cum < (u * cum[:, -1])[:, None]).sum(axis=1)
    return np.minimum(k, cum.shape[1] - 1)


def blind_vectors(P: Pomdp) -> tuple[np.ndarray, np.ndarray]:
    """Value of always executing each action: (I - gamma T_a) alpha = r_a."""
    T, _, r = P.dense()
    eye = np.eye(P.n_states)
    vecs = [np.linalg.solve(eye - P.discount * T[a], r[a]) for a in range(P.n_actions)]
    return np.asarray(vecs), np.arange(P.n_actions)


def _backup_batch(T, Z, r, gamma, gamma_vecs, B):
    """Best backed-up vector for every row of B (batched over points and actions).

    Only (action, point, observation) triples with positive probability are
    scored; the others use the vector that is best at the predicted belief.
    """
    A, S, O = Z.shape
    N = len(B)
    pred = np.matmul(B[None], T)                              # (A, N, S)
    kd = np.argmax(pred @ gamma_vecs.T, axis=2)               # (A, N)
    prob = np.matmul(pred, Z)                                 # (A, N, O)
    a_i, n_i, o_i = np.nonzero(prob > 0.0)
    Zt = Z.transpose(0, 2, 1)                                 # (A, O, S)
    zrow = Zt[a_i, o_i]                                       # (M, S)
    ks = np.argmax((pred[a_i, n_i] * zrow) @ gamma_vecs.T, axis=1)
    delta = zrow * (gamma_vecs[ks] - gamma_vecs[kd[a_i, n_i]])
    W = gamma_vecs[kd].reshape(A * N, S)
    if len(a_i):
        rows, starts = np.unique(a_i * N + n_i, return_index=True)
        W[rows] += np.add.reduceat(delta, starts, axis=0)
    alpha = r[:, None, :] + gamma * np.matmul(W.reshape(A, N, S), T.transpose(0, 2, 1))
    val = (alpha * B[None]).sum(axis=2)
    best_act = np.argmax(val, axis=0)
    n = np.arange(N)
    return alpha[best_act, n], best_act, val[best_act, n]


def _backup_all(P, gamma_vecs, B):
    T, Z, r = P.dense()
    S, O = T.shape[1], Z.shape[2]
    if S * O <= BATCH_LIMIT:
        chunk = max(1, BATCH_ELEMENTS // (T.shape[0] * S * O))
        parts = [_backup_batch(T, Z, r, P.discount, gamma_vecs, B[i:i + chunk])
                 for i in range(0, len(B), chunk)]
        return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                np.concatenate([p[2] for p in parts]))
    chunk = max(1, BATCH_ELEMENTS // (4 * S))
    parts = [_backup_sparse(P, r, gamma_vecs, B[i:i + chunk]) for i in range(0, len(B), chunk)]
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]))


def _backup_sparse(P, r, gamma_vecs, B):
    """Batched backup with sparse transition and observation matrices, for
    models too large for the dense batch."""
    N, S = B.shape
    gamma = P.discount
    Bsp = sp.csr_matrix(B)
    GT = np.ascontiguousarray(gamma_vecs.T)
    best_val = np.full(N, -np.inf)
    best_alpha = np.zeros((N, S))
    best_act = np.zeros(N, dtype=np.int64)
    for a in range(P.n_actions):
        T, Z = P.transition[a], P.observation_fn[a]
        pred = (Bsp @ T).tocsr()                                   # (N, S)
        kd = np.asarray(np.argmax((pred @ GT), axis=1)).ravel()
        prob = (pred @ Z).tocoo()                                  # (N, O)
        keep = prob.data > 0.0
        n_i, o_i = prob.row[keep], prob.col[keep]
        order = np.lexsort((o_i, n_i))
        n_i, o_i = n_i[order], o_i[order]
        W = gamma_vecs[kd]
        if len(n_i):
            ZT = Z.T.tocsr()
            U = pred[n_i].multiply(ZT[o_i]).tocsr()                # (M, S)
            ks = np.asarray(np.argmax(U @ GT, axis=1)).ravel()
            D = ZT[o_i].tocoo()                                     # z(s, o) per triple
            D.data = D.data * (gamma_vecs[ks[D.row], D.col] - gamma_vecs[kd[n_i[D.row]], D.col])
            agg = sp.csr_matrix((np.ones(len(n_i)), (n_i, np.arange(len(n_i)))), shape=(N, len(n_i)))
            W += (agg @ D.tocsr()).toarray()
        alpha = r[a][None, :] + gamma * (T @ W.T).T
        val = np.einsum("ns,ns->n", alpha, B)
        better = val > best_val
        best_val[better] = val[better]
        best_alpha[better] = alpha[better]
        best_act[better] = a
    return best_alpha, best_act, best_val


def backup(P: Pomdp, V: AlphaVectorPolicy | np.ndarray, b: np.ndarray) -> AlphaVector:
    """Point-based backup of the vector set `V` at belief `b`."""
    vecs = V.vectors if isinstance(V, AlphaVectorPolicy) else np.atleast_2d(V)
    vec, act, _ = _backup_all(P, np.asarray(vecs, dtype=float), np.atleast_2d(b))
    return AlphaVector(int(act[0]), vec[0])


def prune(vectors: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop exact duplicates and pointwise-dominated vectors (order kept)."""
    if len(vectors) <= 1:
        return vectors, actions
    _, first = np.unique(vectors, axis=0, return_index=True)
    first.sort()
    vectors, actions = vectors[first], actions[first]
    K, S = vectors.shape
    # screen pairs on the most discriminating coordinates, then check fully
    peaks = np.unique(vectors.argmax(axis=1))
    if len(peaks) > PRUNE_PROBES:
        peaks = peaks[np.linspace(0, len(peaks) - 1, PRUNE_PROBES).astype(int)]
    spread = np.argsort(vectors.var(axis=0), kind="stable")[-PRUNE_PROBES // 4:]
    probe = np.union1d(peaks, spread)
    sub = vectors[:, probe]
    cand = (sub[:, None, :] >= sub[None, :, :]).all(axis=2)
    np.fill_diagonal(cand, False)
    i, j = np.nonzero(cand)
    drop = np.zeros(K, dtype=bool)
    step = max(1, BATCH_ELEMENTS // S)
    for c in range(0, len(i), step):
        vi, vj = vectors[i[c:c + step]], vectors[j[c:c + step]]
        ge = (vi >= vj).all(axis=1)
        gt = (vi > vj).any(axis=1)
        drop[j[c:c + step][ge & (gt | (i[c:c + step] < j[c:c + step]))]] = True
    keep = ~drop
    return vectors[keep], actions[keep]


def _unique_rows(points: np.ndarray) -> np.ndarray:
    _, first = np.unique(points, axis=0, return_index=True)
    return points[np.sort(first)]


def solve(P: Pomdp, b_seeds, params: SolverParams = SolverParams(),
          stats: SolveStats | None = None) -> AlphaVectorPolicy:
    """Approximately solve `P` over beliefs grown from `b_seeds`."""
    if P.reward is None:
        raise ValueError("POMDP needs a reward to be solved")
    points = _unique_rows(np.atleast_2d(np.asarray(b_seeds, dtype=float)))
    rng = np.random.default_rng(params.seed)
    for _ in range(params.expansions):
        if len(points) >= params.belief_points:
            break
        grown = expand_beliefs(P, points, rng, limit=params.belief_points)
        if len(grown) == len(points):
            break
        points = grown

    vecs, acts = blind_vectors(P)
    vecs, acts = prune(vecs, acts)
    current = vecs @ points.T
    values = current.max(axis=0)
    holder = current.argmax(axis=0)
    residual = np.inf
    sweeps = 0
    for sweeps in range(1, params.backup_sweeps + 1):
        new_vecs, new_acts, new_vals = _backup_all(P, vecs, points)
        worse = new_vals < values
        if worse.any():
            # keep the previous supporting vector where the backup did not improve
            new_vecs[worse] = vecs[holder[worse]]
            new_acts[worse] = acts[holder[worse]]
            new_vals[worse] = values[worse]
        residual = float(np.max(new_vals - values))
        vecs, acts = prune(new_vecs, new_acts)
        current = vecs @ points.T
        values = np.maximum(current.max(axis=0), values)
        holder = current.argmax(axis=0)
        if residual < params.epsilon:
            break
    if stats is not None:
        stats.points, stats.sweeps, stats.residual, stats.vectors = len(points), sweeps, residual, len(vecs)
    log.debug("pbvi: %d points, %d sweeps, residual %.3g, %d vectors",
              len(points), sweeps, residual, len(vecs))
    return AlphaVectorPolicy(vecs, acts, P.states)
