"""Distance-based clustering: PAM k-medoids, a spectral-clustering baseline
on raw data, and permutation-matched clustering accuracy."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geodesic import DistanceMatrix


class ClusteringError(ValueError):
    pass


@dataclass
class ClusteringResult:
    labels: np.ndarray
    medoids: np.ndarray
    cost: float
    iterations: int
    cost_trace: list[float] = field(default_factory=list)


def _as_matrix(dist) -> np.ndarray:
    D = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ClusteringError(f"distance matrix must be square, got {D.shape}")
    return D


def medoid_cost(D: np.ndarray, medoids) -> float:
    return float(D[:, list(medoids)].min(axis=1).sum())


def _build(D, k):
    """Greedy PAM BUILD: each new medoid gives the largest cost reduction."""
    first = int(np.argmin(D.sum(axis=0)))
    medoids = [first]
    nearest = D[:, first].copy()
    for _ in range(1, k):
        gain = np.maximum(nearest[:, None] - D, 0.0).sum(axis=0)
        gain[medoids] = -np.inf
        nxt = int(np.argmax(gain))
        medoids.append(nxt)
        nearest = np.minimum(nearest, D[:, nxt])
    return medoids


def _plusplus(D, k, rng):
    n = len(D)
    medoids = [int(rng.integers(n))]
    nearest = D[:, medoids[0]].copy()
    for _ in range(1, k):
        w = nearest.copy()
        w[medoids] = 0.0
        total = w.sum()
        if total <= 0:
            choices = np.setdiff1d(np.arange(n), medoids)
            nxt = int(rng.choice(choices))
        else:
            nxt = int(rng.choice(n, p=w / total))
        medoids.append(nxt)
        nearest = np.minimum(nearest, D[:, nxt])
    return medoids


def _swap_phase(D, medoids, max_iter=1000):
    """Apply the best improving (medoid, non-medoid) swap until none improves."""
    medoids = list(medoids)
    n, k = len(D), len(medoids)
    cost = medoid_cost(D, medoids)
    trace = [cost]
    tol = 1e-12 * max(1.0, float(np.abs(D).max()))
    for it in range(max_iter):
        # distance to nearest medoid when slot j is removed
        sub = D[:, medoids]
        others = np.empty((k, n))
        for j in range(k):
            rest = np.delete(sub, j, axis=1)
            others[j] = rest.min(axis=1) if rest.shape[1] else np.inf
        # candidate h replacing slot j: sum_i min(others[j, i], D[i, h])
        cand = np.minimum(others[:, :, None], D[None, :, :]).sum(axis=1)
        cand[:, medoids] = np.inf
        j, h = np.unravel_index(np.argmin(cand), cand.shape)
        if cand[j, h] >= cost - tol:
            return medoids, cost, it, trace
        medoids[j] = int(h)
        cost = float(cand[j, h])
        trace.append(cost)
    return medoids, cost, max_iter, trace


def _labels_for(D, medoids):
    labels = np.argmin(D[:, medoids], axis=1)
    labels[medoids] = np.arange(len(medoids))
    return labels


def kmedoids(dist, k: int, seed: int = 0, n_restarts: int = 10) -> ClusteringResult:
    """PAM k-medoids; restart 0 uses BUILD, the others k-medoids++ seeding."""
    D = _as_matrix(dist)
    n = len(D)
    if k < 1 or k > n:
        raise ClusteringError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    best = None
    for r in range(n_restarts):
        init = _build(D, k) if r == 0 else _plusplus(D, k, rng)
        medoids, cost, iters, trace = _swap_phase(D, init)
        if best is None or cost < best.cost:
            order = np.argsort(medoids)
            medoids = [medoids[o] for o in order]
            best = ClusteringResult(_labels_for(D, medoids), np.array(medoids), cost, iters, trace)
    return best


def euclidean_latent_matrix(latents) -> DistanceMatrix:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise ClusteringError("need at least two latent points")
    diff = z[:, None, :] - z[None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=2))
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(D, "euclidean-latent")


# -- symmetric eigensolver ------------------------------------------------------------

def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        rounds.append([(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0])
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def jacobi_eigh(A, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations within a round act on disjoint index pairs, so each round is
    applied as one vectorised update.  Returns (eigenvalues ascending,
    eigenvectors as columns).
    """
    A = np.array(A, dtype=np.float64)
    n = len(A)
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    rounds = [np.array(r).T for r in _round_robin(n)]
    scale = np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            live = np.abs(apq) > 1e-300
            if not live.any():
                continue
            p, q, apq = p[live], q[live], apq[live]
            tau = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- J^T A J, V <- V J with J_pp = J_qq = c, J_pq = s, J_qp = -s
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[p, q] = A[q, p] = 0.0
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def spectral_cluster(points, k: int, seed: int = 0) -> np.ndarray:
    """Normalised spectral clustering with an RBF affinity.

    Bandwidth is the median pairwise distance; embedding uses the k
    eigenvectors of I - D^-1/2 W D^-1/2 with smallest eigenvalues,
    row-normalised and clustered by k-means.
    """
    from sklearn.cluster import KMeans

    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if k < 1 or k > n:
        raise ClusteringError(f"k={k} must lie in [1, {n}]")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    iu = np.triu_indices(n, 1)
    bandwidth = float(np.median(np.sqrt(sq[iu])))
    if bandwidth <= 0:
        raise ClusteringError("degenerate affinity: median pairwise distance is zero")
    W = np.exp(-sq / (2.0 * bandwidth ** 2))
    np.fill_diagonal(W, 0.0)
    inv_sqrt = 1.0 / np.sqrt(W.sum(axis=1))
    L = np.eye(n) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    _, vecs = jacobi_eigh(L)
    U = vecs[:, :k]
    U = U / np.maximum(np.linalg.norm(U, axis=1, keepdims=True), 1e-300)
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(U)
    return km.labels_.astype(np.int64)


def cluster_accuracy(pred, truth) -> float:
    """Best fraction of agreement over all matchings of predicted to true labels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ClusteringError(f"label count mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ClusteringError("empty labelling")
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    m = max(len(p_vals), len(t_vals))
    table = np.zeros((m, m), dtype=np.int64)
    np.add.at(table, (p_idx, t_idx), 1)
    best = max(table[np.arange(m), list(perm)].sum() for perm in itertools.permutations(range(m)))
    return best / pred.size
