"""Point-set distances (CD, EMD) and set-level generative metrics (1-NNA, COV)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import PointCloud

HUNGARIAN_MAX_N = 512
AUCTION_GAP = 0.005


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def chamfer(X, Y) -> float:
    """Mean nearest squared distance X->Y plus Y->X."""
    X, Y = _pts(X), _pts(Y)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("chamfer distance of an empty set")
    d = _sq_dists(X, Y)
    return float(np.mean(d.min(axis=1)) + np.mean(d.min(axis=0)))


# --- assignment solvers -----------------------------------------------------------

def hungarian(cost: np.ndarray) -> np.ndarray:
    """Exact min-cost perfect matching of a square matrix.

    Shortest augmenting paths with row/column potentials, O(n^3) with the
    inner column scan vectorized. Returns ``col[i]`` assigned to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    col[owner[1:] - 1] = np.arange(n)
    return col


def auction(cost: np.ndarray, rel_gap: float = AUCTION_GAP) -> np.ndarray:
    """Approximate min-cost perfect matching by epsilon-scaling auction.

    The final epsilon is ``rel_gap * LB / n`` with ``LB`` the sum of row minima,
    so the returned matching costs at most ``(1 + rel_gap)`` times the optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    benefit = -cost
    lb = float(cost.min(axis=1).sum())
    span = float(cost.max() - cost.min())
    eps_final = rel_gap * lb / n if lb > 0 else span * 1e-9 / n
    if eps_final <= 0:
        return np.arange(n)
    eps = max(span / 4.0, eps_final)
    prices = np.zeros(n)
    while True:
        person_of = np.full(n, -1, dtype=np.int64)
        obj_of = np.full(n, -1, dtype=np.int64)
        while True:
            free = np.flatnonzero(obj_of < 0)
            if free.size == 0:
                break
            vals = benefit[free] - prices
            top2 = np.argpartition(-vals, 1, axis=1)[:, :2]
            r = np.arange(free.size)
            a, b = vals[r, top2[:, 0]], vals[r, top2[:, 1]]
            best = np.where(a >= b, top2[:, 0], top2[:, 1])
            gap = np.abs(a - b)
            bids = prices[best] + gap + eps
            # highest bid per object wins; ties go to the lower person index
            order = np.lexsort((-free, bids, best))
            last = np.r_[best[order][1:] != best[order][:-1], True]
            win = order[last]
            objs, winners, price = best[win], free[win], bids[win]
            prev = person_of[objs]
            obj_of[prev[prev >= 0]] = -1
            person_of[objs] = winners
            obj_of[winners] = objs
            prices[objs] = price
        if eps <= eps_final:
            break
        eps = max(eps / 5.0, eps_final)
    return obj_of


def emd(X, Y, method: str = "auto") -> float:
    """(1/N) min over bijections of the summed Euclidean distances.

    ``method`` is ``"exact"`` (Hungarian), ``"auction"`` or ``"auto"`` (exact
    up to 512 points, auction above).
    """
    X, Y = _pts(X), _pts(Y)
    if len(X) != len(Y):
        raise ValueError(f"EMD needs equal sizes, got {len(X)} and {len(Y)}")
    n = len(X)
    if n == 0:
        raise ValueError("EMD of empty sets")
    cost = np.sqrt(_sq_dists(X, Y))
    if method == "auto":
        method = "exact" if n <= HUNGARIAN_MAX_N else "auction"
    if method == "exact":
        col = hungarian(cost)
    elif method == "auction":
        col = auction(cost)
    else:
        raise ValueError(f"unknown EMD method {method!r}")
    return float(cost[np.arange(n), col].sum() / n)


DISTANCES = {"cd": chamfer, "emd": emd}


def distance_matrix(A: Sequence, B: Sequence, kind: str = "cd") -> np.ndarray:
    fn = DISTANCES[kind]
    return np.array([[fn(a, b) for b in B] for a in A], dtype=np.float64).reshape(len(A), len(B))


def symmetric_matrix(A: Sequence, kind: str = "cd") -> np.ndarray:
    fn = DISTANCES[kind]
    n = len(A)
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            M[i, j] = M[j, i] = fn(A[i], A[j])
    return M


# --- set metrics --------------------------------------------------------------------

def one_nna_from_matrices(M_gg: np.ndarray, M_rr: np.ndarray, M_gr: np.ndarray) -> float:
    """Leave-one-out 1-NN two-sample accuracy in percent.

    Nearest-neighbour ties go to the opposite set first, then to the lowest
    index within the pooled ordering (generated first, then reference).
    """
    ng, nr = M_gr.shape
    if ng < 2 or nr < 2:
        raise ValueError(f"1-NNA needs at least two samples per set, got {ng} and {nr}")
    top = np.concatenate([M_gg, M_gr], axis=1)
    bottom = np.concatenate([M_gr.T, M_rr], axis=1)
    M = np.concatenate([top, bottom], axis=0)
    side = np.r_[np.zeros(ng, dtype=bool), np.ones(nr, dtype=bool)]
    n = ng + nr
    correct = 0
    for i in range(n):
        d = M[i].copy()
        d[i] = np.inf
        same = side == side[i]
        # lexsort: last key is primary
        j = np.lexsort((np.arange(n), same, d))[0]
        correct += bool(side[j] == side[i])
    return 100.0 * correct / n


def coverage_from_matrix(M_gr: np.ndarray) -> float:
    """Percent of references that are the nearest reference (lowest index on ties) of some sample."""
    ng, nr = M_gr.shape
    if ng == 0 or nr == 0:
        raise ValueError("coverage needs non-empty sets")
    return 100.0 * np.unique(np.argmin(M_gr, axis=1)).size / nr


def one_nna(G: Sequence, R: Sequence, dist: str = "cd") -> float:
    return one_nna_from_matrices(symmetric_matrix(G, dist), symmetric_matrix(R, dist), distance_matrix(G, R, dist))


def coverage(G: Sequence, R: Sequence, dist: str = "cd") -> float:
    return coverage_from_matrix(distance_matrix(G, R, dist))


def evaluate(G: Sequence, R: Sequence) -> list[tuple[str, str, float]]:
    """Rows ``(metric, distance_kind, value)`` for 1-NNA and COV under CD and EMD."""
    rows = []
    for kind in ("cd", "emd"):
        M_gr = distance_matrix(G, R, kind)
        nna = one_nna_from_matrices(symmetric_matrix(G, kind), symmetric_matrix(R, kind), M_gr)
        rows.append(("1-NNA", kind.upper(), nna))
        rows.append(("COV", kind.upper(), coverage_from_matrix(M_gr)))
    return rows
