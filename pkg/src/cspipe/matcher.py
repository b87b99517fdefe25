"""Bipartite and three-arm (triplet) matching.

Arms are always indexed 0, 1, 2 (NoReply, Counterspeech, OtherReply in the
pipeline). Distance matrices are keyed by arm pair ``(i, j)`` with ``i < j``
and have shape ``(n_i, n_j)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .lap import linear_sum_assignment

log = logging.getLogger(__name__)

ARM_PAIRS = ((0, 1), (0, 2), (1, 2))
_COST_TOL = 1e-12


class MatchSizeError(ValueError):
    """A group is too small for the requested match."""


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class TripletSet:
    # each triplet is (index in arm 0, index in arm 1, index in arm 2)
    triplets: tuple[tuple[int, int, int], ...]
    total_cost: float

    def __len__(self):
        return len(self.triplets)

    def as_array(self):
        if not self.triplets:
            return np.empty((0, 3), dtype=np.intp)
        return np.asarray(self.triplets, dtype=np.intp)


@dataclass
class MatchRun:
    starting_pair: tuple[int, int]
    triplet_set: TripletSet
    iterations: int
    attach_cost: float
    pass_costs: list[float] = field(default_factory=list)
    balance: object = None  # BalanceReport, attached after matching


def optimal_pair_match(costs, caliper=None, backend=None):
    """Exact minimum-cost matching without replacement.

    Matches ``min(n_a, n_b)`` units. With ``caliper`` set, pairs whose
    distance exceeds it are dropped from the result after solving with those
    entries heavily penalized.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError("costs must be 2-d")
    if costs.size == 0:
        return Assignment((), 0.0)
    work = costs
    if caliper is not None:
        penalty = (np.abs(costs).max() + 1.0) * (min(costs.shape) + 1)
        work = np.where(costs > caliper, penalty, costs)
    rows, cols = linear_sum_assignment(work, backend=backend)
    keep = np.ones(len(rows), dtype=bool)
    if caliper is not None:
        keep = costs[rows, cols] <= caliper
    rows, cols = rows[keep], cols[keep]
    pairs = tuple(zip(rows.tolist(), cols.tolist()))
    return Assignment(pairs, float(costs[rows, cols].sum()))


def _canon(dist):
    out = {}
    for (i, j) in ARM_PAIRS:
        if (i, j) in dist:
            out[(i, j)] = np.asarray(dist[(i, j)], dtype=np.float64)
        elif (j, i) in dist:
            out[(i, j)] = np.asarray(dist[(j, i)], dtype=np.float64).T
        else:
            raise KeyError(f"missing distance matrix for arms {(i, j)}")
    return out


def _d(dist, i, j):
    """Distance matrix between arm i (rows) and arm j (cols), any order."""
    if i < j:
        return dist[(i, j)]
    return dist[(j, i)].T


def triplet_cost(dist, triplets):
    t = np.asarray(triplets, dtype=np.intp).reshape(-1, 3)
    if len(t) == 0:
        return 0.0
    dist = _canon(dist)
    return float(
        dist[(0, 1)][t[:, 0], t[:, 1]].sum()
        + dist[(0, 2)][t[:, 0], t[:, 2]].sum()
        + dist[(1, 2)][t[:, 1], t[:, 2]].sum()
    )


def _triplet_set(dist, t):
    t = np.asarray(t, dtype=np.intp).reshape(-1, 3)
    order = np.lexsort((t[:, 2], t[:, 1], t[:, 0]))
    t = t[order]
    return TripletSet(tuple(map(tuple, t.tolist())), triplet_cost(dist, t))


def attach_third_group(assignment, d_ac, d_bc, backend=None):
    """Attach one unit of the third group to every matched pair.

    ``assignment`` pairs index the rows of ``d_ac`` and ``d_bc`` respectively.
    Returns triplets ordered (a, b, c) with the cost including the original
    pair distances, which are recovered from ``assignment.total_cost``.
    """
    d_ac = np.asarray(d_ac, dtype=np.float64)
    d_bc = np.asarray(d_bc, dtype=np.float64)
    if not assignment.pairs:
        return TripletSet((), 0.0)
    pa = np.array([p[0] for p in assignment.pairs], dtype=np.intp)
    pb = np.array([p[1] for p in assignment.pairs], dtype=np.intp)
    n_c = d_ac.shape[1]
    if n_c < len(pa):
        raise MatchSizeError(
            f"third group has {n_c} units but {len(pa)} pairs need a partner")
    cost = d_ac[pa, :] + d_bc[pb, :]
    rows, cols = linear_sum_assignment(cost, backend=backend)
    trip = tuple((int(pa[r]), int(pb[r]), int(c)) for r, c in zip(rows, cols))
    total = assignment.total_cost + float(cost[rows, cols].sum())
    return TripletSet(trip, total)


def _reassign_arm(dist, t, arm, backend=None):
    """Exactly re-solve which units of ``arm`` join the fixed other-arm pairs."""
    o1, o2 = [k for k in (0, 1, 2) if k != arm]
    cost = _d(dist, o1, arm)[t[:, o1], :] + _d(dist, o2, arm)[t[:, o2], :]
    rows, cols = linear_sum_assignment(cost, backend=backend)
    new = t.copy()
    new[rows, arm] = cols
    return new


def improve_triplets(triplet_set, dist, max_iters=50, backend=None):
    """Iteratively re-assign each arm against the pairs of the other two.

    One pass re-solves arms 0, 1, 2 in turn; a re-assignment is kept only if
    it strictly lowers the total. Stops after a pass with no decrease or
    after ``max_iters`` passes. Returns ``(TripletSet, passes, pass_costs)``.
    """
    if max_iters <= 0 or not triplet_set.triplets:
        return triplet_set, 0, []
    dist = _canon(dist)
    t = triplet_set.as_array().copy()
    cur = triplet_cost(dist, t)
    passes = 0
    pass_costs = []
    while passes < max_iters:
        passes += 1
        start = cur
        for arm in (0, 1, 2):
            cand = _reassign_arm(dist, t, arm, backend=backend)
            c = triplet_cost(dist, cand)
            if c < cur - _COST_TOL * max(1.0, abs(cur)):
                t, cur = cand, c
        pass_costs.append(cur)
        if not cur < start - _COST_TOL * max(1.0, abs(start)):
            break
    if np.array_equal(t, triplet_set.as_array()):
        return triplet_set, passes, pass_costs
    return _triplet_set(dist, t), passes, pass_costs


def triplet_match(dist, starting_pair=(0, 1), max_iters=50, caliper=None,
                  backend=None):
    """Pair-match ``starting_pair``, attach the third arm, then improve."""
    dist = _canon(dist)
    i, j = sorted(starting_pair)
    if (i, j) not in ARM_PAIRS:
        raise ValueError(f"invalid starting pair {starting_pair!r}")
    k = 3 - i - j
    sizes = [dist[(0, 1)].shape[0], dist[(0, 1)].shape[1], dist[(0, 2)].shape[1]]
    if min(sizes) == 0:
        return MatchRun((i, j), TripletSet((), 0.0), 0, 0.0)

    d_ij = dist[(i, j)]
    n_target = min(sizes)
    pair = optimal_pair_match(d_ij, caliper=caliper, backend=backend)
    if len(pair) > n_target:
        # keep the cheapest pairs so the third arm can cover every pair
        pc = np.array([d_ij[a, b] for a, b in pair.pairs])
        keep = np.sort(np.argsort(pc, kind="stable")[:n_target])
        kept = tuple(pair.pairs[q] for q in keep)
        pair = Assignment(kept, float(pc[keep].sum()))
    attached = attach_third_group(pair, _d(dist, i, k), _d(dist, j, k),
                                  backend=backend)
    t = np.empty((len(attached), 3), dtype=np.intp)
    if len(attached):
        arr = np.asarray(attached.triplets, dtype=np.intp)
        t[:, i], t[:, j], t[:, k] = arr[:, 0], arr[:, 1], arr[:, 2]
    ts = _triplet_set(dist, t)
    attach_cost = ts.total_cost
    improved, passes, pass_costs = improve_triplets(ts, dist, max_iters=max_iters,
                                                    backend=backend)
    return MatchRun((i, j), improved, passes, attach_cost, pass_costs)


def select_best_run(runs, smd_threshold=0.1):
    """Run with the most post-matching |SMD| cells under the threshold.

    Ties go to the lower total cost, then to the earlier run.
    """
    from .balance import pass_count

    if not runs:
        raise ValueError("no runs to select from")
    best = None
    best_key = None
    for idx, run in enumerate(runs):
        if run.balance is None:
            raise ValueError("every run needs a balance report attached")
        key = (-pass_count(run.balance, smd_threshold),
               run.triplet_set.total_cost, idx)
        if best_key is None or key < best_key:
            best, best_key = run, key
    return best


def binary_match(distances, treated_fraction=0.10, seed=0, caliper=None,
                 backend=None):
    """Match a random subsample of treated rows to the control columns.

    ``distances`` is treated × controls. Returns pairs in original indices.
    """
    distances = np.asarray(distances, dtype=np.float64)
    n_t, n_c = distances.shape
    if n_c == 0:
        raise MatchSizeError("no control units")
    k = math.ceil(treated_fraction * n_t)
    if k > n_c:
        raise MatchSizeError(f"{k} sampled treated units but only {n_c} controls")
    rng = np.random.default_rng(seed)
    if k >= n_t:
        sample = np.arange(n_t)
    else:
        sample = np.sort(rng.choice(n_t, size=k, replace=False))
    sub = optimal_pair_match(distances[sample], caliper=caliper, backend=backend)
    pairs = tuple((int(sample[a]), b) for a, b in sub.pairs)
    return Assignment(pairs, sub.total_cost)


def match_clusters(clusters, candidates, backend=None):
    """1:1 Mahalanobis match of clusters to a disjoint candidate pool.

    Both arguments map a name to its feature triple
    ``(p90_return, n_users, activity_rate)``. Features are standardized on the
    pooled set and the pooled covariance is used. Returns a list of
    ``(cluster_name, candidate_name)`` in the clusters' order.
    """
    from .represent import distance_matrix, standardize

    c_names = list(clusters)
    k_names = list(candidates)
    if set(c_names) & set(k_names):
        raise ValueError("candidate pool must be disjoint from the clusters")
    if len(k_names) < len(c_names):
        raise MatchSizeError(
            f"{len(k_names)} candidates for {len(c_names)} clusters")
    if not c_names:
        return []
    a = np.asarray([clusters[n] for n in c_names], dtype=np.float64)
    b = np.asarray([candidates[n] for n in k_names], dtype=np.float64)
    pooled, _ = standardize(np.vstack([a, b]))
    za, zb = pooled[: len(a)], pooled[len(a):]
    cov = np.cov(pooled, rowvar=False)
    d = distance_matrix(za, zb, metric="mahalanobis", covariance=cov)
    res = optimal_pair_match(d, backend=backend)
    return [(c_names[i], k_names[j]) for i, j in res.pairs]
