"""Pure-Python fallback for the rectangular assignment kernel.

Same shortest-augmenting-path scheme as the compiled core; the scan over
unvisited columns is vectorized with numpy.
"""
import numpy as np


def solve_rect(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    nr, nc = cost.shape
    if nr > nc:
        raise ValueError("solve_rect requires n_rows <= n_cols")

    u = np.zeros(nr)
    v = np.zeros(nc)
    path = np.full(nc, -1, dtype=np.intp)
    col4row = np.full(nr, -1, dtype=np.intp)
    row4col = np.full(nc, -1, dtype=np.intp)

    for cur_row in range(nr):
        shortest = np.full(nc, np.inf)
        unvisited = np.ones(nc, dtype=bool)
        sr = np.zeros(nr, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1

        while sink == -1:
            sr[i] = True
            cols = np.flatnonzero(unvisited)
            r = min_val + cost[i, cols] - u[i] - v[cols]
            better = r < shortest[cols]
            upd = cols[better]
            path[upd] = i
            shortest[upd] = r[better]
            cand = shortest[cols]
            lowest = cand.min()
            if not np.isfinite(lowest):
                raise ValueError("cost matrix is infeasible")
            ties = cols[cand == lowest]
            free = ties[row4col[ties] == -1]
            j = int(free[0]) if free.size else int(ties[0])
            min_val = lowest
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
            unvisited[j] = False

        u[cur_row] += min_val
        rows = np.flatnonzero(sr)
        rows = rows[rows != cur_row]
        u[rows] += min_val - shortest[col4row[rows]]
        visited = ~unvisited
        v[visited] -= min_val - shortest[visited]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur_row:
                break

    return col4row
