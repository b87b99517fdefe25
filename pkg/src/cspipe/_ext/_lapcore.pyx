# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Shortest-augmenting-path solver for rectangular linear assignment.

Rows are assigned to distinct columns; requires n_rows <= n_cols.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def solve_rect(double[:, ::1] cost):
    cdef Py_ssize_t nr = cost.shape[0]
    cdef Py_ssize_t nc = cost.shape[1]
    if nr > nc:
        raise ValueError("solve_rect requires n_rows <= n_cols")

    cdef double[::1] u = np.zeros(nr)
    cdef double[::1] v = np.zeros(nc)
    cdef double[::1] shortest = np.empty(nc)
    cdef Py_ssize_t[::1] path = np.full(nc, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] col4row = np.full(nr, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] row4col = np.full(nc, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] remaining = np.empty(nc, dtype=np.intp)
    cdef char[::1] sr = np.zeros(nr, dtype=np.int8)
    cdef char[::1] sc = np.zeros(nc, dtype=np.int8)

    cdef Py_ssize_t cur_row, i, j, it, index, num_remaining, sink, tmp
    cdef double min_val, lowest, r

    for cur_row in range(nr):
        for j in range(nc):
            shortest[j] = INFINITY
            sc[j] = 0
            remaining[j] = nc - j - 1
        for i in range(nr):
            sr[i] = 0
        num_remaining = nc
        min_val = 0.0
        i = cur_row
        sink = -1

        while sink == -1:
            index = -1
            lowest = INFINITY
            sr[i] = 1
            for it in range(num_remaining):
                j = remaining[it]
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                    lowest = shortest[j]
                    index = it
            min_val = lowest
            if min_val == INFINITY or index == -1:
                raise ValueError("cost matrix is infeasible")
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            sc[j] = 1
            num_remaining -= 1
            remaining[index] = remaining[num_remaining]

        u[cur_row] += min_val
        for i in range(nr):
            if sr[i] and i != cur_row:
                u[i] += min_val - shortest[col4row[i]]
        for j in range(nc):
            if sc[j]:
                v[j] -= min_val - shortest[j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            tmp = col4row[i]
            col4row[i] = j
            j = tmp
            if i == cur_row:
                break

    return np.asarray(col4row)
