# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Statement-for-statement twins of ``_ref.py``; both
backends must produce bit-identical output (parity is enforced by tests).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def levenshtein(str a, str b):
    if a == b:
        return 0
    cdef Py_ssize_t la = len(a), lb = len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    cdef cnp.ndarray[cnp.int32_t, ndim=1] aa = np.fromiter((ord(c) for c in a), dtype=np.int32, count=la)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] bb = np.fromiter((ord(c) for c in b), dtype=np.int32, count=lb)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] prev = np.arange(lb + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cur = np.zeros(lb + 1, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef cnp.int64_t cost, best, cand
    for i in range(1, la + 1):
        cur[0] = i
        for j in range(1, lb + 1):
            cost = 0 if aa[i - 1] == bb[j - 1] else 1
            best = prev[j] + 1
            cand = cur[j - 1] + 1
            if cand < best:
                best = cand
            cand = prev[j - 1] + cost
            if cand < best:
                best = cand
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[lb])


def ppr_solve(cnp.ndarray[cnp.int64_t, ndim=1] indptr,
              cnp.ndarray[cnp.int64_t, ndim=1] indices,
              cnp.ndarray[cnp.float64_t, ndim=1] probs,
              cnp.ndarray[cnp.uint8_t, ndim=1] dangling,
              cnp.ndarray[cnp.float64_t, ndim=1] seed_vec,
              double alpha, double tol, int max_iter):
    cdef Py_ssize_t n = seed_vec.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x = np.array(seed_vec, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] nxt = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] tmp
    cdef Py_ssize_t i, j, k
    cdef int it
    cdef double xi, axi, dang, t, diff, d
    for it in range(1, max_iter + 1):
        for j in range(n):
            nxt[j] = 0.0
        dang = 0.0
        for i in range(n):
            xi = x[i]
            if dangling[i]:
                dang += xi
            else:
                axi = alpha * xi
                for k in range(indptr[i], indptr[i + 1]):
                    nxt[indices[k]] += axi * probs[k]
        t = (1.0 - alpha) + alpha * dang
        diff = 0.0
        for j in range(n):
            nxt[j] += t * seed_vec[j]
            d = nxt[j] - x[j]
            diff += d if d >= 0.0 else -d
        tmp = x
        x = nxt
        nxt = tmp
        if diff < tol:
            return np.asarray(x), it, True
    return np.asarray(x), max_iter, False


def louvain_sweep(cnp.ndarray[cnp.int64_t, ndim=1] indptr,
                  cnp.ndarray[cnp.int64_t, ndim=1] indices,
                  cnp.ndarray[cnp.float64_t, ndim=1] weights,
                  cnp.ndarray[cnp.float64_t, ndim=1] degree,
                  cnp.ndarray[cnp.int64_t, ndim=1] labels,
                  cnp.ndarray[cnp.float64_t, ndim=1] comm_tot,
                  cnp.ndarray[cnp.int64_t, ndim=1] order,
                  double gamma, double two_m):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t nc = comm_tot.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] neigh_w = np.zeros(nc, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] seen = np.zeros(nc, dtype=np.int64)
    cdef Py_ssize_t n_seen, oi, i, j, k, s
    cdef cnp.int64_t ci, cj, c, best_c
    cdef double ki, best_gain, gain
    cdef long total_moves = 0
    cdef long moved = 1
    cdef bint already
    while moved:
        moved = 0
        for oi in range(n):
            i = order[oi]
            ki = degree[i]
            ci = labels[i]
            n_seen = 0
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j == i:
                    continue
                cj = labels[j]
                if neigh_w[cj] == 0.0:
                    already = False
                    for s in range(n_seen):
                        if seen[s] == cj:
                            already = True
                            break
                    if not already:
                        seen[n_seen] = cj
                        n_seen += 1
                neigh_w[cj] += weights[k]
            comm_tot[ci] -= ki
            best_c = ci
            best_gain = neigh_w[ci] - gamma * ki * comm_tot[ci] / two_m
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j == i:
                    continue
                c = labels[j]
                if c == best_c:
                    continue
                gain = neigh_w[c] - gamma * ki * comm_tot[c] / two_m
                if gain > best_gain:
                    best_gain = gain
                    best_c = c
            comm_tot[best_c] += ki
            if best_c != ci:
                labels[i] = best_c
                moved += 1
            for s in range(n_seen):
                neigh_w[seen[s]] = 0.0
            neigh_w[ci] = 0.0
        total_moves += moved
    return int(total_moves)
