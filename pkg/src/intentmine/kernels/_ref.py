"""Pure-Python reference kernels.

These are the fallback implementations for the hot inner loops (edit
distance, PageRank power iteration, Louvain local-move sweeps). The
compiled twin in ``_fast.pyx`` mirrors these loops statement for
statement, in the same floating-point order, so both backends produce
bit-identical results. Keep the two in sync when editing either.
"""

from __future__ import annotations

import numpy as np


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insert/delete/substitute, unit costs)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    cur = [0] * (len(b) + 1)
    for i, ca in enumerate(a, start=1):
        cur[0] = i
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev, cur = cur, prev
    return prev[len(b)]


def ppr_solve(indptr, indices, probs, dangling, seed_vec, alpha, tol, max_iter):
    """Power iteration for personalized PageRank on a CSR transition matrix.

    ``probs`` holds row-stochastic out-edge probabilities; rows flagged in
    ``dangling`` have no out-edges and teleport their mass to ``seed_vec``.
    Iterates x <- (1-alpha)*s + alpha*(x P + d*s) until the L1 change drops
    below ``tol``. Returns (scores, n_iterations, converged).
    """
    n = len(seed_vec)
    x = np.array(seed_vec, dtype=np.float64)
    nxt = np.zeros(n, dtype=np.float64)
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
        x, nxt = nxt, x
        if diff < tol:
            return x, it, True
    return x, max_iter, False


def louvain_sweep(indptr, indices, weights, degree, labels, comm_tot, order, gamma, two_m):
    """Local-move phase of Louvain: sweep nodes until no move improves.

    ``labels`` and ``comm_tot`` are updated in place. Gains use the
    resolution-scaled null term gamma * k_i * tot_c / (2m). A node moves
    only on strictly positive improvement over staying put; ties keep the
    first candidate encountered in CSR neighbor order. Returns the total
    number of moves performed.
    """
    n = len(order)
    neigh_w = np.zeros(len(comm_tot), dtype=np.float64)
    total_moves = 0
    moved = 1
    while moved:
        moved = 0
        for oi in range(n):
            i = order[oi]
            ki = degree[i]
            ci = labels[i]
            # weights from i to each neighboring community (self excluded)
            seen = []
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j == i:
                    continue
                cj = labels[j]
                if neigh_w[cj] == 0.0 and cj not in seen:
                    seen.append(cj)
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
            for c in seen:
                neigh_w[c] = 0.0
            neigh_w[ci] = 0.0
        total_moves += moved
    return total_moves
