"""Shared statistical helpers: correlations, AUC, quantiles, RNG streams."""

from __future__ import annotations

from statistics import NormalDist

import numpy as np


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two equal-length vectors of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise ZeroDivisionError("zero variance, correlation undefined")
    return float((xc * yc).sum() / denom)


def rankdata(x) -> np.ndarray:
    """Ranks starting at 1, ties receive the average rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float | None:
    """Rank correlation; None when either side is constant."""
    rx = rankdata(x)
    ry = rankdata(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return None
    return pearson(rx, ry)


def auc_score(y_true, scores) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    y = np.asarray(y_true, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def z_quantile(p: float) -> float:
    return NormalDist().inv_cdf(p)


def fisher_ci(r: float, n_eff: float, conf: float = 0.95) -> tuple[float, float]:
    """Fisher-transform confidence interval for a correlation."""
    if n_eff <= 3:
        return -1.0, 1.0
    r = min(max(r, -0.9999999), 0.9999999)
    z = np.arctanh(r)
    se = 1.0 / np.sqrt(n_eff - 3.0)
    zq = z_quantile(0.5 + conf / 2.0)
    return float(np.tanh(z - zq * se)), float(np.tanh(z + zq * se))


def percentile_ci(samples, lo: float = 2.5, hi: float = 97.5) -> tuple[float, float]:
    arr = np.asarray(samples, dtype=np.float64)
    return float(np.percentile(arr, lo)), float(np.percentile(arr, hi))


def rng_streams(master_seed: int, n: int) -> list[np.random.Generator]:
    """Independent, reproducible RNG streams derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(master_seed).spawn(n)]


def child_seed(master_seed: int, *path: int) -> np.random.SeedSequence:
    """Deterministic child seed for a named position in the run tree."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(path))
