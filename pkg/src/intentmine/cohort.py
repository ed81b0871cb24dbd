"""Holdout / early-adopter cohorts: identification, covariate-constrained
maximum matching, inverse-coverage-weighted click ratios with bootstrap
CIs, fixed-effect logistic regression, and event-window dynamics.

A click's weight is the inverse platform coverage of the clicking user's
home region, N(z)/N(b,z). Group click probabilities are weighted shares of
"positive" clicks among relevant clicks; two groups are compared by the
ratio of their probabilities, with percentile bootstrap CIs obtained by
resampling clicks within each group.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

from .logs import LogEvent
from .rates import IntentEvidence, RegionStats, UserAssignment
from .stats import rng_streams

logger = logging.getLogger(__name__)


@dataclass
class CohortSpec:
    early_cutoff: date          # early adopters: first intent strictly before
    holdout_start: date         # holdouts: first intent on or after
    months: list[str]           # activity required in every one of these
    strict_evidence: bool = True

    def __post_init__(self):
        if self.early_cutoff >= self.holdout_start:
            raise ValueError("early cutoff must precede holdout start")


@dataclass
class MatchConstraint:
    max_query_diff: float = 10.0
    granularity: str = "county"


def identify_cohorts(
    intent: Mapping[str, IntentEvidence],
    assignments: Mapping[str, UserAssignment],
    spec: CohortSpec,
) -> tuple[list[str], list[str]]:
    """(holdouts, early_adopters); users must be active every month.

    Users who never showed intent are not holdouts, and users whose first
    intent falls between the cutoffs belong to neither cohort.
    """
    holdouts, early = [], []
    for uid in sorted(intent):
        ev = intent[uid]
        d = ev.first_strict_date if spec.strict_evidence else ev.first_date
        if d is None:
            continue
        ua = assignments.get(uid)
        if ua is None or not ua.active_in_all(spec.months):
            continue
        if d < spec.early_cutoff:
            early.append(uid)
        elif d >= spec.holdout_start:
            holdouts.append(uid)
    return holdouts, early


def hopcroft_karp(adjacency: list[list[int]], n_right: int) -> list[int]:
    """Maximum bipartite matching. Returns match_left (-1 for unmatched)."""
    n_left = len(adjacency)
    inf = float("inf")
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    dist = [0.0] * n_left

    def bfs() -> bool:
        queue = deque()
        for u in range(n_left):
            if match_l[u] == -1:
                dist[u] = 0.0
                queue.append(u)
            else:
                dist[u] = inf
        found = False
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                w = match_r[v]
                if w == -1:
                    found = True
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return found

    def dfs(u: int) -> bool:
        for v in adjacency[u]:
            w = match_r[v]
            if w == -1 or (dist[w] == dist[u] + 1 and dfs(w)):
                match_l[u] = v
                match_r[v] = u
                return True
        dist[u] = inf
        return False

    while bfs():
        for u in range(n_left):
            if match_l[u] == -1:
                dfs(u)
    return match_l


@dataclass
class MatchResult:
    pairs: list[tuple[str, str]]
    n_holdouts: int
    n_adopters: int

    @property
    def match_rate(self) -> float:
        return len(self.pairs) / self.n_holdouts if self.n_holdouts else 0.0


def match(
    holdouts: Sequence[str],
    adopters: Sequence[str],
    assignments: Mapping[str, UserAssignment],
    months: Sequence[str],
    constraint: MatchConstraint | None = None,
) -> MatchResult:
    """Maximum matching of holdouts to adopters under validity constraints
    (same coarse region, average monthly query counts within the bound).

    Candidate edges are found by bucketing on (region, query band), which
    prunes the quadratic scan without changing which edges are valid.
    """
    c = constraint or MatchConstraint()
    holdouts = sorted(holdouts)
    adopters = sorted(adopters)
    band = max(c.max_query_diff, 1e-9)

    def profile(uid: str):
        ua = assignments[uid]
        return ua.home.get(c.granularity), ua.avg_monthly_queries(months)

    buckets: dict[tuple[str, int], list[int]] = {}
    a_prof = []
    for j, uid in enumerate(adopters):
        region, avg = profile(uid)
        a_prof.append((region, avg))
        if region is not None:
            buckets.setdefault((region, int(avg // band)), []).append(j)
    adjacency: list[list[int]] = []
    for uid in holdouts:
        region, avg = profile(uid)
        edges: list[int] = []
        if region is not None:
            b = int(avg // band)
            for bb in (b - 1, b, b + 1):
                for j in buckets.get((region, bb), ()):
                    if abs(a_prof[j][1] - avg) <= c.max_query_diff:
                        edges.append(j)
        adjacency.append(sorted(edges))
    match_l = hopcroft_karp(adjacency, len(adopters))
    pairs = [(holdouts[i], adopters[j]) for i, j in enumerate(match_l) if j != -1]
    return MatchResult(pairs=pairs, n_holdouts=len(holdouts), n_adopters=len(adopters))


# -- click tables and ratios --------------------------------------------------


@dataclass
class ClickTable:
    """Flat click-level table for one group of users."""

    user_ids: list[str]
    days: list[date]
    urls: list[str]
    weights: np.ndarray

    @classmethod
    def from_events(
        cls,
        events: Iterable[LogEvent],
        users: set[str],
        coverage: Mapping[str, float],
        start: date | None = None,
        end: date | None = None,
        url_filter=None,
    ) -> "ClickTable":
        """Collect clicks of ``users``, weighting each by the inverse
        coverage of the clicking user's region (1.0 when unknown)."""
        uids, days, urls, weights = [], [], [], []
        for e in events:
            if e.user_id not in users:
                continue
            if start is not None and e.day < start:
                continue
            if end is not None and e.day > end:
                continue
            cov = coverage.get(e.zcta) if e.zcta else None
            w = 1.0 / cov if cov else 1.0
            for url in e.clicks:
                if url_filter is not None and not url_filter(url):
                    continue
                uids.append(e.user_id)
                days.append(e.day)
                urls.append(url)
                weights.append(w)
        return cls(user_ids=uids, days=days, urls=urls,
                   weights=np.asarray(weights, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.urls)

    def subset(self, mask: np.ndarray) -> "ClickTable":
        idx = np.flatnonzero(mask)
        return ClickTable(
            user_ids=[self.user_ids[i] for i in idx],
            days=[self.days[i] for i in idx],
            urls=[self.urls[i] for i in idx],
            weights=self.weights[idx],
        )


def coverage_map(stats: Mapping[str, RegionStats]) -> dict[str, float]:
    return {rid: s.coverage for rid, s in stats.items()}


class InfiniteRatioError(ZeroDivisionError):
    def __init__(self, n1: int, n2: int, pos1: float):
        super().__init__(
            f"denominator group has zero positive probability "
            f"(n1={n1}, n2={n2}, p1={pos1:.6g})")
        self.counts = (n1, n2)


def weighted_share(weights: np.ndarray, positive: np.ndarray) -> float:
    """Probability that a relevant click is positive, weight-normalized."""
    total = weights.sum()
    if total == 0.0:
        raise ValueError("no relevant clicks")
    return float((weights * positive).sum() / total)


def bootstrap_shares(weights: np.ndarray, members: np.ndarray, n_boot: int,
                     seed: int, chunk: int = 100) -> np.ndarray:
    """(n_boot, S) weighted shares over click resamples with replacement.

    ``members`` is an (n, S) indicator matrix; every bootstrap replicate
    uses its own seed-derived stream, so results do not depend on how the
    replicates are scheduled.
    """
    n = len(weights)
    s = members.shape[1]
    out = np.empty((n_boot, s), dtype=np.float64)
    streams = rng_streams(seed, n_boot)
    m = members.astype(np.float64)
    for start in range(0, n_boot, chunk):
        stop = min(start + chunk, n_boot)
        for b in range(start, stop):
            idx = streams[b].integers(0, n, size=n)
            w = weights[idx]
            out[b] = (w[:, None] * m[idx]).sum(axis=0) / w.sum()
    return out


@dataclass
class RatioReport:
    ratio: float | None
    ci_low: float | None
    ci_high: float | None
    p1: float
    p2: float
    n1: int
    n2: int
    status: str = "ok"  # ok | undefined


def click_ratio(
    weights1: np.ndarray, positive1: np.ndarray,
    weights2: np.ndarray, positive2: np.ndarray,
    n_boot: int = 1000, seed: int = 0,
) -> RatioReport:
    """Ratio p1/p2 of weighted positive-click probabilities with a
    percentile bootstrap CI (clicks resampled within each group)."""
    if len(weights1) == 0 or len(weights2) == 0:
        raise ValueError("both groups need at least one relevant click")
    p1 = weighted_share(weights1, positive1)
    p2 = weighted_share(weights2, positive2)
    if p2 == 0.0:
        raise InfiniteRatioError(len(weights1), len(weights2), p1)
    shares1 = bootstrap_shares(weights1, positive1[:, None], n_boot, seed)
    shares2 = bootstrap_shares(weights2, positive2[:, None], n_boot, seed + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = shares1[:, 0] / shares2[:, 0]
    ratios = ratios[np.isfinite(ratios)]
    if len(ratios) == 0:
        return RatioReport(ratio=p1 / p2, ci_low=None, ci_high=None,
                           p1=p1, p2=p2, n1=len(weights1), n2=len(weights2))
    lo, hi = np.percentile(ratios, [2.5, 97.5])
    return RatioReport(ratio=p1 / p2, ci_low=float(lo), ci_high=float(hi),
                       p1=p1, p2=p2, n1=len(weights1), n2=len(weights2))


def per_user_share(table: ClickTable, positive: np.ndarray) -> float:
    """Alternative measure: positive fraction per user, then the
    inverse-coverage-weighted average over users (cross-check only)."""
    by_user: dict[str, list[int]] = {}
    for i, uid in enumerate(table.user_ids):
        by_user.setdefault(uid, []).append(i)
    num = den = 0.0
    for uid, idx in by_user.items():
        frac = float(np.mean(positive[idx]))
        w = float(table.weights[idx[0]])
        num += w * frac
        den += w
    return num / den


# -- logistic regression with day fixed effects -------------------------------


@dataclass
class LogitModel:
    coef: float                  # window-indicator coefficient
    se: float
    intercept: float
    day_effects: dict[str, float] = field(default_factory=dict)
    converged: bool = True
    separated: bool = False
    log_likelihood: float = 0.0
    n: int = 0


def fit_logit(
    y: np.ndarray,
    v: np.ndarray,
    days: Sequence[date] | None = None,
    with_day_effects: bool = False,
    weights: np.ndarray | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogitModel:
    """Maximum-likelihood logistic fit of y on the window indicator v,
    optionally with one fixed effect per calendar day (reference day
    dropped). Damped Newton iterations run until the gradient norm falls
    below ``tol``; perfect separation is flagged, not fatal.
    """
    y = np.asarray(y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if len(set(v.tolist())) < 2:
        raise ValueError("window indicator must take both values")
    n = len(y)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    cols = [v, np.ones(n)]
    day_names: list[str] = []
    if with_day_effects:
        if days is None:
            raise ValueError("day effects requested without day values")
        uniq = sorted(set(days))
        for d in uniq[1:]:  # first day is the reference
            cols.append(np.array([1.0 if dd == d else 0.0 for dd in days]))
            day_names.append(d.isoformat())
    x = np.column_stack(cols)
    p_dim = x.shape[1]
    beta = np.zeros(p_dim)
    converged = False
    ll = -np.inf
    for _ in range(max_iter):
        z = x @ beta
        prob = 0.5 * (1.0 + np.tanh(0.5 * z))
        prob = np.clip(prob, 1e-12, 1.0 - 1e-12)
        grad = x.T @ (w * (y - prob))
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        wvar = w * prob * (1.0 - prob)
        hess = x.T @ (x * wvar[:, None])
        try:
            step = np.linalg.solve(hess + 1e-10 * np.eye(p_dim), grad)
        except np.linalg.LinAlgError:
            break
        new_ll = None
        scale = 1.0
        ll = float((w * (y * np.log(prob) + (1.0 - y) * np.log(1.0 - prob))).sum())
        for _ in range(30):  # damping
            cand = beta + scale * step
            zc = x @ cand
            pc = np.clip(0.5 * (1.0 + np.tanh(0.5 * zc)), 1e-12, 1.0 - 1e-12)
            new_ll = float((w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))).sum())
            if new_ll >= ll - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
    z = x @ beta
    prob = np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), 1e-12, 1.0 - 1e-12)
    ll = float((w * (y * np.log(prob) + (1.0 - y) * np.log(1.0 - prob))).sum())
    separated = bool(np.max(np.abs(beta)) > 30.0) or not converged
    if separated:
        logger.warning("logistic fit flagged (separation or non-convergence); "
                       "max |coef| = %.3g", float(np.max(np.abs(beta))))
    wvar = w * prob * (1.0 - prob)
    hess = x.T @ (x * wvar[:, None])
    try:
        cov = np.linalg.inv(hess + 1e-10 * np.eye(p_dim))
        se = float(np.sqrt(max(cov[0, 0], 0.0)))
    except np.linalg.LinAlgError:
        se = float("nan")
    return LogitModel(
        coef=float(beta[0]), se=se, intercept=float(beta[1]),
        day_effects={name: float(b) for name, b in zip(day_names, beta[2:])},
        converged=converged, separated=separated, log_likelihood=ll, n=n,
    )


# -- window dynamics -----------------------------------------------------------


@dataclass
class SubcatRatio:
    subcategory: str
    report: RatioReport | None
    reason: str = ""


@dataclass
class DynamicsPoint:
    subcategory: str
    offset_day: int
    ratio: float | None
    ci_low: float | None
    ci_high: float | None


@dataclass
class WindowDynamics:
    binary: list[SubcatRatio]
    raw: list[DynamicsPoint]
    conditioned: list[DynamicsPoint]


def _membership(table: ClickTable, url_subcats: Mapping[str, list[str]],
                subcats: list[str]) -> np.ndarray:
    idx = {s: j for j, s in enumerate(subcats)}
    m = np.zeros((len(table), len(subcats)), dtype=bool)
    for i, url in enumerate(table.urls):
        for s in url_subcats.get(url, ()):
            j = idx.get(s)
            if j is not None:
                m[i, j] = True
    return m


def window_dynamics(
    table: ClickTable,
    intent_dates: Mapping[str, date],
    url_subcats: Mapping[str, list[str]],
    subcategories: list[str],
    window: int = 3,
    offset_range: tuple[int, int] = (-14, 7),
    n_boot: int = 1000,
    seed: int = 0,
) -> WindowDynamics:
    """Concern dynamics around each user's first-intent date.

    ``table`` should already be restricted to the analysis period and to
    topic-relevant clicks of users with (strict-evidence) intent dates.
    Produces (a) in-window vs out-of-window ratios per subcategory and
    (b) per-offset-day ratios against the outside-range baseline, both raw
    and conditioned on topic relevance (conditioned shares use membership
    counts, so per-day shares sum to 1 across covered subcategories).
    """
    offsets = np.array([
        (d - intent_dates[u]).days if u in intent_dates else 10 ** 6
        for u, d in zip(table.user_ids, table.days)
    ])
    members = _membership(table, url_subcats, subcategories)
    lo, hi = offset_range
    in_window = np.abs(offsets) <= window
    out_window = ~in_window & (offsets != 10 ** 6)
    binary: list[SubcatRatio] = []
    for j, s in enumerate(subcategories):
        if not (members[in_window, j].any()):
            binary.append(SubcatRatio(subcategory=s, report=None, reason="no in-window clicks"))
            continue
        try:
            rep = click_ratio(table.weights[in_window], members[in_window, j],
                              table.weights[out_window], members[out_window, j],
                              n_boot=n_boot, seed=seed + j)
        except (InfiniteRatioError, ValueError) as exc:
            binary.append(SubcatRatio(subcategory=s, report=None, reason=str(exc)))
            continue
        binary.append(SubcatRatio(subcategory=s, report=rep))

    in_range = (offsets >= lo) & (offsets <= hi)
    base_mask = ~in_range & (offsets != 10 ** 6)
    raw: list[DynamicsPoint] = []
    conditioned: list[DynamicsPoint] = []
    if base_mask.sum() == 0:
        return WindowDynamics(binary=binary, raw=raw, conditioned=conditioned)
    base_w = table.weights[base_mask]
    base_m = members[base_mask]
    base_shares = np.array([weighted_share(base_w, base_m[:, j])
                            for j in range(len(subcategories))])
    base_boot = bootstrap_shares(base_w, base_m, n_boot, seed + 1000)
    # conditioned baseline: weight mass over membership pairs
    cond_base, cond_base_boot = _conditioned_shares(base_w, base_m, n_boot, seed + 2000)
    for k in range(lo, hi + 1):
        day_mask = offsets == k
        if day_mask.sum() == 0:
            continue
        w_k = table.weights[day_mask]
        m_k = members[day_mask]
        day_shares = np.array([weighted_share(w_k, m_k[:, j])
                               for j in range(len(subcategories))])
        day_boot = bootstrap_shares(w_k, m_k, n_boot, seed + 3000 + k)
        cond_day, cond_day_boot = _conditioned_shares(w_k, m_k, n_boot, seed + 4000 + k)
        for j, s in enumerate(subcategories):
            raw.append(_dyn_point(s, k, day_shares[j], base_shares[j],
                                  day_boot[:, j], base_boot[:, j]))
            conditioned.append(_dyn_point(s, k, cond_day[j], cond_base[j],
                                          cond_day_boot[:, j], cond_base_boot[:, j]))
    return WindowDynamics(binary=binary, raw=raw, conditioned=conditioned)


def _conditioned_shares(weights, members, n_boot, seed):
    """Shares over membership pairs (per-day shares sum to 1)."""
    mass = (weights[:, None] * members).sum(axis=0)
    total = mass.sum()
    point = mass / total if total > 0 else np.full(members.shape[1], np.nan)
    if total > 0:
        boot = bootstrap_shares(weights, members, n_boot, seed)
        boot = boot / boot.sum(axis=1, keepdims=True)
    else:
        boot = np.full((n_boot, members.shape[1]), np.nan)
    return point, boot


def _dyn_point(s, k, p_day, p_base, boot_day, boot_base) -> DynamicsPoint:
    if p_base <= 0 or not np.isfinite(p_day) or not np.isfinite(p_base):
        return DynamicsPoint(subcategory=s, offset_day=k, ratio=None,
                             ci_low=None, ci_high=None)
    with np.errstate(divide="ignore", invalid="ignore"):
        samples = boot_day / boot_base
    samples = samples[np.isfinite(samples)]
    if len(samples) == 0:
        return DynamicsPoint(subcategory=s, offset_day=k, ratio=float(p_day / p_base),
                             ci_low=None, ci_high=None)
    lo, hi = np.percentile(samples, [2.5, 97.5])
    return DynamicsPoint(subcategory=s, offset_day=k, ratio=float(p_day / p_base),
                         ci_low=float(lo), ci_high=float(hi))


# -- news trust ----------------------------------------------------------------


def url_domain(url: str) -> str:
    rest = url.split("://", 1)[-1]
    return rest.split("/", 1)[0].lower()


def _trust_lookup(domain: str, trust: Mapping[str, int]) -> int | None:
    if domain in trust:
        return trust[domain]
    parts = domain.split(".")
    for i in range(1, len(parts) - 1):
        parent = ".".join(parts[i:])
        if parent in trust:
            return trust[parent]
    return None


@dataclass
class NewsReport:
    overall: RatioReport | None
    status: str  # ok | undefined
    per_domain: list[tuple[str, float | None]]
    n_news_clicks: tuple[int, int]


def news_trust_ratio(
    table1: ClickTable,
    table2: ClickTable,
    trust: Mapping[str, int],
    threshold: int = 60,
    min_click_share: float = 1e-6,
    n_boot: int = 1000,
    seed: int = 0,
) -> NewsReport:
    """Untrusted-news click ratio between two groups, plus per-domain
    ratios for domains above the minimum share of total news clicks."""
    if not trust:
        raise ValueError("empty trust table")

    def news_arrays(table: ClickTable):
        scores = np.array([
            s if (s := _trust_lookup(url_domain(u), trust)) is not None else -1
            for u in table.urls
        ])
        mask = scores >= 0
        return table.subset(mask), scores[mask]

    t1, s1 = news_arrays(table1)
    t2, s2 = news_arrays(table2)
    if len(t1) == 0 or len(t2) == 0:
        raise ValueError("a group has no news clicks")
    pos1 = s1 < threshold
    pos2 = s2 < threshold
    try:
        overall = click_ratio(t1.weights, pos1, t2.weights, pos2, n_boot=n_boot, seed=seed)
        status = "ok"
    except InfiniteRatioError:
        if not pos1.any():
            overall, status = None, "undefined"  # no untrusted clicks anywhere
        else:
            raise
    total = len(t1) + len(t2)
    counts: dict[str, int] = {}
    for t in (t1, t2):
        for u in t.urls:
            d = url_domain(u)
            counts[d] = counts.get(d, 0) + 1
    per_domain: list[tuple[str, float | None]] = []
    d1 = np.array([url_domain(u) for u in t1.urls])
    d2 = np.array([url_domain(u) for u in t2.urls])
    for dom in sorted(counts):
        if counts[dom] / total < min_click_share:
            continue
        p1 = weighted_share(t1.weights, d1 == dom)
        p2 = weighted_share(t2.weights, d2 == dom)
        per_domain.append((dom, p1 / p2 if p2 > 0 else None))
    return NewsReport(overall=overall, status=status, per_domain=per_domain,
                      n_news_clicks=(len(t1), len(t2)))


def read_trust_table(path) -> dict[str, int]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        return {row["domain"].lower(): int(row["score"]) for row in csv.DictReader(fh)}
