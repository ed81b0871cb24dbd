"""User intent detection, coverage-corrected regional rates, and agreement
diagnostics.

A user is flagged on the earliest event whose query is a seed query or
whose click is a positively labeled URL (or matches a positive URL rule).
Active users are assigned a home region by the mode rule, regional rates
divide detected users by active users (inverse-coverage correction), and
sets of regions aggregate by population weighting (post-stratification).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .annotations import LabelStore
from .lexicon import SeedLexicon, UrlLabelRule, apply_url_rules, is_seed_query
from .logs import LogEvent, Region
from .stats import fisher_ci, pearson, rng_streams

GRANULARITIES = ("zcta", "county", "state")

STRICT_EVIDENCE = frozenset({"seed_query", "manual_url", "rule_url"})


@dataclass
class RatesConfig:
    active_threshold: int = 30     # queries per month to count as active
    mode_min_count: int = 10       # home region rule: mode needs this many queries
    mode_min_share: float = 0.25   # ... and this share of geo-tagged queries
    privacy_floor: int = 50        # minimum N(b,z) and N(z) to report a region
    smoothing_days: int = 7


@dataclass
class IntentEvidence:
    first_date: date
    evidence: str  # seed_query | manual_url | rule_url | gnn_url
    first_strict_date: date | None = None


@dataclass
class UserAssignment:
    user_id: str
    monthly_queries: dict[str, int] = field(default_factory=dict)
    active_months: list[str] = field(default_factory=list)
    home: dict[str, str | None] = field(default_factory=dict)

    @property
    def total_queries(self) -> int:
        return sum(self.monthly_queries.values())

    def avg_monthly_queries(self, months: Sequence[str]) -> float:
        return sum(self.monthly_queries.get(m, 0) for m in months) / len(months)

    def active_in_all(self, months: Sequence[str]) -> bool:
        return all(m in self.active_months for m in months)


@dataclass
class RegionStats:
    region_id: str
    population: int
    active_users: float   # mean monthly active users
    intent_users: int
    coverage: float
    rate: float
    coverage_flagged: bool = False


@dataclass
class RegionDiagnostics:
    region_id: str
    tpr: float
    fpr: float
    auc: float


def _event_evidence(e: LogEvent, labels: LabelStore, lex: SeedLexicon,
                    rules: Sequence[UrlLabelRule]) -> str | None:
    if is_seed_query(e.query, lex) or e.query in labels.seed_queries:
        return "seed_query"
    best: str | None = None
    for url in e.clicks:
        entry = labels.url_labels.get(url)
        if entry is not None:
            lab, prov = entry
            if lab == "positive":
                kind = "gnn_url" if prov == "gnn" else "manual_url"
                if best is None or kind != "gnn_url":
                    best = kind
        elif rules and apply_url_rules(url, list(rules)) == "positive":
            best = best or "rule_url"
    return best


def detect_intent_users(events: list[LogEvent], labels: LabelStore, lex: SeedLexicon,
                        rules: Sequence[UrlLabelRule] = ()) -> dict[str, IntentEvidence]:
    """Earliest intent evidence per user, tracking strict-evidence timing.

    Strict evidence (seed queries and manually labeled or rule-matched
    URLs) is recorded separately from expanded-URL evidence so that
    timing-sensitive analyses can ignore the looser signal.
    """
    ordered = sorted(events, key=lambda e: (e.user_id, e.timestamp, e.query))
    found: dict[str, IntentEvidence] = {}
    for e in ordered:
        prior = found.get(e.user_id)
        if prior is not None and prior.first_strict_date is not None:
            continue
        kind = _event_evidence(e, labels, lex, rules)
        if kind is None:
            continue
        if prior is None:
            found[e.user_id] = IntentEvidence(
                first_date=e.day, evidence=kind,
                first_strict_date=e.day if kind in STRICT_EVIDENCE else None,
            )
        elif kind in STRICT_EVIDENCE:
            prior.first_strict_date = e.day
    return found


def month_key(d: date) -> str:
    return f"{d.year:04d}-{d.month:02d}"


def window_months(start_month: str, n_months: int) -> list[str]:
    y, m = (int(p) for p in start_month.split("-"))
    out = []
    for _ in range(n_months):
        out.append(f"{y:04d}-{m:02d}")
        m += 1
        if m > 12:
            m, y = 1, y + 1
    return out


def assign_users(events: list[LogEvent], months: Sequence[str],
                 cfg: RatesConfig | None = None) -> dict[str, UserAssignment]:
    """Monthly activity plus mode-rule home regions per granularity.

    The home region is the modal region over the user's geo-tagged queries
    in the window; it must cover at least ``mode_min_count`` queries and
    ``mode_min_share`` of them, otherwise the user stays unassigned at
    that granularity.
    """
    cfg = cfg or RatesConfig()
    month_set = set(months)
    users: dict[str, UserAssignment] = {}
    geo_counts: dict[str, dict[str, dict[str, int]]] = {}
    for e in events:
        m = month_key(e.day)
        if m not in month_set:
            continue
        ua = users.get(e.user_id)
        if ua is None:
            ua = users[e.user_id] = UserAssignment(user_id=e.user_id)
            geo_counts[e.user_id] = {g: {} for g in GRANULARITIES}
        ua.monthly_queries[m] = ua.monthly_queries.get(m, 0) + 1
        gc = geo_counts[e.user_id]
        for g in GRANULARITIES:
            r = e.region(g)
            if r is not None:
                gc[g][r] = gc[g].get(r, 0) + 1
    for uid, ua in users.items():
        ua.active_months = sorted(m for m, c in ua.monthly_queries.items()
                                  if c >= cfg.active_threshold)
        for g in GRANULARITIES:
            counts = geo_counts[uid][g]
            if not counts:
                ua.home[g] = None
                continue
            total = sum(counts.values())
            mode_region = min(counts, key=lambda r: (-counts[r], r))
            c = counts[mode_region]
            ua.home[g] = mode_region if (c >= cfg.mode_min_count
                                         and c >= cfg.mode_min_share * total) else None
    return users


def region_stats(
    assignments: Mapping[str, UserAssignment],
    intent: Mapping[str, IntentEvidence],
    regions: Mapping[str, Region],
    months: Sequence[str],
    cfg: RatesConfig | None = None,
    granularity: str = "zcta",
) -> tuple[dict[str, RegionStats], list[tuple[str, str]]]:
    """Per-region coverage-corrected intent rates plus exclusion reasons.

    N(b,z) is the mean number of active users per month; the rate divides
    detected intent users by N(b,z). Regions under the privacy floor (on
    either population or active users) are excluded with a reason.
    """
    cfg = cfg or RatesConfig()
    monthly_active: dict[str, dict[str, int]] = {}
    intent_counts: dict[str, int] = {}
    for uid, ua in assignments.items():
        home = ua.home.get(granularity)
        if home is None or not ua.active_months:
            continue
        per_region = monthly_active.setdefault(home, {})
        for m in ua.active_months:
            if m in months:
                per_region[m] = per_region.get(m, 0) + 1
        if uid in intent:
            intent_counts[home] = intent_counts.get(home, 0) + 1
    stats: dict[str, RegionStats] = {}
    excluded: list[tuple[str, str]] = []
    for rid in sorted(monthly_active):
        region = regions.get(rid)
        if region is None:
            excluded.append((rid, "not_in_region_table"))
            continue
        n_b = sum(monthly_active[rid].values()) / len(months)
        n_v = intent_counts.get(rid, 0)
        if region.population < cfg.privacy_floor:
            excluded.append((rid, f"population<{cfg.privacy_floor}"))
            continue
        if n_b < cfg.privacy_floor:
            excluded.append((rid, f"active_users<{cfg.privacy_floor}"))
            continue
        coverage = n_b / region.population
        stats[rid] = RegionStats(
            region_id=rid, population=region.population, active_users=n_b,
            intent_users=n_v, coverage=coverage, rate=n_v / n_b,
            coverage_flagged=coverage > 1.0,
        )
    return stats, excluded


def aggregate(region_ids: Iterable[str], stats: Mapping[str, RegionStats]) -> float:
    """Population-weighted average rate over a set of regions."""
    ids = [r for r in region_ids if r in stats]
    if not ids:
        raise ValueError("aggregate over empty region set")
    num = sum(stats[r].population * stats[r].rate for r in ids)
    den = sum(stats[r].population for r in ids)
    return num / den


@dataclass
class WeightedCorrelation:
    r: float
    ci_low: float
    ci_high: float
    n_effective: float


def weighted_pearson(x, y, w, conf: float = 0.95) -> WeightedCorrelation:
    """Weighted Pearson correlation with a Fisher-transform CI.

    The CI uses the Kish effective sample size, which reduces to n under
    uniform weights.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (len(x) == len(y) == len(w)) or len(x) < 3:
        raise ValueError("need three equal-length vectors of length >= 3")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    wsum = w.sum()
    mx = (w * x).sum() / wsum
    my = (w * y).sum() / wsum
    cov = (w * (x - mx) * (y - my)).sum() / wsum
    vx = (w * (x - mx) ** 2).sum() / wsum
    vy = (w * (y - my) ** 2).sum() / wsum
    if vx == 0.0 or vy == 0.0:
        raise ZeroDivisionError("zero variance, correlation undefined")
    r = float(cov / np.sqrt(vx * vy))
    n_eff = float(wsum ** 2 / (w * w).sum())
    lo, hi = fisher_ci(r, n_eff, conf)
    return WeightedCorrelation(r=r, ci_low=lo, ci_high=hi, n_effective=n_eff)


@dataclass
class QuartileComparison:
    key: str
    top_rate: float
    bottom_rate: float
    pct_difference: float
    ci_low: float
    ci_high: float
    n_top: int
    n_bottom: int


def quartile_compare(
    stats: Mapping[str, RegionStats],
    all_regions: Mapping[str, Region],
    key: str,
    n_boot: int = 1000,
    seed: int = 0,
) -> QuartileComparison:
    """Percent difference in weighted rate, top vs bottom quartile regions.

    Quartile cutoffs come from every region in the table (not only the
    regions that survived privacy filtering). The bootstrap resamples
    regions with replacement and redraws each region's intent count from
    Binomial(N(b,z), rate).
    """
    values = [r.demographics[key] for r in all_regions.values() if key in r.demographics]
    if not values:
        raise ValueError(f"demographic {key!r} absent from region table")
    q25, q75 = np.percentile(values, [25, 75])
    top = sorted(r for r in stats
                 if key in all_regions[r].demographics and all_regions[r].demographics[key] >= q75)
    bottom = sorted(r for r in stats
                    if key in all_regions[r].demographics and all_regions[r].demographics[key] <= q25)
    if not top or not bottom:
        raise ValueError(f"empty quartile for {key!r} after privacy filtering")

    def group_arrays(ids):
        pop = np.array([stats[r].population for r in ids], dtype=np.float64)
        nb = np.array([stats[r].active_users for r in ids], dtype=np.float64)
        rate = np.array([stats[r].rate for r in ids], dtype=np.float64)
        return pop, nb, rate

    top_arr, bottom_arr = group_arrays(top), group_arrays(bottom)
    top_rate = float((top_arr[0] * top_arr[2]).sum() / top_arr[0].sum())
    bottom_rate = float((bottom_arr[0] * bottom_arr[2]).sum() / bottom_arr[0].sum())
    if bottom_rate == 0.0:
        raise ZeroDivisionError("bottom quartile rate is zero")
    point = 100.0 * (top_rate - bottom_rate) / bottom_rate

    diffs = np.empty(n_boot)
    for b, rng in enumerate(rng_streams(seed, n_boot)):
        resampled = []
        for pop, nb, rate in (top_arr, bottom_arr):
            idx = rng.integers(0, len(pop), size=len(pop))
            p, n, q = pop[idx], nb[idx], rate[idx]
            draws = rng.binomial(np.round(n).astype(np.int64), np.clip(q, 0.0, 1.0))
            resampled.append((p * (draws / n)).sum() / p.sum())
        t, bo = resampled
        diffs[b] = 100.0 * (t - bo) / bo if bo > 0 else np.nan
    lo, hi = np.nanpercentile(diffs, [2.5, 97.5])
    return QuartileComparison(key=key, top_rate=top_rate, bottom_rate=bottom_rate,
                              pct_difference=point, ci_low=float(lo), ci_high=float(hi),
                              n_top=len(top), n_bottom=len(bottom))


@dataclass
class DailySeries:
    start: date
    raw: np.ndarray
    smoothed: np.ndarray

    def dates(self) -> list[date]:
        return [self.start + timedelta(days=i) for i in range(len(self.raw))]


def smooth_trailing(series: np.ndarray, width: int = 7) -> np.ndarray:
    """Trailing mean over [t-width+1, t], zero-padded before the start."""
    padded = np.concatenate([np.zeros(width - 1), np.asarray(series, dtype=np.float64)])
    kernel = np.ones(width) / width
    return np.convolve(padded, kernel, mode="valid")


def intent_time_series(
    intent: Mapping[str, IntentEvidence],
    assignments: Mapping[str, UserAssignment],
    stats: Mapping[str, RegionStats],
    start: date,
    end: date,
    cfg: RatesConfig | None = None,
    granularity: str = "zcta",
    region_ids: Iterable[str] | None = None,
    strict: bool = False,
) -> DailySeries:
    """Daily first-intent rate for a region set, population-weighted
    (the aggregation rule applied day by day), with trailing smoothing."""
    cfg = cfg or RatesConfig()
    ids = sorted(region_ids) if region_ids is not None else sorted(stats)
    ids = [r for r in ids if r in stats]
    if not ids:
        raise ValueError("no reportable regions for time series")
    n_days = (end - start).days + 1
    if n_days <= 0:
        raise ValueError("empty date window")
    counts = {r: np.zeros(n_days) for r in ids}
    for uid, ev in intent.items():
        d = ev.first_strict_date if strict else ev.first_date
        if d is None or not (start <= d <= end):
            continue
        ua = assignments.get(uid)
        if ua is None or not ua.active_months:
            continue
        home = ua.home.get(granularity)
        if home in counts:
            counts[home][(d - start).days] += 1
    pop_total = sum(stats[r].population for r in ids)
    raw = np.zeros(n_days)
    for r in ids:
        raw += stats[r].population * (counts[r] / stats[r].active_users)
    raw /= pop_total
    return DailySeries(start=start, raw=raw, smoothed=smooth_trailing(raw, cfg.smoothing_days))


@dataclass
class LagScan:
    lags: list[int]
    correlations: list[float]
    best_lag: int
    best_correlation: float
    confident: bool


def lag_scan(series_a: np.ndarray, series_b: np.ndarray, max_lag: int = 21,
             min_overlap: int = 30, min_confident_r: float = 0.5) -> LagScan:
    """Correlate a(t) with b(t+l) for l = 0..max_lag; report the best lag.

    Ties prefer the smaller lag. A best correlation below
    ``min_confident_r`` is flagged low-confidence.
    """
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    n = min(len(a), len(b))
    if n - max_lag < min_overlap:
        raise ValueError(f"insufficient overlap: {n - max_lag} < {min_overlap} days")
    lags = list(range(max_lag + 1))
    corrs = []
    for l in lags:
        try:
            corrs.append(pearson(a[: n - l], b[l:n]))
        except ZeroDivisionError:
            corrs.append(float("nan"))
    finite = [(i, c) for i, c in enumerate(corrs) if np.isfinite(c)]
    if not finite:
        raise ValueError("no lag produced a defined correlation")
    best_lag, best_r = max(finite, key=lambda ic: (ic[1], -ic[0]))
    return LagScan(lags=lags, correlations=corrs, best_lag=best_lag,
                   best_correlation=best_r, confident=best_r >= min_confident_r)


def normalize_trend(series) -> np.ndarray:
    """Scale a nonnegative series so its maximum is exactly 100."""
    arr = np.asarray(series, dtype=np.float64)
    peak = arr.max() if arr.size else 0.0
    if peak <= 0.0:
        raise ValueError("series maximum must be positive")
    return arr / peak * 100.0


def bias_report(
    diagnostics: list[RegionDiagnostics],
    stats: Mapping[str, RegionStats],
    true_rates: Mapping[str, float] | None = None,
    tpr_tolerance: float = 0.1,
    fpr_tolerance: float = 0.05,
) -> dict:
    """Detector-uniformity diagnostics plus (on synthetic data) a check
    that rates respond linearly to the true rate: rate ~ FPR + (TPR-FPR)*p.
    """
    report: dict = {}
    if diagnostics:
        tprs = np.array([d.tpr for d in diagnostics])
        fprs = np.array([d.fpr for d in diagnostics])
        report["tpr"] = {"mean": float(tprs.mean()), "min": float(tprs.min()),
                         "max": float(tprs.max()), "spread": float(tprs.max() - tprs.min())}
        report["fpr"] = {"mean": float(fprs.mean()), "min": float(fprs.min()),
                         "max": float(fprs.max()), "spread": float(fprs.max() - fprs.min())}
        report["flagged_regions"] = sorted(
            d.region_id for d in diagnostics
            if abs(d.tpr - tprs.mean()) > tpr_tolerance or abs(d.fpr - fprs.mean()) > fpr_tolerance
        )
    if true_rates is not None:
        common = sorted(r for r in stats if r in true_rates)
        if len(common) >= 3:
            p = np.array([true_rates[r] for r in common])
            est = np.array([stats[r].rate for r in common])
            slope, intercept = np.polyfit(p, est, 1)
            pops = np.array([float(stats[r].population) for r in common])
            corrected = weighted_pearson(est, p, np.sqrt(pops))
            uncorrected_est = np.array([stats[r].intent_users / stats[r].population
                                        for r in common])
            uncorrected = weighted_pearson(uncorrected_est, p, np.sqrt(pops))
            report["linearity"] = {"slope": float(slope), "intercept": float(intercept),
                                   "n_regions": len(common)}
            report["truth_correlation"] = {"corrected": corrected.r, "uncorrected": uncorrected.r}
    return report


def write_region_stats(stats: Mapping[str, RegionStats], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["region_id", "population", "active_users", "intent_users",
                     "coverage", "rate", "coverage_flagged"])
    for rid in sorted(stats):
        s = stats[rid]
        writer.writerow([s.region_id, s.population, f"{s.active_users:.6g}", s.intent_users,
                         f"{s.coverage:.8g}", f"{s.rate:.8g}", int(s.coverage_flagged)])


def write_time_series(series: DailySeries, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["date", "rate", "smoothed_rate"])
    for d, r, s in zip(series.dates(), series.raw, series.smoothed):
        writer.writerow([d.isoformat(), f"{r:.10g}", f"{s:.10g}"])


def read_value_series(path) -> tuple[list[date], np.ndarray]:
    """External truth series CSV: date,value."""
    dates, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            dates.append(date.fromisoformat(row["date"]))
            values.append(float(row["value"]))
    return dates, np.asarray(values, dtype=np.float64)
