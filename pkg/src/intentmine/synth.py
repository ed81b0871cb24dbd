"""Synthetic search-log worlds with known ground truth.

The generator emits realistic-looking event streams (sessions of queries
with clicks, per-user geo assignment, news and concern-topic browsing)
from fully known per-region intent rates and platform coverage, so every
downstream estimate can be checked against truth. Generation is
deterministic given the configured seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta

import numpy as np

from .annotations import AnnotationRecord
from .logs import LogEvent, Region
from .rates import window_months

DAY_SECONDS = 86400


@dataclass
class RegionSpec:
    region_id: str
    county: str
    state: str
    population: int
    true_intent_rate: float
    coverage: float
    demographics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.true_intent_rate <= 1.0:
            raise ValueError(f"{self.region_id}: intent rate outside [0, 1]")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError(f"{self.region_id}: coverage outside (0, 1]")


@dataclass
class Vocabulary:
    seed_queries: list[str] = field(default_factory=lambda: [
        "where can i get a covid vaccine",
        "covid vaccine appointment near me",
        "cvs covid vaccine appointment",
        "covid vaccine sign up",
        "walgreens covid vaccine near me",
        "schedule covid vaccine dose",
    ])
    ambiguous_queries: list[str] = field(default_factory=lambda: [
        "covid vaccine",
        "coronavirus vaccine",
        "covid vaccine news",
        "covid booster",
    ])
    related_queries: list[str] = field(default_factory=lambda: [
        "cdc mask guidance",
        "covid cases today",
        "pandemic restrictions update",
        "new covid variant symptoms",
    ])
    distractor_queries: list[str] = field(default_factory=lambda: [
        "weather tomorrow",
        "best pasta recipe",
        "football scores tonight",
        "cheap flights to denver",
        "how to tie a tie",
        "movie times this weekend",
    ])


@dataclass
class ConcernTopic:
    name: str
    category: str
    n_urls: int = 10
    n_queries: int = 4
    weight: float = 1.0
    holdout_affinity: float = 1.0       # click-weight multiplier for late intenders
    near_intent_multiplier: float = 1.0  # elevation within +/-3 days of first intent


@dataclass
class NewsConfig:
    n_trusted: int = 6
    n_untrusted: int = 4
    click_prob: float = 0.1
    untrusted_share_early: float = 0.15
    untrusted_share_late: float = 0.15


@dataclass
class SyntheticWorldConfig:
    regions: list[RegionSpec]
    start_month: str = "2021-02"
    n_months: int = 7
    rng_seed: int = 0
    queries_per_month: tuple[int, int] = (30, 60)
    session_size: tuple[int, int] = (1, 4)
    month_dropout_prob: float = 0.0
    geo_missing_prob: float = 0.03
    travel_prob: float = 0.02
    # intent evidence mix on the first-intent day: seed query / URL click / both
    evidence_probs: tuple[float, float, float] = (0.4, 0.3, 0.3)
    repeat_intent_prob: float = 0.2
    ambiguous_prob: float = 0.12
    related_prob: float = 0.2
    topic_prob: float = 0.0
    first_intent_day_weights: list[float] | None = None
    first_intent_month_weights: list[float] | None = None  # ignored when day weights given
    n_shared_intent_urls: int = 10
    n_state_intent_urls: int = 3
    n_noise_urls: int = 24
    n_distractor_urls: int = 24
    malformed_click_prob: float = 0.0
    vocabulary: Vocabulary = field(default_factory=Vocabulary)
    topics: list[ConcernTopic] = field(default_factory=list)
    news: NewsConfig | None = None
    # cutoffs used only to pick each user's news/affinity class
    early_cutoff: str | None = None    # default: start of month 4
    holdout_start: str | None = None   # default: start of month 6

    def __post_init__(self):
        if not self.regions:
            raise ValueError("region list is empty")
        if abs(sum(self.evidence_probs) - 1.0) > 1e-9:
            raise ValueError("evidence_probs must sum to 1")

    def months(self) -> list[str]:
        return window_months(self.start_month, self.n_months)

    def days(self) -> list[date]:
        months = self.months()
        first = date.fromisoformat(months[0] + "-01")
        y, m = (int(p) for p in months[-1].split("-"))
        if m == 12:
            last = date(y + 1, 1, 1) - timedelta(days=1)
        else:
            last = date(y, m + 1, 1) - timedelta(days=1)
        n = (last - first).days + 1
        return [first + timedelta(days=i) for i in range(n)]

    def cutoff_dates(self) -> tuple[date, date]:
        months = self.months()
        early = (date.fromisoformat(self.early_cutoff) if self.early_cutoff
                 else date.fromisoformat(months[min(3, len(months) - 1)] + "-01"))
        hold = (date.fromisoformat(self.holdout_start) if self.holdout_start
                else date.fromisoformat(months[min(5, len(months) - 1)] + "-01"))
        return early, hold


@dataclass
class UserTruth:
    region_id: str
    county: str
    state: str
    intent: bool
    first_intent_day: date | None = None
    evidence_kind: str | None = None  # query | click | both
    user_class: str = "mid"           # early | mid | late


@dataclass
class GroundTruth:
    users: dict[str, UserTruth] = field(default_factory=dict)
    region_rates: dict[str, float] = field(default_factory=dict)
    region_coverage: dict[str, float] = field(default_factory=dict)
    url_kinds: dict[str, str] = field(default_factory=dict)  # intent|noise|distractor|news|topic:<name>
    topic_categories: dict[str, str] = field(default_factory=dict)
    news_scores: dict[str, int] = field(default_factory=dict)

    def intent_urls(self) -> set[str]:
        return {u for u, k in self.url_kinds.items() if k == "intent"}

    def to_json(self) -> dict:
        return {
            "users": {
                uid: {
                    "region_id": t.region_id, "county": t.county, "state": t.state,
                    "intent": t.intent,
                    "first_intent_day": t.first_intent_day.isoformat() if t.first_intent_day else None,
                    "evidence_kind": t.evidence_kind,
                    "user_class": t.user_class,
                }
                for uid, t in sorted(self.users.items())
            },
            "region_rates": dict(sorted(self.region_rates.items())),
            "region_coverage": dict(sorted(self.region_coverage.items())),
            "url_kinds": dict(sorted(self.url_kinds.items())),
            "topic_categories": dict(sorted(self.topic_categories.items())),
            "news_scores": dict(sorted(self.news_scores.items())),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        gt = cls(
            region_rates=d["region_rates"],
            region_coverage=d["region_coverage"],
            url_kinds=d["url_kinds"],
            topic_categories=d["topic_categories"],
            news_scores={k: int(v) for k, v in d["news_scores"].items()},
        )
        for uid, u in d["users"].items():
            gt.users[uid] = UserTruth(
                region_id=u["region_id"], county=u["county"], state=u["state"],
                intent=u["intent"],
                first_intent_day=date.fromisoformat(u["first_intent_day"])
                if u["first_intent_day"] else None,
                evidence_kind=u["evidence_kind"], user_class=u["user_class"],
            )
        return gt


@dataclass
class _Pools:
    intent_shared: list[str]
    intent_by_state: dict[str, list[str]]
    noise: list[str]
    distractor: list[str]
    topic_urls: dict[str, list[str]]
    topic_queries: dict[str, list[str]]
    trusted_domains: list[str]
    untrusted_domains: list[str]

    def intent_for(self, state: str) -> list[str]:
        return self.intent_shared + self.intent_by_state.get(state, [])


def _build_pools(cfg: SyntheticWorldConfig) -> _Pools:
    states = sorted({r.state for r in cfg.regions})
    pools = _Pools(
        intent_shared=[f"https://pharmacy-{i}.example.com/covid-vaccine/appointments-{i}"
                       for i in range(cfg.n_shared_intent_urls)],
        intent_by_state={
            s: [f"https://vaccine.{s.lower()}.example.gov/covid-vaccine/schedule-{j}"
                for j in range(cfg.n_state_intent_urls)]
            for s in states
        },
        noise=[f"https://health-news-{i}.example.org/covid-report-{i}"
               for i in range(cfg.n_noise_urls)],
        distractor=[f"https://site-{i}.example.net/page-{i}"
                    for i in range(cfg.n_distractor_urls)],
        topic_urls={
            t.name: [f"https://{t.name.replace('_', '-')}-source-{j}.example.org/"
                     f"vaccine-{t.name.replace('_', '-')}-article-{j}"
                     for j in range(t.n_urls)]
            for t in cfg.topics
        },
        topic_queries={
            t.name: [f"{t.name.replace('_', ' ')} covid vaccine {k}"
                     for k in range(t.n_queries)]
            for t in cfg.topics
        },
        trusted_domains=[f"daily-report-{i}.example.com"
                         for i in range(cfg.news.n_trusted)] if cfg.news else [],
        untrusted_domains=[f"tabloid-wire-{i}.example.com"
                           for i in range(cfg.news.n_untrusted)] if cfg.news else [],
    )
    return pools


def _month_days(days: list[date]) -> dict[str, list[date]]:
    by_month: dict[str, list[date]] = {}
    for d in days:
        by_month.setdefault(f"{d.year:04d}-{d.month:02d}", []).append(d)
    return by_month


def generate_world(cfg: SyntheticWorldConfig) -> tuple[list[LogEvent], GroundTruth]:
    """Emit the event stream and its ground truth.

    Each region realizes ~population*coverage users (binomial); each user
    is an intent user with the region's true rate. Intent users emit an
    unambiguous intent query and/or an intent-URL click on their first
    intent day; everyone emits background traffic (distractor, related,
    ambiguous, optional topic and news browsing).
    """
    rng = np.random.default_rng(cfg.rng_seed)
    pools = _build_pools(cfg)
    days = cfg.days()
    by_month = _month_days(days)
    months = cfg.months()
    early_cutoff, holdout_start = cfg.cutoff_dates()
    vocab = cfg.vocabulary

    truth = GroundTruth()
    for r in cfg.regions:
        truth.region_rates[r.region_id] = r.true_intent_rate
        truth.region_coverage[r.region_id] = r.coverage
    for urls in [pools.intent_shared, *pools.intent_by_state.values()]:
        for u in urls:
            truth.url_kinds[u] = "intent"
    for u in pools.noise:
        truth.url_kinds[u] = "noise"
    for u in pools.distractor:
        truth.url_kinds[u] = "distractor"
    for t in cfg.topics:
        truth.topic_categories[t.name] = t.category
        for u in pools.topic_urls[t.name]:
            truth.url_kinds[u] = f"topic:{t.name}"
    if cfg.news:
        for i, d in enumerate(pools.trusted_domains):
            truth.news_scores[d] = 75 + (i % 20)
        for i, d in enumerate(pools.untrusted_domains):
            truth.news_scores[d] = 20 + (i % 30)

    if cfg.first_intent_day_weights is not None:
        w = np.asarray(cfg.first_intent_day_weights, dtype=np.float64)
        if len(w) != len(days):
            raise ValueError(f"first_intent_day_weights needs length {len(days)}")
        day_weights = w / w.sum()
    elif cfg.first_intent_month_weights is not None:
        mw = cfg.first_intent_month_weights
        if len(mw) != len(months):
            raise ValueError(f"first_intent_month_weights needs length {len(months)}")
        per_month = {m: mw[i] / len(by_month[m]) for i, m in enumerate(months)}
        day_weights = np.array([per_month[f"{d.year:04d}-{d.month:02d}"] for d in days])
        day_weights = day_weights / day_weights.sum()
    else:
        day_weights = np.full(len(days), 1.0 / len(days))

    topic_base = np.array([t.weight for t in cfg.topics], dtype=np.float64)
    p_topic = cfg.topic_prob if cfg.topics else 0.0
    p_news = cfg.news.click_prob if cfg.news else 0.0

    events: list[LogEvent] = []
    zcta_of_state: dict[str, list[RegionSpec]] = {}
    for r in cfg.regions:
        zcta_of_state.setdefault(r.state, []).append(r)

    for r in sorted(cfg.regions, key=lambda r: r.region_id):
        n_users = int(rng.binomial(r.population, r.coverage))
        for ui in range(n_users):
            uid = f"u-{r.region_id}-{ui:05d}"
            intent = bool(rng.random() < r.true_intent_rate)
            first_day: date | None = None
            evidence = None
            if intent:
                first_day = days[int(rng.choice(len(days), p=day_weights))]
                evidence = ("query", "click", "both")[
                    int(rng.choice(3, p=cfg.evidence_probs))]
            if first_day is None:
                user_class = "mid"
            elif first_day < early_cutoff:
                user_class = "early"
            elif first_day >= holdout_start:
                user_class = "late"
            else:
                user_class = "mid"
            truth.users[uid] = UserTruth(
                region_id=r.region_id, county=r.county, state=r.state,
                intent=intent, first_intent_day=first_day,
                evidence_kind=evidence, user_class=user_class,
            )
            _emit_user_events(events, rng, cfg, pools, vocab, uid, r,
                              zcta_of_state[r.state], by_month, months,
                              first_day, evidence, user_class,
                              topic_base, p_topic, p_news)
    return events, truth


def _emit_user_events(events, rng, cfg, pools, vocab, uid, region, state_regions,
                      by_month, months, first_day, evidence, user_class,
                      topic_base, p_topic, p_news):
    q_per_month = int(rng.integers(cfg.queries_per_month[0], cfg.queries_per_month[1] + 1))
    session_counter = 0
    untrusted_share = 0.0
    if cfg.news:
        untrusted_share = (cfg.news.untrusted_share_late if user_class == "late"
                           else cfg.news.untrusted_share_early)

    def geo(day_rng) -> tuple[str | None, str | None, str | None]:
        if day_rng < cfg.geo_missing_prob:
            return None, None, None
        if day_rng < cfg.geo_missing_prob + cfg.travel_prob and len(state_regions) > 1:
            other = state_regions[int(rng.integers(0, len(state_regions)))]
            return other.region_id, other.county, other.state
        return region.region_id, region.county, region.state

    def one_query(day: date) -> tuple[str, list[str]]:
        near_intent = (first_day is not None and abs((day - first_day).days) <= 3)
        roll = rng.random()
        if roll < p_topic:
            w = topic_base.copy()
            for ti, t in enumerate(cfg.topics):
                if user_class == "late":
                    w[ti] *= t.holdout_affinity
                if near_intent:
                    w[ti] *= t.near_intent_multiplier
            t = cfg.topics[int(rng.choice(len(cfg.topics), p=w / w.sum()))]
            q = pools.topic_queries[t.name][int(rng.integers(0, len(pools.topic_queries[t.name])))]
            urls = pools.topic_urls[t.name]
            n_click = 2 if (rng.random() < 0.5 and len(urls) > 1) else 1
            picked = rng.choice(len(urls), size=n_click, replace=False)
            return q, [urls[int(i)] for i in sorted(picked)]
        roll -= p_topic
        if roll < p_news:
            doms = (pools.untrusted_domains if rng.random() < untrusted_share
                    else pools.trusted_domains)
            dom = doms[int(rng.integers(0, len(doms)))]
            q = ("daily news", "breaking news", "news headlines")[int(rng.integers(0, 3))]
            return q, [f"https://{dom}/story-{int(rng.integers(0, 5))}"]
        roll -= p_news
        if roll < cfg.ambiguous_prob:
            q = vocab.ambiguous_queries[int(rng.integers(0, len(vocab.ambiguous_queries)))]
            clicks: list[str] = []
            if (first_day is not None and day >= first_day
                    and rng.random() < cfg.repeat_intent_prob):
                urls = pools.intent_for(region.state)
                clicks = [urls[int(rng.integers(0, len(urls)))]]
            elif rng.random() < 0.6:
                clicks = [pools.noise[int(rng.integers(0, len(pools.noise)))]]
            return q, clicks
        roll -= cfg.ambiguous_prob
        if roll < cfg.related_prob:
            q = vocab.related_queries[int(rng.integers(0, len(vocab.related_queries)))]
            clicks = ([pools.noise[int(rng.integers(0, len(pools.noise)))]]
                      if rng.random() < 0.5 else [])
            return q, clicks
        q = vocab.distractor_queries[int(rng.integers(0, len(vocab.distractor_queries)))]
        clicks = ([pools.distractor[int(rng.integers(0, len(pools.distractor)))]]
                  if rng.random() < 0.4 else [])
        if cfg.malformed_click_prob and rng.random() < cfg.malformed_click_prob:
            clicks.append("javascript:void(0)")
        return q, clicks

    def emit_session(day: date, queries: list[tuple[str, list[str]]]):
        nonlocal session_counter
        session_counter += 1
        sid = f"{uid}-s{session_counter:04d}"
        zcta, county, state = geo(rng.random())
        base_s = int(rng.integers(0, DAY_SECONDS - 3600))
        for k, (q, clicks) in enumerate(queries):
            ts = datetime.combine(day, datetime.min.time()) + timedelta(seconds=base_s + 30 * k)
            events.append(LogEvent(user_id=uid, timestamp=ts, query=q, clicks=clicks,
                                   session_id=sid, zcta=zcta, county=county, state=state))

    for m in months:
        mdays = by_month[m]
        q_m = q_per_month
        if cfg.month_dropout_prob and rng.random() < cfg.month_dropout_prob:
            q_m = max(1, q_per_month // 10)
        day_idx = np.sort(rng.integers(0, len(mdays), size=q_m))
        i = 0
        while i < q_m:
            size = int(rng.integers(cfg.session_size[0], cfg.session_size[1] + 1))
            size = min(size, q_m - i)
            day = mdays[int(day_idx[i])]
            emit_session(day, [one_query(day) for _ in range(size)])
            i += size
        if first_day is not None and f"{first_day.year:04d}-{first_day.month:02d}" == m:
            urls = pools.intent_for(region.state)
            intent_url = urls[int(rng.integers(0, len(urls)))]
            seed_q = cfg.vocabulary.seed_queries[
                int(rng.integers(0, len(cfg.vocabulary.seed_queries)))]
            ambiguous_q = cfg.vocabulary.ambiguous_queries[
                int(rng.integers(0, len(cfg.vocabulary.ambiguous_queries)))]
            if evidence == "query":
                qs = [(ambiguous_q, []), (seed_q, [])]
            elif evidence == "click":
                qs = [(ambiguous_q, [intent_url])]
            else:
                qs = [(ambiguous_q, []), (seed_q, [intent_url])]
            # sessions often continue after the intent action
            if rng.random() < 0.5:
                follow = vocab.related_queries[int(rng.integers(0, len(vocab.related_queries)))]
                follow_clicks = ([pools.noise[int(rng.integers(0, len(pools.noise)))]]
                                 if rng.random() < 0.5 else [])
                qs.append((follow, follow_clicks))
            emit_session(first_day, qs)


def regions_csv_rows(cfg: SyntheticWorldConfig) -> list[Region]:
    return [Region(region_id=r.region_id, population=r.population,
                   county=r.county, state=r.state, demographics=dict(r.demographics))
            for r in sorted(cfg.regions, key=lambda r: r.region_id)]


def annotate_candidates(
    urls: list[str],
    url_kinds: dict[str, str],
    seed: int = 0,
    noise: float = 0.02,
    missing_prob: float = 0.0,
    n_annotators: int = 3,
    annotator_offset: int = 0,
) -> list[AnnotationRecord]:
    """Simulated annotators: mostly agree with truth, with label noise."""
    rng = np.random.default_rng(seed)
    records = []
    for url in urls:
        is_intent = url_kinds.get(url) == "intent"
        for a in range(n_annotators):
            aid = f"ann-{annotator_offset + a:03d}"
            roll = rng.random()
            if missing_prob and roll < missing_prob:
                verdict = "missing_page"
            else:
                correct = rng.random() >= noise
                positive = is_intent if correct else not is_intent
                if positive:
                    verdict = "highly_likely" if rng.random() < 0.6 else "likely"
                else:
                    verdict = "unlikely" if rng.random() < 0.6 else "ambiguous"
            records.append(AnnotationRecord(url=url, annotator_id=aid, verdict=verdict))
    return records


def synth_redirects(urls: list[str], far_prob: float = 0.05, seed: int = 0) -> dict[str, str]:
    """Redirect map: identity for most URLs, a few moved far away."""
    rng = np.random.default_rng(seed)
    out = {}
    for url in urls:
        if rng.random() < far_prob:
            out[url] = f"https://moved.example.com/landing-{int(rng.integers(0, 1000))}"
        else:
            out[url] = url
    return out


def reported_series_from_truth(
    truth: GroundTruth, days: list[date], lag: int = 0,
    noise: float = 0.0, seed: int = 0,
) -> tuple[list[date], np.ndarray]:
    """Daily reported counts: true first-intent counts delayed by ``lag``
    days, with optional multiplicative noise. Plays the role of an
    external reporting stream for lag-scan comparisons."""
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(days))
    index = {d: i for i, d in enumerate(days)}
    for t in truth.users.values():
        if t.first_intent_day is None:
            continue
        i = index.get(t.first_intent_day + timedelta(days=lag))
        if i is not None:
            counts[i] += 1
    if noise:
        counts = counts * (1.0 + noise * rng.standard_normal(len(counts)))
        counts = np.clip(counts, 0.0, None)
    return days, counts


def demo_world_config(
    n_states: int = 3,
    zctas_per_state: int = 3,
    population: int = 240,
    coverage: tuple[float, float] = (0.35, 0.6),
    intent_rate: tuple[float, float] = (0.15, 0.45),
    rng_seed: int = 0,
    **overrides,
) -> SyntheticWorldConfig:
    """Compact desk-scale world: a grid of regions with linearly varying
    rate and coverage, plus simple demographics for quartile analyses."""
    regions = []
    n_total = n_states * zctas_per_state
    i = 0
    for s in range(n_states):
        state = f"S{s:02d}"
        for z in range(zctas_per_state):
            frac = i / max(n_total - 1, 1)
            rate = intent_rate[0] + (intent_rate[1] - intent_rate[0]) * frac
            cov = coverage[0] + (coverage[1] - coverage[0]) * (1.0 - frac)
            regions.append(RegionSpec(
                region_id=f"Z{i:03d}", county=f"C{s:02d}{z // 2}", state=state,
                population=population, true_intent_rate=round(rate, 6),
                coverage=round(cov, 6),
                demographics={
                    "pct_65_over": round(10.0 + 30.0 * frac, 4),
                    "median_income": round(40000 + 35000 * (1.0 - frac), 2),
                    "pct_bachelor": round(15.0 + 25.0 * ((i * 7) % n_total) / n_total, 4),
                },
            ))
            i += 1
    return SyntheticWorldConfig(regions=regions, rng_seed=rng_seed, **overrides)


# -- config (de)serialization for the CLI --------------------------------------


def config_to_dict(cfg: SyntheticWorldConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> SyntheticWorldConfig:
    d = dict(d)
    if "grid" in d:
        grid = d.pop("grid")
        base = demo_world_config(**grid)
        merged = asdict(base)
        merged.update({k: v for k, v in d.items() if k != "regions"})
        d = merged
    d["regions"] = [RegionSpec(**r) for r in d["regions"]]
    if "vocabulary" in d and isinstance(d["vocabulary"], dict):
        d["vocabulary"] = Vocabulary(**d["vocabulary"])
    if d.get("topics"):
        d["topics"] = [ConcernTopic(**t) if isinstance(t, dict) else t for t in d["topics"]]
    if d.get("news") and isinstance(d["news"], dict):
        d["news"] = NewsConfig(**d["news"])
    for key in ("queries_per_month", "session_size", "evidence_probs"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    return SyntheticWorldConfig(**d)


def write_truth(truth: GroundTruth, fh) -> None:
    json.dump(truth.to_json(), fh, indent=2, sort_keys=True)
    fh.write("\n")


def read_truth(path) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        return GroundTruth.from_json(json.load(fh))
