"""Rule lexicons for unambiguous intent queries and URL label rules.

A query counts as a seed (unambiguous intent) query when it contains at
least one topic term AND at least one object term AND additionally matches
an intent pattern, contains an action/location term, or names a known
provider. Matching is substring-based on lower-cased text; regexes are
reserved for the intent patterns and URL rules.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class LexiconError(ValueError):
    pass


@dataclass
class SeedLexicon:
    topic_terms: list[str]
    object_terms: list[str]
    intent_patterns: list[str]
    action_terms: list[str]
    entity_names: list[str]
    graph_keywords: list[str]
    _compiled: list[re.Pattern] = field(default_factory=list, repr=False)

    def __post_init__(self):
        for name in ("topic_terms", "object_terms", "intent_patterns", "action_terms",
                     "entity_names", "graph_keywords"):
            if not getattr(self, name):
                raise LexiconError(f"lexicon section {name} is empty")
        try:
            self._compiled = [re.compile(p) for p in self.intent_patterns]
        except re.error as exc:
            raise LexiconError(f"bad intent pattern: {exc}") from exc
        # every seed query must also be graph-relevant, which holds as long
        # as each topic term is covered by some graph keyword
        for t in self.topic_terms:
            if not any(k in t for k in self.graph_keywords):
                raise LexiconError(
                    f"topic term {t!r} not covered by any graph keyword; "
                    "seed queries would not be graph-relevant"
                )

    @classmethod
    def from_dict(cls, d: dict) -> "SeedLexicon":
        return cls(
            topic_terms=list(d["topic_terms"]),
            object_terms=list(d["object_terms"]),
            intent_patterns=list(d["intent_patterns"]),
            action_terms=list(d["action_terms"]),
            entity_names=list(d["entity_names"]),
            graph_keywords=list(d["graph_keywords"]),
        )

    def to_dict(self) -> dict:
        return {
            "topic_terms": self.topic_terms,
            "object_terms": self.object_terms,
            "intent_patterns": self.intent_patterns,
            "action_terms": self.action_terms,
            "entity_names": self.entity_names,
            "graph_keywords": self.graph_keywords,
        }


@dataclass
class UrlLabelRule:
    pattern: str
    polarity: str  # "positive" | "negative"
    note: str = ""
    _compiled: re.Pattern = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise LexiconError(f"rule polarity must be positive/negative, got {self.polarity!r}")
        try:
            self._compiled = re.compile(self.pattern)
        except re.error as exc:
            raise LexiconError(f"bad URL rule pattern {self.pattern!r}: {exc}") from exc

    def matches(self, url: str) -> bool:
        return self._compiled.search(url) is not None


def is_seed_query(query: str, lex: SeedLexicon) -> bool:
    """True iff the query unambiguously expresses the target intent."""
    if not any(t in query for t in lex.topic_terms):
        return False
    if not any(t in query for t in lex.object_terms):
        return False
    if any(p.search(query) for p in lex._compiled):
        return True
    if any(t in query for t in lex.action_terms):
        return True
    return any(t in query for t in lex.entity_names)


def is_graph_relevant(query: str, lex: SeedLexicon) -> bool:
    """Broad keyword scoping used when assembling query-click graphs."""
    return any(k in query for k in lex.graph_keywords)


def apply_url_rules(url: str, rules: list[UrlLabelRule]) -> str | None:
    """First matching rule wins (rules are applied in list order)."""
    for rule in rules:
        if rule.matches(url):
            return rule.polarity
    return None


# Default lexicon for COVID-19 vaccine seeking. Term lists are best-effort
# (notably the action words and pharmacy names) and meant to be overridden
# from config for other topics or markets.
DEFAULT_LEXICON = {
    "topic_terms": ["covid", "coronavirus"],
    "object_terms": ["vaccin", "vacin", "vax", "dose", "shot", "booster",
                     "johnson", "pfizer", "moderna"],
    "intent_patterns": [
        r"\bfind (me |a |an )?\S*\s*(covid|corona)\S* (vaccin|vacin|vax)",
        r"\bget (a |an |my )?(covid|corona)\S* (vaccin|vacin|vax|shot|dose|booster)",
    ],
    "action_terms": ["appointment", "appt", "sign up", "signup", "schedule",
                     "register", "book", "walk in", "walk-in", "near me",
                     "nearby", "where can i", "where to get", "where do i",
                     "locations", "finder"],
    "entity_names": ["cvs", "walgreens", "walmart", "rite aid", "kroger",
                     "publix", "costco", "safeway", "albertsons", "heb",
                     "h-e-b", "meijer", "winn dixie", "winn-dixie", "hy-vee",
                     "wegmans", "giant eagle", "stop and shop"],
    "graph_keywords": ["covid", "corona", "pandemic", "cov19", "virus",
                       "variant", "vaccin", "vacin", "vax", "dose", "shot",
                       "booster", "rollout", "roll out", "fda", "cdc",
                       "johnson", "jj", "janssen", "pfizer", "phizer",
                       "biontech", "moderna", "astrazeneca", "mrna"],
}


def default_lexicon() -> SeedLexicon:
    return SeedLexicon.from_dict(DEFAULT_LEXICON)


def load_lexicon(source: dict | str) -> SeedLexicon:
    """Load from a config dict or a JSON file path; absent keys use defaults."""
    if isinstance(source, str):
        with open(source, encoding="utf-8") as fh:
            source = json.load(fh)
    merged = dict(DEFAULT_LEXICON)
    merged.update(source or {})
    return SeedLexicon.from_dict(merged)


def load_url_rules(rules: list[dict]) -> list[UrlLabelRule]:
    return [UrlLabelRule(pattern=r["pattern"], polarity=r["polarity"], note=r.get("note", ""))
            for r in rules]
