"""Multi-annotator consensus labels and the merged label store.

A URL needs three positive verdicts to be labeled positive. Two positives
plus one negative is non-consensus and waits for a fourth annotator; two
negative verdicts settle a URL as negative. Missing-page verdicts are
abstentions and send the URL back for reassignment. Consensus labels are
merged with regex rule labels; on conflict, the human consensus wins.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable

from .lexicon import UrlLabelRule, apply_url_rules

logger = logging.getLogger(__name__)

POSITIVE_VERDICTS = frozenset({"highly_likely", "likely"})
NEGATIVE_VERDICTS = frozenset({"ambiguous", "unlikely"})
VERDICTS = POSITIVE_VERDICTS | NEGATIVE_VERDICTS | {"missing_page"}


@dataclass
class AnnotationRecord:
    url: str
    annotator_id: str
    verdict: str

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")


@dataclass
class ConsensusResult:
    url: str
    label: str  # "positive" | "negative" | "undecided"
    needs_fourth: bool = False
    needs_reassignment: bool = False


def consensus(records: list[AnnotationRecord]) -> ConsensusResult:
    if len(records) < 3:
        raise ValueError(f"need at least 3 annotations, got {len(records)}")
    url = records[0].url
    if any(r.url != url for r in records):
        raise ValueError("records for multiple URLs passed to consensus")
    seen = set()
    for r in records:
        if r.annotator_id in seen:
            raise ValueError(f"annotator {r.annotator_id} voted twice on {url}")
        seen.add(r.annotator_id)
    pos = sum(r.verdict in POSITIVE_VERDICTS for r in records)
    neg = sum(r.verdict in NEGATIVE_VERDICTS for r in records)
    if pos + neg < 3:
        # missing-page abstentions left too few usable verdicts
        return ConsensusResult(url, "undecided", needs_reassignment=True)
    if pos >= 3:
        return ConsensusResult(url, "positive")
    if neg >= 2:
        return ConsensusResult(url, "negative")
    if pos == 2 and neg == 1:
        return ConsensusResult(url, "undecided", needs_fourth=True)
    return ConsensusResult(url, "undecided")


@dataclass
class LabelStore:
    url_labels: dict[str, tuple[str, str]] = field(default_factory=dict)  # url -> (label, provenance)
    seed_queries: set[str] = field(default_factory=set)
    conflicts: list[tuple[str, str, str]] = field(default_factory=list)  # (url, rule label, consensus label)

    def label_of(self, url: str) -> str | None:
        entry = self.url_labels.get(url)
        return entry[0] if entry else None

    def is_positive_url(self, url: str) -> bool:
        entry = self.url_labels.get(url)
        return entry is not None and entry[0] == "positive"

    def positives(self, provenances: set[str] | None = None) -> set[str]:
        return {u for u, (lab, prov) in self.url_labels.items()
                if lab == "positive" and (provenances is None or prov in provenances)}

    def negatives(self) -> set[str]:
        return {u for u, (lab, _) in self.url_labels.items() if lab == "negative"}

    def add_gnn_positives(self, urls: Iterable[str]) -> None:
        for u in urls:
            if u not in self.url_labels:
                self.url_labels[u] = ("positive", "gnn")


def assemble_labels(
    consensus_results: Iterable[ConsensusResult],
    rules: list[UrlLabelRule],
    rule_urls: Iterable[str],
    seed_queries: Iterable[str] = (),
) -> LabelStore:
    """Merge consensus labels with regex rule labels into one store.

    ``rule_urls`` is the universe of URLs the rules are applied to
    (typically every URL seen in the graphs). Undecided URLs stay out of
    the store entirely. Rule/consensus conflicts are resolved in favor of
    consensus and reported on the store.
    """
    store = LabelStore(seed_queries=set(seed_queries))
    rule_label: dict[str, str] = {}
    for url in rule_urls:
        polarity = apply_url_rules(url, rules)
        if polarity is not None:
            rule_label[url] = polarity
    by_consensus: dict[str, str] = {}
    for res in consensus_results:
        if res.label in ("positive", "negative"):
            by_consensus[res.url] = res.label
    for url, lab in sorted(by_consensus.items()):
        if url in rule_label and rule_label[url] != lab:
            store.conflicts.append((url, rule_label[url], lab))
            logger.warning("label conflict on %s: rule says %s, consensus says %s (keeping consensus)",
                           url, rule_label[url], lab)
        store.url_labels[url] = (lab, "consensus")
    for url, lab in sorted(rule_label.items()):
        if url not in store.url_labels:
            store.url_labels[url] = (lab, "rule")
    return store


def read_annotations(path) -> list[AnnotationRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [AnnotationRecord(url=row["url"], annotator_id=row["annotator_id"],
                                 verdict=row["verdict"]) for row in reader]


def write_annotations(records: Iterable[AnnotationRecord], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["url", "annotator_id", "verdict"])
    for r in records:
        writer.writerow([r.url, r.annotator_id, r.verdict])


def group_by_url(records: Iterable[AnnotationRecord]) -> dict[str, list[AnnotationRecord]]:
    grouped: dict[str, list[AnnotationRecord]] = {}
    for r in records:
        grouped.setdefault(r.url, []).append(r)
    return grouped


def write_labels(store: LabelStore, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["url", "label", "provenance"])
    for url in sorted(store.url_labels):
        lab, prov = store.url_labels[url]
        writer.writerow([url, lab, prov])
    for q in sorted(store.seed_queries):
        writer.writerow([q, "positive", "seed"])


def read_labels(path) -> LabelStore:
    store = LabelStore()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["provenance"] == "seed":
                store.seed_queries.add(row["url"])
            else:
                store.url_labels[row["url"]] = (row["label"], row["provenance"])
    return store
