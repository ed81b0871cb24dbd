"""Personalized PageRank from the seed-query set, plus candidate selection.

Scores solve x = (1-alpha)*s + alpha*x@P where s is uniform over the seed
nodes and P is row-stochastic over out-edges; rows without out-edges
(all URL nodes) teleport their mass back to the seed distribution.
Candidate selection ranks URLs per region, takes the union of per-region
top lists, dedups near-identical URL families, and filters redirects.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import IO, Mapping
from urllib.parse import urlparse

import numpy as np

from . import kernels
from .qcgraph import NODE_URL, QueryClickGraph


class SeedsNotInGraph(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__(f"{len(missing)} seed queries missing from graph: {missing[:5]}")
        self.missing = missing


@dataclass
class PprConfig:
    alpha: float = 0.85
    tolerance: float = 1e-10
    max_iterations: int = 1000
    top_n: int = 100

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class PprScores:
    region: str
    graph: QueryClickGraph
    scores: np.ndarray
    seeds: list[str]
    iterations: int = 0
    converged: bool = True

    def url_scores(self) -> dict[str, float]:
        return {u: float(self.scores[i]) for u, i in self.graph.url_index.items()}

    def query_scores(self) -> dict[str, float]:
        return {q: float(self.scores[i]) for q, i in self.graph.query_index.items()}

    def ranked_urls(self) -> list[tuple[str, float]]:
        """URLs by descending score; ties broken lexicographically."""
        return sorted(self.url_scores().items(), key=lambda kv: (-kv[1], kv[0]))

    def node_ranks(self) -> dict[int, int]:
        """Rank (0 = best) of every node by descending score."""
        order = sorted(range(len(self.scores)),
                       key=lambda i: (-self.scores[i], self.graph.node_texts[i]))
        return {node: rank for rank, node in enumerate(order)}


def graph_csr(g: QueryClickGraph):
    """Row-stochastic CSR of out-edge transition probabilities."""
    n = g.n_nodes
    out: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for (src, dst), w in g.edges.items():
        out[src].append((dst, w))
    indptr = np.zeros(n + 1, dtype=np.int64)
    indices = []
    probs = []
    dangling = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        row = sorted(out[i])
        if not row:
            dangling[i] = 1
        else:
            total = float(sum(w for _, w in row))
            for dst, w in row:
                indices.append(dst)
                probs.append(w / total)
        indptr[i + 1] = len(indices)
    return indptr, np.array(indices, dtype=np.int64), np.array(probs, dtype=np.float64), dangling


def personalized_pagerank(g: QueryClickGraph, seeds: set[str], cfg: PprConfig | None = None) -> PprScores:
    cfg = cfg or PprConfig()
    if not seeds:
        raise ValueError("seed set is empty")
    missing = sorted(s for s in seeds if s not in g.query_index)
    if missing:
        raise SeedsNotInGraph(missing)
    seed_list = sorted(seeds)
    n = g.n_nodes
    seed_vec = np.zeros(n, dtype=np.float64)
    for s in seed_list:
        seed_vec[g.query_index[s]] = 1.0 / len(seed_list)
    indptr, indices, probs, dangling = graph_csr(g)
    scores, iters, converged = kernels.ppr_solve(
        indptr, indices, probs, dangling, seed_vec,
        cfg.alpha, cfg.tolerance, cfg.max_iterations,
    )
    return PprScores(region=g.region, graph=g, scores=scores, seeds=seed_list,
                     iterations=iters, converged=converged)


@dataclass
class Candidate:
    url: str
    region: str
    rank: int
    score: float


@dataclass
class CandidateSet:
    rows: list[Candidate] = field(default_factory=list)

    def urls(self) -> list[str]:
        """Unique URLs ordered by best rank across regions, then name."""
        best: dict[str, int] = {}
        for r in self.rows:
            if r.url not in best or r.rank < best[r.url]:
                best[r.url] = r.rank
        return sorted(best, key=lambda u: (best[u], u))

    def best_rank(self, url: str) -> int:
        return min(r.rank for r in self.rows if r.url == url)

    def restricted_to(self, keep: set[str]) -> "CandidateSet":
        return CandidateSet(rows=[r for r in self.rows if r.url in keep])


def select_candidates(scores_by_region: Mapping[str, PprScores], cfg: PprConfig | None = None) -> CandidateSet:
    """Per region, take the top-N URLs by score; keep the union over regions.

    Every retained (url, region) pair keeps its per-region rank and score,
    so downstream steps can reason about where a URL ranked well.
    """
    cfg = cfg or PprConfig()
    if not scores_by_region:
        raise ValueError("no scored regions")
    rows: list[Candidate] = []
    for region in sorted(scores_by_region):
        ranked = scores_by_region[region].ranked_urls()
        for rank, (url, score) in enumerate(ranked[: cfg.top_n]):
            rows.append(Candidate(url=url, region=region, rank=rank, score=score))
    return CandidateSet(rows=rows)


def _url_shape(url: str) -> tuple[str, tuple[str, ...]]:
    parsed = urlparse(url)
    segments = tuple(s for s in parsed.path.split("/") if s)
    return parsed.netloc, segments


def dedup_by_pattern(cands: CandidateSet, max_per_pattern: int = 5) -> CandidateSet:
    """Cap near-identical URL families (same host and path template).

    URLs sharing a host and path shape (segment count) in groups of >= 3
    are folded into one template with varying segments wildcarded; only
    the ``max_per_pattern`` best-ranked URLs of each template survive.
    """
    urls = cands.urls()
    shapes: dict[tuple[str, int], list[str]] = {}
    for url in urls:
        host, segs = _url_shape(url)
        shapes.setdefault((host, len(segs)), []).append(url)
    family: dict[str, tuple] = {}
    for (host, n_seg), members in shapes.items():
        if len(members) < 3:
            for url in members:
                family[url] = ("self", url)
            continue
        columns = [set() for _ in range(n_seg)]
        for url in members:
            _, segs = _url_shape(url)
            for i, s in enumerate(segs):
                columns[i].add(s)
        for url in members:
            _, segs = _url_shape(url)
            template = tuple(s if len(columns[i]) == 1 else "*" for i, s in enumerate(segs))
            family[url] = (host, template)
    kept: set[str] = set()
    counts: dict[tuple, int] = {}
    for url in urls:  # urls() is already best-rank ordered
        f = family[url]
        if counts.get(f, 0) < max_per_pattern:
            counts[f] = counts.get(f, 0) + 1
            kept.add(url)
    return cands.restricted_to(kept)


def redirect_filter(cands: CandidateSet, redirect_map: Mapping[str, str]) -> CandidateSet:
    """Drop URLs that redirect far away (normalized edit distance > 0.2).

    URLs absent from the map are treated as redirecting to themselves.
    """
    kept = set()
    for url in cands.urls():
        target = redirect_map.get(url, url)
        if kernels.levenshtein(url, target) / len(url) <= 0.2:
            kept.add(url)
    return cands.restricted_to(kept)


def ranked_queries_for_review(scores: PprScores, top_n: int = 50) -> list[tuple[str, float]]:
    """Top non-seed queries by score, for manual inspection only."""
    seed_set = set(scores.seeds)
    ranked = sorted(scores.query_scores().items(), key=lambda kv: (-kv[1], kv[0]))
    return [(q, s) for q, s in ranked if q not in seed_set][:top_n]


def write_candidates(cands: CandidateSet, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["url", "region", "rank", "score"])
    for r in sorted(cands.rows, key=lambda r: (r.region, r.rank)):
        writer.writerow([r.url, r.region, r.rank, f"{r.score:.12g}"])


def read_candidates(path) -> CandidateSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = [Candidate(url=row["url"], region=row["region"],
                          rank=int(row["rank"]), score=float(row["score"]))
                for row in reader]
    return CandidateSet(rows=rows)


def read_redirect_map(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return {row["url"]: row["resolved_url"] for row in reader}
