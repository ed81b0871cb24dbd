"""Concern ontology construction: URL filtering, Louvain clustering on the
co-click graph, resolution tuning, cluster digests, and hierarchy assembly.

Modularity follows the standard weighted convention (self-loop weight
counts twice toward a node's degree) with the resolution parameter gamma
scaling the null term:

    Q = sum_in / 2m - gamma * sum_c (tot_c / 2m)^2

Louvain is the usual two-phase scheme: seeded-order local moves until no
strictly improving move exists, then community aggregation, repeated until
modularity stops increasing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .annotations import LabelStore
from .logs import LogEvent
from .qcgraph import CoClickGraph
from .stats import child_seed


@dataclass
class LouvainConfig:
    resolution: float = 1.0
    size_band: tuple[int, int] = (100, 500)
    min_click_support: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.size_band[0] >= self.size_band[1]:
            raise ValueError("size band lower bound must be below upper bound")


def filter_urls(
    events: Iterable[LogEvent],
    labels: LabelStore,
    topic_terms: Sequence[str] = ("vaccin", "vax"),
    min_support: int = 5,
    users: set[str] | None = None,
) -> set[str]:
    """Topic-matching clicked URLs, minus intent URLs and low-support URLs.

    Support counts distinct clicking users; ``users`` optionally restricts
    whose clicks are considered (e.g. the matched cohorts).
    """
    clickers: dict[str, set[str]] = {}
    for e in events:
        if users is not None and e.user_id not in users:
            continue
        for url in e.clicks:
            if not url.startswith("http"):
                continue
            if not any(t in url.lower() for t in topic_terms):
                continue
            if labels.is_positive_url(url):
                continue
            clickers.setdefault(url, set()).add(e.user_id)
    return {url for url, us in clickers.items() if len(us) >= min_support}


def coclick_subgraph(co: CoClickGraph, keep: set[str]) -> CoClickGraph:
    sub = CoClickGraph(region=co.region)
    for url in co.urls:
        if url in keep:
            sub.url_index[url] = len(sub.urls)
            sub.urls.append(url)
    for (i, j), w in co.edges.items():
        ui, uj = co.urls[i], co.urls[j]
        if ui in sub.url_index and uj in sub.url_index:
            a, b = sub.url_index[ui], sub.url_index[uj]
            sub.edges[(a, b) if a < b else (b, a)] = w
    return sub


def _csr_arrays(n: int, edges: Mapping[tuple[int, int], float], loops: np.ndarray):
    """Symmetric CSR with self-loop entries stored at twice their weight,
    so degrees and 2m are plain row/total sums."""
    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for (i, j), w in edges.items():
        adj[i].append((j, float(w)))
        adj[j].append((i, float(w)))
    for i in range(n):
        if loops[i] != 0.0:
            adj[i].append((i, 2.0 * float(loops[i])))
    indptr = np.zeros(n + 1, dtype=np.int64)
    indices = []
    weights = []
    for i in range(n):
        for j, w in sorted(adj[i]):
            indices.append(j)
            weights.append(w)
        indptr[i + 1] = len(indices)
    return indptr, np.array(indices, dtype=np.int64), np.array(weights, dtype=np.float64)


def _modularity_arrays(indptr, indices, weights, labels, gamma) -> float:
    two_m = float(weights.sum())
    if two_m == 0.0:
        return 0.0
    degree = np.zeros(len(indptr) - 1)
    for i in range(len(indptr) - 1):
        degree[i] = weights[indptr[i]:indptr[i + 1]].sum()
    sum_in = 0.0
    for i in range(len(indptr) - 1):
        for k in range(indptr[i], indptr[i + 1]):
            if labels[indices[k]] == labels[i]:
                sum_in += weights[k]
    tot: dict[int, float] = {}
    for i, c in enumerate(labels):
        tot[c] = tot.get(c, 0.0) + degree[i]
    return sum_in / two_m - gamma * sum(t * t for t in tot.values()) / (two_m * two_m)


@dataclass
class Partition:
    assignment: dict[str, int]  # url -> community id (0..k-1)
    modularity: float
    n_levels: int = 1

    def communities(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for url, c in self.assignment.items():
            out.setdefault(c, []).append(url)
        for urls in out.values():
            urls.sort()
        return out

    def sizes(self) -> list[int]:
        return sorted((len(v) for v in self.communities().values()), reverse=True)


def modularity(co: CoClickGraph, assignment: Mapping[str, int], gamma: float = 1.0) -> float:
    n = co.n_nodes
    loops = np.zeros(n)
    indptr, indices, weights = _csr_arrays(n, co.edges, loops)
    labels = np.array([assignment[u] for u in co.urls], dtype=np.int64)
    return _modularity_arrays(indptr, indices, weights, labels, gamma)


def louvain(co: CoClickGraph, cfg: LouvainConfig | None = None) -> Partition:
    """Two-phase modularity maximization at the configured resolution.

    Deterministic given the seed: node visit order is a seeded shuffle and
    aggregation renumbers communities in sorted order.
    """
    cfg = cfg or LouvainConfig()
    n = co.n_nodes
    if n == 0:
        raise ValueError("empty graph")
    if not co.edges:
        return Partition(assignment={u: i for i, u in enumerate(sorted(co.urls))},
                         modularity=0.0)
    # membership[i] = set of original node indices currently inside super-node i
    members: list[list[int]] = [[i] for i in range(n)]
    edges: dict[tuple[int, int], float] = dict(co.edges)
    loops = np.zeros(n)
    final = np.arange(n, dtype=np.int64)
    level = 0
    q_prev = -np.inf
    while True:
        size = len(members)
        indptr, indices, weights = _csr_arrays(size, edges, loops)
        degree = np.zeros(size)
        for i in range(size):
            degree[i] = weights[indptr[i]:indptr[i + 1]].sum()
        two_m = float(weights.sum())
        labels = np.arange(size, dtype=np.int64)
        comm_tot = degree.copy()
        rng = np.random.default_rng(child_seed(cfg.seed, level))
        order = rng.permutation(size).astype(np.int64)
        moves = kernels.louvain_sweep(indptr, indices, weights, degree, labels,
                                      comm_tot, order, cfg.resolution, two_m)
        q_now = _modularity_arrays(indptr, indices, weights, labels, cfg.resolution)
        if moves == 0 or q_now <= q_prev + 1e-12:
            break
        q_prev = q_now
        # aggregate: communities become nodes of the next level
        uniq = sorted(set(labels.tolist()))
        renum = {c: i for i, c in enumerate(uniq)}
        new_members: list[list[int]] = [[] for _ in uniq]
        for i, c in enumerate(labels):
            new_members[renum[c]].extend(members[i])
        node_to_new = np.array([renum[c] for c in labels], dtype=np.int64)
        for i in range(n):
            final[i] = node_to_new[final[i]]
        new_edges: dict[tuple[int, int], float] = {}
        new_loops = np.zeros(len(uniq))
        for (i, j), w in edges.items():
            a, b = node_to_new[i], node_to_new[j]
            if a == b:
                new_loops[a] += w
            else:
                key = (a, b) if a < b else (b, a)
                new_edges[key] = new_edges.get(key, 0.0) + w
        for i in range(len(members)):
            new_loops[node_to_new[i]] += loops[i]
        members = new_members
        edges = new_edges
        loops = new_loops
        level += 1
        if len(members) == size:
            break
    # renumber final communities compactly and deterministically
    uniq = sorted(set(final.tolist()))
    renum = {c: i for i, c in enumerate(uniq)}
    assignment = {co.urls[i]: renum[final[i]] for i in range(n)}
    indptr0, indices0, weights0 = _csr_arrays(n, co.edges, np.zeros(n))
    labels0 = np.array([assignment[u] for u in co.urls], dtype=np.int64)
    q = _modularity_arrays(indptr0, indices0, weights0, labels0, cfg.resolution)
    return Partition(assignment=assignment, modularity=q, n_levels=level + 1)


def tune_resolution(co: CoClickGraph, band: tuple[int, int],
                    grid: Sequence[float], seed: int = 0) -> tuple[float, dict[float, int]]:
    """Pick the gamma maximizing the count of in-band clusters (ties: smaller)."""
    if not grid:
        raise ValueError("empty resolution grid")
    counts: dict[float, int] = {}
    for gamma in grid:
        part = louvain(co, LouvainConfig(resolution=gamma, size_band=band, seed=seed))
        counts[gamma] = sum(1 for s in part.sizes() if band[0] <= s <= band[1])
    best = min(counts, key=lambda g: (-counts[g], g))
    return best, counts


@dataclass
class ClusterDigest:
    cluster_id: int
    n_urls: int
    total_clicks: int
    top_urls: list[tuple[str, int, float]]  # (url, clicks, pct share)
    top_queries: list[tuple[str, int]]
    sample_urls: list[str]


def cluster_digest(
    partition: Partition,
    events: Iterable[LogEvent],
    top_k: int = 4,
    top_queries: int = 10,
    sample_n: int = 30,
    seed: int = 0,
) -> list[ClusterDigest]:
    """Per-cluster click summaries used to hand-label clusters."""
    url_cluster = partition.assignment
    url_clicks: dict[str, int] = {}
    query_clicks: dict[tuple[int, str], int] = {}
    for e in events:
        for url in e.clicks:
            c = url_cluster.get(url)
            if c is None:
                continue
            url_clicks[url] = url_clicks.get(url, 0) + 1
            key = (c, e.query)
            query_clicks[key] = query_clicks.get(key, 0) + 1
    digests = []
    for cid, urls in sorted(partition.communities().items()):
        total = sum(url_clicks.get(u, 0) for u in urls)
        ranked = sorted(urls, key=lambda u: (-url_clicks.get(u, 0), u))
        top = [(u, url_clicks.get(u, 0),
                100.0 * url_clicks.get(u, 0) / total if total else 0.0)
               for u in ranked[:top_k]]
        qs = sorted(((q, n) for (c, q), n in query_clicks.items() if c == cid),
                    key=lambda kv: (-kv[1], kv[0]))[:top_queries]
        rng = np.random.default_rng(child_seed(seed, cid))
        if len(urls) <= sample_n:
            sample = list(urls)
        else:
            sample = sorted(rng.choice(np.array(urls), size=sample_n, replace=False).tolist())
        digests.append(ClusterDigest(cluster_id=cid, n_urls=len(urls), total_clicks=total,
                                     top_urls=top, top_queries=qs, sample_urls=sample))
    return digests


@dataclass
class Ontology:
    top_categories: list[str]
    subcategories: dict[str, str]  # subcategory -> top category
    cluster_subcats: dict[int, list[str]]  # cluster -> up to 2 subcategories
    unassigned: list[int] = field(default_factory=list)

    def url_subcategories(self, partition: Partition) -> dict[str, list[str]]:
        out = {}
        for url, cid in partition.assignment.items():
            subs = self.cluster_subcats.get(cid)
            if subs:
                out[url] = subs
        return out


def assemble_ontology(
    cluster_labels: Mapping[int, Sequence[str]],
    subcategory_map: Mapping[str, str],
    clusters: Iterable[int],
) -> Ontology:
    """Validate hand labels into a three-tier hierarchy.

    Every labeled cluster may carry at most two subcategories, each of
    which must map to a top category; unlabeled clusters are listed as
    unassigned and excluded from downstream ratios.
    """
    subcats = dict(subcategory_map)
    tops = sorted(set(subcats.values()))
    cluster_subcats: dict[int, list[str]] = {}
    unassigned = []
    for cid in sorted(clusters):
        subs = list(cluster_labels.get(cid, ()))
        if not subs:
            unassigned.append(cid)
            continue
        if len(subs) > 2:
            raise ValueError(f"cluster {cid}: at most 2 subcategories allowed, got {len(subs)}")
        for s in subs:
            if s not in subcats:
                raise ValueError(f"cluster {cid}: unknown subcategory {s!r}")
        cluster_subcats[cid] = subs
    return Ontology(top_categories=tops, subcategories=subcats,
                    cluster_subcats=cluster_subcats, unassigned=unassigned)


def refine_cluster(co: CoClickGraph, urls: set[str], seed: int = 0) -> Partition:
    """Re-partition one unclear cluster at the default resolution."""
    return louvain(coclick_subgraph(co, urls), LouvainConfig(resolution=1.0, seed=seed))


def write_partition(partition: Partition, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["url", "cluster_id"])
    for url in sorted(partition.assignment):
        writer.writerow([url, partition.assignment[url]])


def read_cluster_labels(path) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            subs = [row["subcategory"]]
            if row.get("subcategory2"):
                subs.append(row["subcategory2"])
            out[int(row["cluster_id"])] = subs
    return out


def read_subcategory_map(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["subcategory"]: row["top_category"] for row in csv.DictReader(fh)}


def write_digests(digests: list[ClusterDigest], fh: IO[str]) -> None:
    payload = [
        {
            "cluster_id": d.cluster_id,
            "n_urls": d.n_urls,
            "total_clicks": d.total_clicks,
            "top_urls": [{"url": u, "clicks": c, "pct_clicks": round(p, 4)}
                         for u, c, p in d.top_urls],
            "top_queries": [{"query": q, "clicks": c} for q, c in d.top_queries],
            "sample_urls": d.sample_urls,
        }
        for d in digests
    ]
    json.dump(payload, fh, indent=2, sort_keys=True)
    fh.write("\n")
