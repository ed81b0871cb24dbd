"""Query-click graphs and their collapse into URL co-click graphs.

A query-click graph has query and URL nodes with directed weighted edges:
query->query for within-session succession and query->URL for clicks.
Edge weights count occurrences. Graphs are scoped to a region (typically a
state) and include every session that contains at least one graph-relevant
query, in full.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable

from .lexicon import SeedLexicon, is_graph_relevant
from .logs import LogEvent, iter_sessions

NODE_QUERY = 0
NODE_URL = 1

GRAPH_FORMAT_VERSION = 1


@dataclass
class QueryClickGraph:
    region: str
    node_texts: list[str] = field(default_factory=list)
    node_kinds: list[int] = field(default_factory=list)
    query_index: dict[str, int] = field(default_factory=dict)
    url_index: dict[str, int] = field(default_factory=dict)
    # (src, dst) -> weight; src is always a query node
    edges: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.node_texts)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def urls(self) -> list[str]:
        return [t for t, k in zip(self.node_texts, self.node_kinds) if k == NODE_URL]

    def queries(self) -> list[str]:
        return [t for t, k in zip(self.node_texts, self.node_kinds) if k == NODE_QUERY]

    def _intern(self, text: str, kind: int) -> int:
        index = self.query_index if kind == NODE_QUERY else self.url_index
        idx = index.get(text)
        if idx is None:
            idx = len(self.node_texts)
            index[text] = idx
            self.node_texts.append(text)
            self.node_kinds.append(kind)
        return idx

    def _add_edge(self, src: int, dst: int, w: int = 1) -> None:
        if self.node_kinds[src] != NODE_QUERY:
            raise ValueError("URL nodes cannot have outgoing edges")
        key = (src, dst)
        self.edges[key] = self.edges.get(key, 0) + w


@dataclass
class CoClickGraph:
    """Undirected weighted graph over URLs; weight reflects shared queries."""

    region: str
    urls: list[str] = field(default_factory=list)
    url_index: dict[str, int] = field(default_factory=dict)
    # keys are (i, j) with i < j; no self-loops
    edges: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.urls)


def build_graph(
    events: list[LogEvent],
    lex: SeedLexicon,
    region: str | None = None,
    months: Iterable[str] | None = None,
) -> QueryClickGraph:
    """Build the query-click graph from a region's sessions.

    ``region`` filters events by state id (None keeps everything);
    ``months`` optionally restricts to "YYYY-MM" strings, mirroring the
    spread-out-months sampling option. A session contributes all of its
    queries and clicks if any of its queries is graph-relevant.
    Construction is order-insensitive: sessions are visited in a sorted
    order, so permuted input yields an identical graph.
    """
    month_set = set(months) if months is not None else None
    scoped = [
        e for e in events
        if (region is None or e.state == region)
        and (month_set is None or e.timestamp.strftime("%Y-%m") in month_set)
    ]
    g = QueryClickGraph(region=region or "all")
    for session in iter_sessions(scoped):
        if not any(is_graph_relevant(e.query, lex) for e in session):
            continue
        prev_q: int | None = None
        for e in session:
            q = g._intern(e.query, NODE_QUERY)
            if prev_q is not None and prev_q != q:
                g._add_edge(prev_q, q)
            prev_q = q
            for url in e.clicks:
                u = g._intern(url, NODE_URL)
                g._add_edge(q, u)
    return g


def collapse_to_coclick(g: QueryClickGraph, rule: str = "min") -> CoClickGraph:
    """Collapse a query-click graph onto its URLs.

    Every query with clicks on two URLs contributes to the pair's edge
    weight; the per-query contribution is min(w_i, w_j) under the default
    rule ("product" is available for sensitivity checks). Collapsing an
    already-collapsed graph is a type error.
    """
    if not isinstance(g, QueryClickGraph):
        raise TypeError(f"expected a QueryClickGraph, got {type(g).__name__}")
    if rule not in ("min", "product"):
        raise ValueError(f"unknown co-click rule: {rule}")
    co = CoClickGraph(region=g.region)
    for url in g.urls():
        co.url_index[url] = len(co.urls)
        co.urls.append(url)
    clicks_by_query: dict[int, list[tuple[int, int]]] = {}
    for (src, dst), w in g.edges.items():
        if g.node_kinds[dst] == NODE_URL:
            clicks_by_query.setdefault(src, []).append((dst, w))
    for src in sorted(clicks_by_query):
        pairs = sorted(clicks_by_query[src])
        for a in range(len(pairs)):
            ua, wa = pairs[a]
            ia = co.url_index[g.node_texts[ua]]
            for b in range(a + 1, len(pairs)):
                ub, wb = pairs[b]
                ib = co.url_index[g.node_texts[ub]]
                contrib = min(wa, wb) if rule == "min" else wa * wb
                key = (ia, ib) if ia < ib else (ib, ia)
                co.edges[key] = co.edges.get(key, 0) + contrib
    return co


def write_graph(g: QueryClickGraph | CoClickGraph, fh: IO[str]) -> None:
    """Versioned adjacency-list text format: node table then edge triples."""
    kind = "query_click" if isinstance(g, QueryClickGraph) else "coclick"
    fh.write(f"intentmine-graph v{GRAPH_FORMAT_VERSION} kind={kind} region={g.region}\n")
    if isinstance(g, QueryClickGraph):
        for idx, (text, k) in enumerate(zip(g.node_texts, g.node_kinds)):
            fh.write(f"N {idx} {k} {json.dumps(text)}\n")
    else:
        for idx, url in enumerate(g.urls):
            fh.write(f"N {idx} {NODE_URL} {json.dumps(url)}\n")
    for (src, dst), w in sorted(g.edges.items()):
        fh.write(f"E {src} {dst} {w}\n")


def read_graph(fh: IO[str]) -> QueryClickGraph | CoClickGraph:
    header = fh.readline().split()
    if len(header) < 4 or header[0] != "intentmine-graph":
        raise ValueError("not an intentmine graph file")
    if header[1] != f"v{GRAPH_FORMAT_VERSION}":
        raise ValueError(f"unsupported graph format version {header[1]}")
    kind = header[2].split("=", 1)[1]
    region = header[3].split("=", 1)[1]
    texts: list[str] = []
    kinds: list[int] = []
    edges: dict[tuple[int, int], float] = {}
    for line in fh:
        parts = line.rstrip("\n").split(" ", 3)
        if parts[0] == "N":
            idx, k, text = int(parts[1]), int(parts[2]), json.loads(parts[3])
            assert idx == len(texts)
            texts.append(text)
            kinds.append(k)
        elif parts[0] == "E":
            w = float(parts[3])
            edges[(int(parts[1]), int(parts[2]))] = int(w) if w == int(w) else w
    if kind == "query_click":
        g = QueryClickGraph(region=region, node_texts=texts, node_kinds=kinds)
        for idx, (text, k) in enumerate(zip(texts, kinds)):
            (g.query_index if k == NODE_QUERY else g.url_index)[text] = idx
        g.edges = {k2: int(v) for k2, v in edges.items()}
        return g
    co = CoClickGraph(region=region, urls=texts,
                      url_index={t: i for i, t in enumerate(texts)}, edges=edges)
    return co
