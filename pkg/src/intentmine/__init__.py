"""Intent mining from search-engine logs.

Pipeline stages: synthetic world generation (or real log ingest), per-region
query-click graphs, seed-query expansion via personalized PageRank,
annotation consensus, graph-neural expansion of the positive URL set,
coverage-corrected regional rate estimation, concern-ontology clustering,
and matched-cohort click statistics.
"""

__version__ = "0.1.0"
