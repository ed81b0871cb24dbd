"""Search-log event model, line-delimited ingest, and region tables.

Events are stored one JSON record per line with fields ``user_id``, ``ts``
(ISO-8601 date-time), ``zcta``, ``county``, ``state``, ``session``,
``query``, ``clicks``. Geo fields may be null or absent. Ingest normalizes
queries (lower-case, strip), drops implausibly long queries and non-URL
clicks, and counts everything it skips.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date, datetime
from typing import IO, Iterable, Iterator

MAX_QUERY_CHARS = 100


class IngestError(Exception):
    """Input could not be read at all (as opposed to skippable bad records)."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class LogEvent:
    user_id: str
    timestamp: datetime
    query: str
    clicks: list[str]
    session_id: str
    zcta: str | None = None
    county: str | None = None
    state: str | None = None

    @property
    def day(self) -> date:
        return self.timestamp.date()

    def region(self, granularity: str) -> str | None:
        if granularity == "zcta":
            return self.zcta
        if granularity == "county":
            return self.county
        if granularity == "state":
            return self.state
        raise ValueError(f"unknown granularity: {granularity}")


@dataclass
class Region:
    region_id: str
    population: int
    county: str | None = None
    state: str | None = None
    demographics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.population < 0:
            raise ValueError(f"region {self.region_id}: negative population")


@dataclass
class IngestResult:
    events: list[LogEvent]
    skipped_malformed: int = 0
    skipped_long_query: int = 0
    skipped_empty_query: int = 0
    dropped_clicks: int = 0

    @property
    def skipped_total(self) -> int:
        return self.skipped_malformed + self.skipped_long_query + self.skipped_empty_query

    def stats(self) -> dict[str, int]:
        return {
            "events": len(self.events),
            "skipped_malformed": self.skipped_malformed,
            "skipped_long_query": self.skipped_long_query,
            "skipped_empty_query": self.skipped_empty_query,
            "dropped_clicks": self.dropped_clicks,
        }


def _parse_record(rec: dict) -> tuple[LogEvent | None, str, int]:
    """Returns (event, reason, dropped_clicks); event is None when skipped."""
    query = rec["query"]
    if not isinstance(query, str):
        return None, "malformed", 0
    query = query.strip().lower()
    if not query:
        return None, "empty", 0
    if len(query) > MAX_QUERY_CHARS:
        return None, "long", 0
    raw_clicks = rec.get("clicks") or []
    if not isinstance(raw_clicks, list):
        return None, "malformed", 0
    clicks = [c for c in raw_clicks if isinstance(c, str) and c.startswith("http")]
    dropped = len(raw_clicks) - len(clicks)
    event = LogEvent(
        user_id=str(rec["user_id"]),
        timestamp=datetime.fromisoformat(rec["ts"]),
        query=query,
        clicks=clicks,
        session_id=str(rec["session"]),
        zcta=rec.get("zcta") or None,
        county=rec.get("county") or None,
        state=rec.get("state") or None,
    )
    return event, "", dropped


def ingest_events(lines: Iterable[str]) -> IngestResult:
    """Parse record-per-line events, normalizing and counting skips.

    Raises IngestError (with the line number) if the input stream itself
    cannot be read; individually malformed records are counted and skipped.
    """
    result = IngestResult(events=[])
    line_no = 0
    it = iter(lines)
    while True:
        line_no += 1
        try:
            line = next(it)
        except StopIteration:
            break
        except (UnicodeDecodeError, OSError) as exc:
            raise IngestError(str(exc), line_no) from exc
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            event, reason, dropped = _parse_record(rec)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            result.skipped_malformed += 1
            continue
        result.dropped_clicks += dropped
        if event is None:
            if reason == "long":
                result.skipped_long_query += 1
            elif reason == "empty":
                result.skipped_empty_query += 1
            else:
                result.skipped_malformed += 1
            continue
        result.events.append(event)
    return result


def event_to_record(e: LogEvent) -> dict:
    return {
        "user_id": e.user_id,
        "ts": e.timestamp.isoformat(),
        "zcta": e.zcta,
        "county": e.county,
        "state": e.state,
        "session": e.session_id,
        "query": e.query,
        "clicks": e.clicks,
    }


def write_events(events: Iterable[LogEvent], fh: IO[str]) -> None:
    for e in events:
        fh.write(json.dumps(event_to_record(e), sort_keys=True))
        fh.write("\n")


def load_events(path) -> IngestResult:
    with open(path, encoding="utf-8") as fh:
        return ingest_events(fh)


def iter_sessions(events: list[LogEvent]) -> Iterator[list[LogEvent]]:
    """Group events by (user, session), ordered within a session by time.

    Input order does not matter; grouping sorts on stable keys so that any
    permutation of the same events yields the same session sequences.
    """
    keyed = sorted(events, key=lambda e: (e.user_id, e.session_id, e.timestamp, e.query))
    session: list[LogEvent] = []
    for e in keyed:
        if session and (e.user_id != session[0].user_id or e.session_id != session[0].session_id):
            yield session
            session = []
        session.append(e)
    if session:
        yield session


_RESERVED_COLS = ("region_id", "county", "state", "population")


def load_region_table(path) -> dict[str, Region]:
    """Region CSV: region_id[,county,state],population,<demographic columns>."""
    regions: dict[str, Region] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "region_id" not in reader.fieldnames:
            raise ValueError(f"{path}: missing region_id column")
        demo_cols = [c for c in reader.fieldnames if c not in _RESERVED_COLS]
        for row in reader:
            r = Region(
                region_id=row["region_id"],
                population=int(row["population"]),
                county=row.get("county") or None,
                state=row.get("state") or None,
                demographics={c: float(row[c]) for c in demo_cols if row.get(c) not in (None, "")},
            )
            regions[r.region_id] = r
    return regions


def write_region_table(regions: Iterable[Region], fh: IO[str]) -> None:
    regions = list(regions)
    demo_cols = sorted({k for r in regions for k in r.demographics})
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(list(_RESERVED_COLS) + demo_cols)
    for r in regions:
        writer.writerow(
            [r.region_id, r.county or "", r.state or "", r.population]
            + [r.demographics.get(c, "") for c in demo_cols]
        )
