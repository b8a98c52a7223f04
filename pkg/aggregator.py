"""
Feedsets: aggregation of source feeds with origin annotations, query pushdown
planning against source capabilities, plan execution and cross-feed joins.
"""
import hashlib
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

from atom_model import EPOCH, Entry, Feed, Link, latest_update, representative_point, with_entries
from discovery import Capabilities
from eval_engine import DEFAULT_CONTEXT, EvalContext, apply_function, apply_shaping, filter_feed
from geo import haversine_km
from query_language import (
    CrossEntryFn,
    Query,
    conjoin,
    conjuncts,
    filter_supported,
    filter_to_text,
)

DEFAULT_FEEDSET_BASE = "urn:feedql:feedset"


class AggregationError(RuntimeError):
    """Base class for feedset errors."""


class DuplicateOrigin(AggregationError):
    pass


class UnknownOrigin(AggregationError):
    pass


class SourceUnavailable(AggregationError):
    """A source could not be fetched; the whole feedset query fails."""

    def __init__(self, origin: str, reason: str = ""):
        super().__init__(f"source unavailable: {origin}" + (f" ({reason})" if reason else ""))
        self.origin = origin
        self.reason = reason


@dataclass(frozen=True)
class Source:
    origin: str
    # None when the source advertises no query capabilities
    capabilities: Optional[Capabilities] = None


@dataclass(frozen=True)
class Feedset:
    feed: Feed
    sources: Tuple[Source, ...] = ()

    @property
    def origins(self) -> Tuple[str, ...]:
        return tuple(s.origin for s in self.sources)


@dataclass(frozen=True)
class QueryPlan:
    # origin -> pushed filter text ("" means a plain fetch)
    per_source: Dict[str, str] = field(default_factory=dict)
    residual: Query = field(default_factory=Query)
    sources: Tuple[Source, ...] = ()

    def params_for(self, origin: str) -> List[Tuple[str, str]]:
        pushed = self.per_source.get(origin, "")
        return [("q", pushed)] if pushed else []


class Fetcher(Protocol):
    def fetch(self, origin: str, params: List[Tuple[str, str]]) -> Feed:
        """Return the source feed for the given query params or raise SourceUnavailable."""


def feedset_id(origins: Sequence[str], base_uri: str = DEFAULT_FEEDSET_BASE) -> str:
    """Stable feedset id: base URI plus a hash of the sorted origins."""
    digest = hashlib.sha256("\n".join(sorted(origins)).encode("utf-8")).hexdigest()[:16]
    return f"{base_uri.rstrip('/')}/{digest}"


def dedupe_entries(entries: Sequence[Entry]) -> List[Entry]:
    """Keep one entry per id at its first position, choosing the latest updated version."""
    positions: Dict[str, int] = {}
    kept: List[Entry] = []
    for entry in entries:
        if entry.id not in positions:
            positions[entry.id] = len(kept)
            kept.append(entry)
        elif entry.updated > kept[positions[entry.id]].updated:
            kept[positions[entry.id]] = entry
    return kept


def aggregate(sources: Sequence[Tuple[str, Feed]], base_uri: str = DEFAULT_FEEDSET_BASE,
              title: Optional[str] = None) -> Feedset:
    """
    Merge source feeds into a feedset, tagging every entry with its origin.

    Args:
        sources: (origin URI, Feed) pairs; output keeps this order
        base_uri: Prefix for the minted feedset id
        title: Feedset title (defaults to a summary of the sources)

    Raises:
        DuplicateOrigin: an origin appears twice
    """
    seen = set()
    entries: List[Entry] = []
    for origin, feed in sources:
        if origin in seen:
            raise DuplicateOrigin(f"origin listed twice: {origin}")
        seen.add(origin)
        entries += [replace(e, origin=origin) for e in dedupe_entries(feed.entries)]

    origins = [origin for origin, _ in sources]
    feed = Feed(
        id=feedset_id(origins, base_uri),
        title=title or f"Feedset of {len(origins)} sources",
        updated=latest_update(entries, EPOCH),
        links=tuple(Link(origin, "via") for origin in origins),
        entries=tuple(entries),
    )
    return Feedset(feed=feed, sources=tuple(Source(origin) for origin in origins))


def plan_query(q: Query, sources: Sequence[Tuple[str, Optional[Capabilities]]]) -> QueryPlan:
    """
    Decide which top-level filter conjuncts each source evaluates.

    A conjunct goes to a source when every selector and operator in it is
    advertised there (an Or only as a whole). Cross-entry and cross-feed
    functions and shaping never leave the intermediary; the residual keeps
    the full query.

    A source that takes a pushed filter must hold one version per id (the
    latest updated) before filtering, as collections do. Otherwise an older
    version could pass the filter where the newer one fails, and the result
    would differ from fetching the source whole.
    """
    parts = conjuncts(q.filter)
    per_source = {}
    for origin, caps in sources:
        pushed = [] if caps is None else [c for c in parts if filter_supported(c, caps)]
        expr = conjoin(pushed)
        per_source[origin] = filter_to_text(expr) if expr is not None else ""
    return QueryPlan(
        per_source=per_source,
        residual=q,
        sources=tuple(Source(origin, caps) for origin, caps in sources),
    )


def cooccur_join(fs: Feedset, origin_a: str, origin_b: str, radius_km: float,
                 duration_s: Optional[int] = None) -> Feed:
    """
    Entries from origin_a that have an origin_b entry within radius_km (and,
    when duration_s is given, within duration_s seconds). Order is kept;
    entries without geo never match.

    Raises:
        UnknownOrigin: either origin is not a source of the feedset
    """
    for origin in (origin_a, origin_b):
        if origin not in fs.origins:
            raise UnknownOrigin(f"not a source of this feedset: {origin}")

    partners = [
        (representative_point(e.geo), e.timestamp)
        for e in fs.feed.entries if e.origin == origin_b and e.geo is not None
    ]

    def joins(entry: Entry) -> bool:
        if entry.origin != origin_a or entry.geo is None:
            return False
        point = representative_point(entry.geo)
        for other, when in partners:
            if duration_s is not None and abs((entry.timestamp - when).total_seconds()) > duration_s:
                continue
            if haversine_km(point, other) <= radius_km:
                return True
        return False

    return with_entries(fs.feed, (e for e in fs.feed.entries if joins(e)))


def _apply_cross(fn: CrossEntryFn, fs: Feedset, current: Feed) -> Feed:
    if fn.name == "cooccur":
        origin_a, origin_b, radius_km = fn.args[:3]
        duration_s = fn.args[3] if len(fn.args) == 4 else None
        return cooccur_join(replace(fs, feed=current), origin_a, origin_b, radius_km, duration_s)
    return apply_function(fn, current)


def evaluate_feedset(q: Query, fs: Feedset, ctx: EvalContext = DEFAULT_CONTEXT) -> Feed:
    """Filter, then cross-entry/cross-feed functions left to right, then shaping."""
    result = filter_feed(q.filter, fs.feed, ctx)
    for fn in q.cross_entry:
        result = _apply_cross(fn, fs, result)
    return apply_shaping(q.shaping, result)


def execute_plan(plan: QueryPlan, fetcher: Fetcher, ctx: EvalContext = DEFAULT_CONTEXT,
                 partial: bool = False, max_workers: int = 4,
                 base_uri: str = DEFAULT_FEEDSET_BASE) -> Feed:
    """
    Fetch every source with its pushed filter, aggregate and evaluate the residual.

    Args:
        plan: Output of plan_query
        fetcher: Source transport
        partial: Skip unavailable sources with a warning instead of failing
        max_workers: Concurrent fetches (1 fetches inline)

    Raises:
        SourceUnavailable: a fetch failed and partial is off
    """
    origins = [s.origin for s in plan.sources]

    def fetch(origin: str):
        try:
            return fetcher.fetch(origin, plan.params_for(origin))
        except SourceUnavailable as e:
            if not partial:
                raise
            print(f"⚠️  Skipping {origin}: {e} (partial result)", file=sys.stderr)
            return None

    if max_workers <= 1 or len(origins) <= 1:
        feeds = [fetch(origin) for origin in origins]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            feeds = list(pool.map(fetch, origins))

    live = [(origin, feed) for origin, feed in zip(origins, feeds) if feed is not None]
    feedset = replace(aggregate(live, base_uri), sources=plan.sources)
    return evaluate_feedset(plan.residual, feedset, ctx)
