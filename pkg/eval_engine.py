"""Query evaluation over a single feed: filters, cross-entry functions, shaping."""
import re
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from functools import lru_cache
from typing import Callable, List, Mapping, Optional, Sequence, Union

from atom_model import (
    FEEDSET_NS,
    AtomError,
    Entry,
    Extension,
    Feed,
    format_timestamp,
    parse_timestamp,
    representative_point,
    with_entries,
)
from geo import distance_matrix, haversine_km
from query_language import (
    And,
    CrossEntryFn,
    FilterExpr,
    Or,
    Predicate,
    Query,
    Selector,
    Shaping,
    SortKey,
)


class EvalError(ValueError):
    """Base class for evaluation errors."""


class CrossFeedFnHere(EvalError):
    """A cross-feed function reached the single-feed engine; route it through the aggregator."""


@dataclass(frozen=True)
class EvalContext:
    now: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    # When True, entries without geo fail geo predicates; otherwise they pass
    strict_geo: bool = True
    # Hidden collection fields keyed by entry id (only set for collection queries)
    hidden: Mapping[str, Mapping[str, str]] = field(default_factory=dict)


DEFAULT_CONTEXT = EvalContext()

FieldValue = Union[str, datetime]


@lru_cache(maxsize=1024)
def _wildcard(pattern: str):
    return re.compile(".*".join(re.escape(part) for part in pattern.split("*")), re.DOTALL)


def text_matches(pattern: str, value: str) -> bool:
    """Case-sensitive match where ``*`` stands for any run of characters."""
    if "*" not in pattern:
        return pattern == value
    return _wildcard(pattern).fullmatch(value) is not None


def field_values(selector: Selector, entry: Entry, ctx: EvalContext = DEFAULT_CONTEXT) -> List[FieldValue]:
    """All values a selector picks from an entry; empty when the field is absent."""
    ns, path = selector.namespace, selector.path
    if ns == "x":
        value = ctx.hidden.get(entry.id, {}).get(path)
        return [] if value is None else [value]
    if ns == "link":
        links = [link for link in entry.links if link.rel == selector.rel]
        values = [getattr(link, path) for link in links]
        return [v for v in values if v is not None]

    if path == "category":
        return [c.term for c in entry.categories]
    if path.startswith("author."):
        values = [getattr(person, path[7:]) for person in entry.authors]
        return [v for v in values if v is not None]
    if path == "content":
        if entry.content is None:
            return []
        text = entry.content.src if entry.content.src is not None else entry.content.text
        return [] if text is None else [text]

    value = getattr(entry, path)
    return [] if value is None else [value]


def _as_timestamp(value: FieldValue) -> Optional[datetime]:
    if isinstance(value, datetime):
        return value
    try:
        return parse_timestamp(value)
    except AtomError:
        return None


_RANGE_TESTS = {
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
}


def _matches_predicate(p: Predicate, entry: Entry, ctx: EvalContext) -> bool:
    if p.operator == "within":
        if entry.geo is None:
            return not ctx.strict_geo
        return p.value.contains(representative_point(entry.geo))

    values = field_values(p.selector, entry, ctx)
    if p.operator in _RANGE_TESTS:
        test = _RANGE_TESTS[p.operator]
        stamps = [_as_timestamp(v) for v in values]
        return any(s is not None and test(s, p.value) for s in stamps)

    if isinstance(p.value, datetime):
        found = any(_as_timestamp(v) == p.value for v in values)
    else:
        found = any(isinstance(v, str) and text_matches(p.value, v) for v in values)
    return found if p.operator == "eq" else not found


def match_entry(expr: FilterExpr, entry: Entry, ctx: EvalContext = DEFAULT_CONTEXT) -> bool:
    """
    Evaluate a filter against one entry.

    Multi-valued selectors match existentially; ``!=`` means no value
    matches. A missing field fails ==, range and within, and passes !=.
    """
    if isinstance(expr, And):
        return all(match_entry(child, entry, ctx) for child in expr.children)
    if isinstance(expr, Or):
        return any(match_entry(child, entry, ctx) for child in expr.children)
    return _matches_predicate(expr, entry, ctx)


def _keep(feed: Feed, mask: Sequence[bool]) -> Feed:
    if all(mask):
        return feed
    return with_entries(feed, (e for e, keep in zip(feed.entries, mask) if keep))


def filter_feed(expr: Optional[FilterExpr], feed: Feed, ctx: EvalContext = DEFAULT_CONTEXT) -> Feed:
    """Entries matching the filter, in their original order."""
    if expr is None:
        return feed
    return with_entries(feed, (e for e in feed.entries if match_entry(expr, e, ctx)))


_LATEST = datetime.max.replace(tzinfo=timezone.utc)


def _interval_end(start: datetime, duration_s: int) -> datetime:
    # Durations past the datetime range cover everything after start
    try:
        return start + timedelta(seconds=duration_s)
    except OverflowError:
        return _LATEST


def eval_window(duration_s: int, min_count: int, feed: Feed) -> Feed:
    """
    Keep entries that fall in some ``duration_s`` interval holding at least
    ``min_count`` entries (published time, falling back to updated).

    Only intervals starting at an entry timestamp need checking: any other
    qualifying interval can slide right onto its earliest member.
    """
    stamps = [e.timestamp for e in feed.entries]
    ordered = sorted(stamps)

    covered = []
    for start in sorted(set(ordered)):
        end = _interval_end(start, duration_s)
        first = bisect_left(ordered, start)
        last = bisect_right(ordered, end)
        if last - first >= min_count:
            covered.append((start, end))

    mask = [any(lo <= t <= hi for lo, hi in covered) for t in stamps]
    return _keep(feed, mask)


def eval_cluster(radius_km: float, min_count: int, feed: Feed) -> Feed:
    """Keep geo-tagged entries with at least ``min_count`` entries (self included) within ``radius_km``."""
    located = [i for i, e in enumerate(feed.entries) if e.geo is not None]
    points = [representative_point(feed.entries[i].geo) for i in located]

    counts = (distance_matrix(points) <= radius_km).sum(axis=1) if points else []
    kept = {i for i, count in zip(located, counts) if count >= min_count}
    return _keep(feed, [i in kept for i in range(len(feed.entries))])


def apply_function(fn: CrossEntryFn, feed: Feed) -> Feed:
    """Run one single-feed cross-entry function."""
    if fn.name == "window":
        return eval_window(fn.args[0], fn.args[1], feed)
    if fn.name == "cluster":
        return eval_cluster(fn.args[0], fn.args[1], feed)
    raise CrossFeedFnHere(f"{fn.name} joins feeds and needs the aggregator")


# --- Shaping -----------------------------------------------------------------

def group_key(selector: Selector, entry: Entry) -> Optional[str]:
    """Smallest serialized value of the grouping selector, or None when absent."""
    values = [
        format_timestamp(v) if isinstance(v, datetime) else v
        for v in field_values(selector, entry)
    ]
    return min(values) if values else None


def _sort_key_fn(key: SortKey) -> Callable[[Entry], object]:
    if key.name == "geo-distance":
        return lambda e: None if e.geo is None else haversine_km(key.point, representative_point(e.geo))
    return lambda e: getattr(e, key.name)


def _stable_sort(entries: List[Entry], key: Callable[[Entry], object], descending: bool) -> List[Entry]:
    """Sort on key with ties in prior order; entries whose key is None go last."""
    present = [e for e in entries if key(e) is not None]
    missing = [e for e in entries if key(e) is None]
    return sorted(present, key=key, reverse=descending) + missing


def _annotate_group(entry: Entry, value: str) -> Entry:
    kept = tuple(x for x in entry.extensions if not (x.namespace == FEEDSET_NS and x.name == "group"))
    return replace(entry, extensions=kept + (Extension(FEEDSET_NS, "group", value),))


def apply_shaping(shaping: Shaping, feed: Feed) -> Feed:
    """
    Sort, then group, then slice a feed.

    Group is the primary key: entries are sorted first, then stably ordered
    by group key (missing keys last), so the sort order holds within each
    group. Grouped entries get an fs:group tag. start_index is 1-based.
    """
    if shaping == Shaping():
        return feed
    entries = list(feed.entries)

    if shaping.sort_by is not None:
        entries = _stable_sort(entries, _sort_key_fn(shaping.sort_by), shaping.descending)

    if shaping.group_by is not None:
        keys = {id(e): group_key(shaping.group_by, e) for e in entries}
        entries = _stable_sort(entries, lambda e: keys[id(e)], descending=False)
        entries = [
            _annotate_group(e, keys[id(e)]) if keys[id(e)] is not None else e
            for e in entries
        ]

    start = (shaping.start_index or 1) - 1
    entries = entries[start:]
    if shaping.max_results is not None:
        entries = entries[:shaping.max_results]
    return with_entries(feed, entries)


def eval_query(query: Query, feed: Feed, ctx: EvalContext = DEFAULT_CONTEXT) -> Feed:
    """
    Evaluate a query against one feed.

    Filter first, then cross-entry functions left to right over the filtered
    set, then shaping.

    Raises:
        CrossFeedFnHere: the query contains cooccur
    """
    if query.uses("cooccur"):
        raise CrossFeedFnHere("cooccur joins feeds and needs the aggregator")

    result = filter_feed(query.filter, feed, ctx)
    for fn in query.cross_entry:
        result = apply_function(fn, result)
    return apply_shaping(query.shaping, result)
