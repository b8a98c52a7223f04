import random

import pytest

import oracle
from aggregator import (
    DuplicateOrigin,
    QueryPlan,
    Source,
    SourceUnavailable,
    UnknownOrigin,
    aggregate,
    cooccur_join,
    dedupe_entries,
    evaluate_feedset,
    execute_plan,
    feedset_id,
    plan_query,
)
from atom_model import with_entries
from discovery import Capabilities, SelectorCapability
from eval_engine import filter_feed
from feed_factory import (
    full_feed_capabilities,
    make_entry,
    make_feed,
    point,
    random_capabilities,
    random_feed,
    random_query,
    ts,
)
from query_language import parse_filter, parse_uri_params

A = "http://a.test/feeds/a"
B = "http://b.test/feeds/b"
C = "http://c.test/feeds/c"


class MemoryFetcher:
    """Serves source feeds from memory, evaluating pushed filters like a source would.

    Like a collection, a source holds one version per id, so duplicates are
    resolved before the pushed filter runs.
    """

    def __init__(self, feeds, dead=()):
        self.feeds = dict(feeds)
        self.dead = set(dead)
        self.transferred = 0
        self.filtered_out = 0
        self.requests = []

    def fetch(self, origin, params):
        self.requests.append((origin, list(params)))
        if origin in self.dead:
            raise SourceUnavailable(origin, "connection refused")
        feed = self.feeds[origin]
        feed = with_entries(feed, dedupe_entries(feed.entries))
        pushed = dict(params).get("q")
        if pushed:
            kept = filter_feed(parse_filter(pushed), feed)
            self.filtered_out += len(feed.entries) - len(kept.entries)
            feed = kept
        self.transferred += len(feed.entries)
        return feed


def two_sources():
    a = make_feed([make_entry("urn:x:1", categories=("java",)), make_entry("urn:x:2")], feed_id="urn:a")
    b = make_feed([make_entry("urn:x:1", categories=("jsp",))], feed_id="urn:b")
    return a, b


def test_aggregate_tags_origins_and_keeps_order():
    a, b = two_sources()
    fs = aggregate([(A, a), (B, b)])
    assert oracle.origin_ids(fs.feed.entries) == [(A, "urn:x:1"), (A, "urn:x:2"), (B, "urn:x:1")]
    assert fs.origins == (A, B)
    assert [(link.rel, link.href) for link in fs.feed.links] == [("via", A), ("via", B)]


def test_feedset_id_is_stable_under_source_order():
    a, b = two_sources()
    assert aggregate([(A, a), (B, b)]).feed.id == aggregate([(B, b), (A, a)]).feed.id
    assert feedset_id([A, B], "http://hub.test/feedsets").startswith("http://hub.test/feedsets/")


def test_duplicate_origin_rejected():
    a, _ = two_sources()
    with pytest.raises(DuplicateOrigin):
        aggregate([(A, a), (A, a)])


def test_dedupe_keeps_first_position_latest_version():
    old = make_entry("urn:x:1", title="old", updated=ts(hours=1))
    new = make_entry("urn:x:1", title="new", updated=ts(hours=2))
    other = make_entry("urn:x:2")
    assert [e.title for e in dedupe_entries([old, other, new])] == ["new", "Entry urn:x:2"]


def test_plan_pushes_supported_conjuncts():
    category_only = Capabilities(selectors=(SelectorCapability("category"),), operators=("eq",))
    q = parse_uri_params({"q": "category==java;title==x*", "max-results": "3"})
    plan = plan_query(q, [(A, category_only), (B, None), (C, full_feed_capabilities())])
    assert parse_filter(plan.per_source[A]) == parse_filter("category==java")
    assert plan.per_source[B] == ""
    assert parse_filter(plan.per_source[C]) == q.filter
    assert plan.residual == q
    assert plan.params_for(B) == []


def test_or_is_pushed_only_as_a_whole():
    category_only = Capabilities(selectors=(SelectorCapability("category"),), operators=("eq",))
    q = parse_uri_params({"q": "(category==a,title==b);(category==c,category==d)"})
    plan = plan_query(q, [(A, category_only)])
    assert parse_filter(plan.per_source[A]) == parse_filter("category==c,category==d")


def cooccur_feedset(b_hours=0.0):
    a = make_feed([
        make_entry("urn:a:near", geo=point(48.0, 11.0), published=ts()),
        make_entry("urn:a:far", geo=point(40.0, 11.0), published=ts()),
        make_entry("urn:a:none", published=ts()),
    ])
    # 0.05 degrees of latitude is about 5.56 km
    b = make_feed([make_entry("urn:b:1", geo=point(48.05, 11.0), published=ts(hours=b_hours))])
    return aggregate([(A, a), (B, b)])


def test_cooccur_joins_within_radius():
    fs = cooccur_feedset()
    assert oracle.ids(cooccur_join(fs, A, B, 10.0).entries) == ["urn:a:near"]
    assert cooccur_join(fs, A, B, 5.0).entries == ()


def test_cooccur_time_gate():
    fs = cooccur_feedset(b_hours=3)
    assert cooccur_join(fs, A, B, 10.0, 7200).entries == ()
    assert oracle.ids(cooccur_join(fs, A, B, 10.0, 4 * 3600).entries) == ["urn:a:near"]


def test_cooccur_unknown_origin():
    with pytest.raises(UnknownOrigin):
        cooccur_join(cooccur_feedset(), A, C, 10.0)


def test_functions_apply_left_to_right_over_joined_set():
    q = parse_uri_params({"xq": f"cooccur({A},{B},10),cluster(1,2)"})
    # Only one joined entry survives cooccur, so the cluster of two is empty
    assert evaluate_feedset(q, cooccur_feedset()).entries == ()


def test_unavailable_source_fails_whole_query():
    a, b = two_sources()
    plan = plan_query(parse_uri_params([]), [(A, None), (B, None)])
    with pytest.raises(SourceUnavailable) as excinfo:
        execute_plan(plan, MemoryFetcher({A: a, B: b}, dead={B}))
    assert excinfo.value.origin == B


def test_partial_mode_skips_dead_sources(capsys):
    a, b = two_sources()
    plan = plan_query(parse_uri_params([]), [(A, None), (B, None)])
    result = execute_plan(plan, MemoryFetcher({A: a, B: b}, dead={B}), partial=True)
    assert {e.origin for e in result.entries} == {A}
    assert B in capsys.readouterr().err


def test_partial_cooccur_with_missing_side_is_empty():
    fs = cooccur_feedset()
    fetcher = MemoryFetcher({A: fs.feed}, dead={B})
    plan = plan_query(parse_uri_params({"xq": f"cooccur({A},{B},10)"}), [(A, None), (B, None)])
    assert execute_plan(plan, fetcher, partial=True).entries == ()


def test_pushdown_matches_naive_evaluation():
    rng = random.Random(1234)
    for case in range(300):
        origins = (A, B, C, "http://d.test/feeds/d")[:rng.randint(2, 4)]
        feeds = {origin: random_feed(rng, max_entries=30, duplicate_rate=0.1) for origin in origins}
        query = random_query(rng, origins)
        caps = [(origin, random_capabilities(rng) if rng.random() < 0.8 else None) for origin in origins]

        pushed = MemoryFetcher(feeds)
        result = execute_plan(plan_query(query, caps), pushed, max_workers=1)

        naive = MemoryFetcher(feeds)
        everything = execute_plan(plan_query(query, [(o, None) for o in origins]), naive, max_workers=1)

        joined = aggregate([(origin, feeds[origin]) for origin in origins])
        expected = oracle.origin_ids(oracle.evaluate(query, list(joined.feed.entries)))
        assert oracle.origin_ids(result.entries) == expected, f"case {case}: {query}"
        assert oracle.origin_ids(everything.entries) == expected, f"case {case}: {query}"
        if pushed.filtered_out:
            assert pushed.transferred < naive.transferred, f"case {case}: {query}"
        else:
            assert pushed.transferred == naive.transferred, f"case {case}: {query}"


def test_pushdown_sees_latest_version_of_duplicated_id():
    old = make_entry("urn:x", updated=ts(hours=1), categories=("java",))
    new = make_entry("urn:x", updated=ts(hours=2), categories=("jsp",))
    feeds = {A: make_feed([old, new])}
    query = parse_uri_params({"q": "category==java"})
    plan = plan_query(query, [(A, full_feed_capabilities())])
    assert plan.per_source[A] == "category==java"
    assert execute_plan(plan, MemoryFetcher(feeds)).entries == ()
    assert execute_plan(plan_query(query, [(A, None)]), MemoryFetcher(feeds)).entries == ()


def test_concurrent_fetch_keeps_source_order():
    feeds = {origin: make_feed([make_entry(f"{origin}#1")]) for origin in (A, B, C)}
    plan = QueryPlan(sources=tuple(Source(o) for o in (A, B, C)))
    result = execute_plan(plan, MemoryFetcher(feeds), max_workers=3)
    assert [e.origin for e in result.entries] == [A, B, C]
