import random

import pytest

from discovery import Capabilities, SelectorCapability, full_capabilities
from feed_factory import random_query, ts
from geo import Box, Radius
from query_language import (
    GEO_POSITION,
    And,
    BadParam,
    CrossEntryFn,
    Or,
    Predicate,
    QueryError,
    QuerySyntaxError,
    Selector,
    SortKey,
    TypeMismatch,
    UnknownOperator,
    UnknownSelector,
    Unsupported,
    canonical_query,
    filter_to_text,
    parse_filter,
    parse_query_string,
    parse_uri_params,
    serialize_query,
    validate_against_capabilities,
)

CATEGORY = Selector("atom", "category")


def test_conjunction_and_negation():
    assert parse_filter("category==java;category!=jsp") == And((
        Predicate(CATEGORY, "eq", "java"),
        Predicate(CATEGORY, "ne", "jsp"),
    ))


def test_and_binds_tighter_than_or():
    expr = parse_filter("category==a,category==b;category==c")
    assert expr == Or((
        Predicate(CATEGORY, "eq", "a"),
        And((Predicate(CATEGORY, "eq", "b"), Predicate(CATEGORY, "eq", "c"))),
    ))


def test_grouping():
    expr = parse_filter("(category==a,category==b);category==c")
    assert isinstance(expr, And)
    assert isinstance(expr.children[0], Or)


def test_geo_region_values():
    assert parse_filter("geo:position=within=box(40,-75,41,-73)") == Predicate(
        GEO_POSITION, "within", Box(40.0, -75.0, 41.0, -73.0))
    assert parse_filter("geo:position=within=radius(48.1,11.5,10)").value == Radius(48.1, 11.5, 10.0)


def test_timestamp_comparison():
    expr = parse_filter("updated=gt=2024-03-01T12:00:00Z")
    assert expr == Predicate(Selector("atom", "updated"), "gt", ts())


def test_link_and_prefixed_selectors():
    expr = parse_filter("link(license).href==http://creativecommons.org/*;atom:title==Maps")
    assert expr.children[0] == Predicate(Selector("link", "href", "license"), "eq", "http://creativecommons.org/*")
    assert expr.children[1].selector == Selector("atom", "title")


def test_quoted_values_keep_reserved_characters():
    expr = parse_filter('title=="a;b,(c)"')
    assert expr.value == "a;b,(c)"
    assert parse_filter(filter_to_text(expr)) == expr


def test_syntax_error_carries_position():
    with pytest.raises(QuerySyntaxError) as excinfo:
        parse_filter("category==java;")
    assert excinfo.value.position == 15
    assert "selector" in excinfo.value.expected


def test_unknown_selector_and_operator():
    with pytest.raises(UnknownSelector) as excinfo:
        parse_filter("colour==red")
    assert excinfo.value.position == 0
    with pytest.raises(UnknownOperator):
        parse_filter("category=like=java")


def test_type_mismatches():
    with pytest.raises(TypeMismatch):
        parse_filter("category=gt=java")
    with pytest.raises(TypeMismatch):
        parse_filter("updated==tomorrow")
    with pytest.raises(TypeMismatch):
        parse_filter("title=within=box(0,0,1,1)")
    with pytest.raises(TypeMismatch):
        parse_filter("geo:position=within=radius(0,0,0)")


def test_uri_params_build_query():
    query = parse_uri_params(parse_query_string(
        "q=category%3D%3Djava&xq=window(3600,4)&sort-by=title&max-results=5&unknown=1"))
    assert query.filter == Predicate(CATEGORY, "eq", "java")
    assert query.cross_entry == (CrossEntryFn("window", (3600, 4)),)
    assert query.shaping.sort_by == SortKey("title")
    assert query.shaping.max_results == 5
    assert not query.shaping.descending


def test_timestamp_sort_defaults_to_descending():
    assert parse_uri_params({"sort-by": "updated"}).shaping.descending
    assert not parse_uri_params({"sort-by": "updated", "order": "asc"}).shaping.descending


def test_bad_params():
    with pytest.raises(BadParam):
        parse_uri_params([("q", "category==a"), ("q", "category==b")])
    with pytest.raises(BadParam):
        parse_uri_params({"max-results": "0"})
    with pytest.raises(BadParam):
        parse_uri_params({"xq": "window(3600)"})
    with pytest.raises(BadParam):
        parse_uri_params({"group-by": "x:camera"})


def test_cooccur_arguments():
    query = parse_uri_params({"xq": "cooccur(http://a.test/feeds/a,http://b.test/feeds/b,10,3600)"})
    assert query.cross_entry[0].args == ("http://a.test/feeds/a", "http://b.test/feeds/b", 10.0, 3600)


def test_identity():
    assert parse_uri_params([]).is_identity
    assert serialize_query(parse_uri_params([])) == []


def test_canonical_order():
    a = parse_uri_params({"q": "category==b;category==a"})
    b = parse_uri_params({"q": "category==a;category==b"})
    assert serialize_query(a) == serialize_query(b) == [("q", "category==a;category==b")]


def test_generated_queries_round_trip():
    rng = random.Random(7)
    origins = ("http://a.test/feeds/a", "http://b.test/feeds/b")
    for _ in range(500):
        query = random_query(rng, origins)
        back = parse_uri_params(serialize_query(query))
        assert canonical_query(back) == canonical_query(query)


def test_validate_lists_unsupported_features():
    caps = Capabilities(
        selectors=(SelectorCapability("category"),),
        operators=("eq",),
        shaping=("max-results",),
    )
    query = parse_uri_params({"q": "category==java;title!=x", "sort-by": "title", "max-results": "3"})
    assert validate_against_capabilities(query, caps) == [
        Unsupported("selector", "title"),
        Unsupported("operator", "ne"),
        Unsupported("shaping", "sort-by"),
    ]


def test_hidden_selectors_need_collection_scope():
    query = parse_uri_params({"q": "x:camera-model==Canon*"})
    feed_scope = Capabilities(selectors=(SelectorCapability("x:camera-model", "feed"),), operators=("eq",))
    collection_scope = Capabilities(selectors=(SelectorCapability("x:camera-model", "collection"),),
                                    operators=("eq",))
    assert validate_against_capabilities(query, feed_scope) == [Unsupported("selector", "x:camera-model")]
    assert validate_against_capabilities(query, collection_scope) == []


def test_full_capabilities_accept_everything():
    rng = random.Random(11)
    caps = full_capabilities()
    for _ in range(200):
        assert validate_against_capabilities(random_query(rng, ("http://a", "http://b")), caps) == []


FUZZ_TOKENS = [
    "category", "title", "updated", "published", "author.name", "geo:position", "x:camera", "link(",
    "link(license).href", "==", "!=", "=ge=", "=lt=", "=within=", "=nope=", ";", ",", "(", ")", "'", '"',
    "\\", "*", "java", "radius(", "box(", "1e400", "nan", "-91", "0", "99999999999999999999",
    "0001-01-01T00:00:00+01:00", "9999-12-31T23:59:59-01:00", "2024-13-40T25:61:61Z", "²", " ",
]


def mutate(rng, text):
    chars = list(text)
    for _ in range(rng.randint(1, 4)):
        op = rng.random()
        pos = rng.randint(0, len(chars))
        if op < 0.4 and chars:
            del chars[min(pos, len(chars) - 1)]
        elif op < 0.8:
            chars[pos:pos] = rng.choice(FUZZ_TOKENS)
        else:
            chars[pos:pos] = chars[pos:pos + rng.randint(1, 8)]
    return "".join(chars)


def only_query_errors(call, *args):
    try:
        call(*args)
    except QueryError:
        pass


def test_parsers_only_raise_query_errors():
    rng = random.Random(2024)
    origins = ("http://a.test/feeds/a", "http://b.test/feeds/b")
    for _ in range(2000):
        if rng.random() < 0.5:
            text = "".join(rng.choice(FUZZ_TOKENS) for _ in range(rng.randint(0, 12)))
            only_query_errors(parse_filter, text)
            only_query_errors(parse_uri_params, {"q": text, "xq": text})
            continue
        params = serialize_query(random_query(rng, origins)) or [("q", "category==java")]
        name, value = rng.choice(params)
        broken = [(n, mutate(rng, v) if n == name else v) for n, v in params]
        only_query_errors(parse_uri_params, broken)
        only_query_errors(parse_filter, mutate(rng, value))
        for param in ("sort-by", "group-by", "max-results", "start-index", "order"):
            only_query_errors(parse_uri_params, {param: mutate(rng, value)})
