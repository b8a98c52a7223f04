"""Feed query language.

A query is an entry-scoped FIQL-style filter (``q``), an ordered list of
cross-entry functions (``xq``) and result shaping parameters. Parameter
values arrive URI-decoded; ``parse_query_string`` does the decoding for
raw query strings.
"""
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import TYPE_CHECKING, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from urllib.parse import parse_qsl

from atom_model import AtomError, format_timestamp, parse_timestamp
from geo import Box, LatLon, Radius, check_lat_lon, format_number

if TYPE_CHECKING:
    from discovery import Capabilities

OPERATORS = {
    "==": "eq",
    "!=": "ne",
    "=lt=": "lt",
    "=le=": "le",
    "=gt=": "gt",
    "=ge=": "ge",
    "=within=": "within",
}
OPERATOR_SYMBOLS = {name: symbol for symbol, name in OPERATORS.items()}
RANGE_OPERATORS = ("lt", "le", "gt", "ge")

ATOM_SELECTORS = (
    "id", "title", "summary", "content", "updated", "published",
    "category", "author.name", "author.email", "author.uri",
)
TIMESTAMP_SELECTORS = ("updated", "published")
LINK_FIELDS = ("href", "type")

FUNCTION_ARITIES = {"window": (2,), "cluster": (2,), "cooccur": (3, 4)}
SORT_KEYS = ("updated", "published", "title", "geo-distance")
SHAPING_PARAMS = ("sort-by", "order", "group-by", "max-results", "start-index")
QUERY_PARAMS = ("q", "xq") + SHAPING_PARAMS

_NAME_CHARS = re.compile(r"[A-Za-z0-9_.:\-]*")
_REGION = re.compile(r"(radius|box)\([^)]*\)")
_RESERVED = set(';,()"\'\\')
MAX_DEPTH = 64


class QueryError(ValueError):
    """Base class for query parsing errors."""


class QuerySyntaxError(QueryError):
    def __init__(self, message: str, position: int, expected: Sequence[str] = ()):
        detail = f"{message} at position {position}"
        if expected:
            detail += f" (expected {', '.join(expected)})"
        super().__init__(detail)
        self.position = position
        self.expected = list(expected)


class UnknownSelector(QuerySyntaxError):
    pass


class UnknownOperator(QuerySyntaxError):
    pass


class TypeMismatch(QueryError):
    """Operator or value type does not fit the selector."""


class BadParam(QueryError):
    def __init__(self, param: str, message: str):
        super().__init__(f"{param}: {message}")
        self.param = param


# --- Query model -------------------------------------------------------------

@dataclass(frozen=True)
class Selector:
    namespace: str  # atom | geo | link | x
    path: str
    rel: Optional[str] = None

    @property
    def scope(self) -> str:
        return "collection" if self.namespace == "x" else "feed"

    @property
    def is_timestamp(self) -> bool:
        return self.namespace == "atom" and self.path in TIMESTAMP_SELECTORS

    def __str__(self):
        if self.namespace == "atom":
            return self.path
        if self.namespace == "link":
            return f"link({self.rel}).{self.path}"
        return f"{self.namespace}:{self.path}"


GEO_POSITION = Selector("geo", "position")

Region = Union[Radius, Box]
Value = Union[str, datetime, Region]


@dataclass(frozen=True)
class Predicate:
    selector: Selector
    operator: str
    value: Value


@dataclass(frozen=True)
class And:
    children: Tuple["FilterExpr", ...]


@dataclass(frozen=True)
class Or:
    children: Tuple["FilterExpr", ...]


FilterExpr = Union[Predicate, And, Or]


@dataclass(frozen=True)
class CrossEntryFn:
    name: str
    args: Tuple[Union[int, float, str], ...]

    @property
    def signature(self) -> str:
        return f"{self.name}/{len(self.args)}"


@dataclass(frozen=True)
class SortKey:
    name: str
    point: Optional[LatLon] = None

    @property
    def is_timestamp(self) -> bool:
        return self.name in TIMESTAMP_SELECTORS

    def __str__(self):
        if self.name == "geo-distance":
            lat, lon = self.point
            return f"geo-distance({format_number(lat)},{format_number(lon)})"
        return self.name


@dataclass(frozen=True)
class Shaping:
    sort_by: Optional[SortKey] = None
    order: Optional[str] = None
    group_by: Optional[Selector] = None
    max_results: Optional[int] = None
    start_index: Optional[int] = None

    @property
    def descending(self) -> bool:
        if self.order is not None:
            return self.order == "desc"
        return self.sort_by is not None and self.sort_by.is_timestamp


@dataclass(frozen=True)
class Query:
    filter: Optional[FilterExpr] = None
    cross_entry: Tuple[CrossEntryFn, ...] = ()
    shaping: Shaping = field(default_factory=Shaping)

    @property
    def is_identity(self) -> bool:
        return self.filter is None and not self.cross_entry and self.shaping == Shaping()

    def uses(self, function_name: str) -> bool:
        return any(fn.name == function_name for fn in self.cross_entry)


IDENTITY = Query()


def conjoin(children: Iterable[FilterExpr]) -> Optional[FilterExpr]:
    """Build an And, flattening nested Ands; one child is returned as-is."""
    flat = []
    for child in children:
        flat.extend(child.children if isinstance(child, And) else (child,))
    if not flat:
        return None
    return flat[0] if len(flat) == 1 else And(tuple(flat))


def disjoin(children: Iterable[FilterExpr]) -> Optional[FilterExpr]:
    flat = []
    for child in children:
        flat.extend(child.children if isinstance(child, Or) else (child,))
    if not flat:
        return None
    return flat[0] if len(flat) == 1 else Or(tuple(flat))


def predicates(expr: Optional[FilterExpr]) -> List[Predicate]:
    """All predicates of a filter tree, left to right."""
    if expr is None:
        return []
    if isinstance(expr, Predicate):
        return [expr]
    return [p for child in expr.children for p in predicates(child)]


def conjuncts(expr: Optional[FilterExpr]) -> List[FilterExpr]:
    """Top-level conjuncts of a filter."""
    if expr is None:
        return []
    if isinstance(expr, And):
        return list(expr.children)
    return [expr]


# --- Filter parser -----------------------------------------------------------

def parse_selector(text: str) -> Selector:
    """Parse a standalone selector such as ``author.name`` or ``link(license).href``."""
    parser = _FilterParser(text)
    selector = parser.selector()
    if parser.pos != len(text):
        raise QuerySyntaxError("unexpected text after selector", parser.pos)
    return selector


class _FilterParser:
    """Recursive-descent parser over decoded filter text."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.depth = 0

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def error(self, message: str, expected: Sequence[str] = ()) -> QuerySyntaxError:
        return QuerySyntaxError(message, self.pos, expected)

    def parse(self) -> FilterExpr:
        if not self.text:
            raise self.error("empty filter", ["selector"])
        expr = self.expr()
        if self.pos != len(self.text):
            raise self.error(f"unexpected {self.peek()!r}", [";", ",", "end of input"])
        return expr

    def expr(self) -> FilterExpr:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise self.error("filter nested too deeply")
        branches = [self.conjunction()]
        while self.peek() == ",":
            self.pos += 1
            branches.append(self.conjunction())
        self.depth -= 1
        return disjoin(branches)

    def conjunction(self) -> FilterExpr:
        parts = [self.primary()]
        while self.peek() == ";":
            self.pos += 1
            parts.append(self.primary())
        return conjoin(parts)

    def primary(self) -> FilterExpr:
        if self.peek() == "(":
            self.pos += 1
            inner = self.expr()
            if self.peek() != ")":
                raise self.error("unclosed group", [")"])
            self.pos += 1
            return inner
        return self.predicate()

    def selector(self) -> Selector:
        start = self.pos
        if self.text.startswith("link(", self.pos):
            close = self.text.find(")", self.pos + 5)
            if close < 0:
                raise self.error("unclosed link relation", [")"])
            rel = self.text[self.pos + 5:close]
            if not rel:
                raise self.error("empty link relation", ["relation"])
            self.pos = close + 1
            for name in LINK_FIELDS:
                if self.text.startswith("." + name, self.pos):
                    self.pos += len(name) + 1
                    return Selector("link", name, rel)
            raise self.error("link selector needs a field", [".href", ".type"])

        name = _NAME_CHARS.match(self.text, self.pos).group(0)
        if not name:
            raise self.error("expected a selector", ["selector", "("])
        self.pos += len(name)

        if name.startswith("atom:"):
            name = name[5:]
        if name in ATOM_SELECTORS:
            return Selector("atom", name)
        if name == "geo:position":
            return GEO_POSITION
        if name.startswith("x:") and len(name) > 2:
            return Selector("x", name[2:])
        raise UnknownSelector(f"unknown selector {name!r}", start, ["atom selector", "geo:position", "link(rel).href", "x:field"])

    def operator(self) -> str:
        start = self.pos
        for symbol in ("==", "!="):
            if self.text.startswith(symbol, self.pos):
                self.pos += 2
                return OPERATORS[symbol]
        if self.peek() == "=":
            close = self.text.find("=", self.pos + 1)
            if close > self.pos + 1:
                symbol = self.text[self.pos:close + 1]
                if symbol in OPERATORS:
                    self.pos = close + 1
                    return OPERATORS[symbol]
                raise UnknownOperator(f"unknown operator {symbol!r}", start, list(OPERATORS))
        raise self.error("expected an operator", list(OPERATORS))

    def raw_value(self, selector: Selector) -> str:
        ch = self.peek()
        if ch in ("'", '"'):
            return self.quoted(ch)
        if selector.namespace == "geo":
            match = _REGION.match(self.text, self.pos)
            if match:
                self.pos = match.end()
                return match.group(0)
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in ";,)":
            self.pos += 1
        if self.pos == start:
            raise self.error("expected a value", ["value"])
        return self.text[start:self.pos]

    def quoted(self, quote: str) -> str:
        self.pos += 1
        chars = []
        while self.pos < len(self.text):
            ch = self.text[self.pos]
            if ch == "\\" and self.pos + 1 < len(self.text):
                chars.append(self.text[self.pos + 1])
                self.pos += 2
                continue
            if ch == quote:
                self.pos += 1
                return "".join(chars)
            chars.append(ch)
            self.pos += 1
        raise self.error("unterminated quoted value", [quote])

    def predicate(self) -> Predicate:
        selector = self.selector()
        operator = self.operator()
        value = typed_value(selector, operator, self.raw_value(selector))
        return Predicate(selector, operator, value)


def parse_region(text: str) -> Region:
    """Parse ``radius(lat,lon,km)`` or ``box(swlat,swlon,nelat,nelon)``."""
    match = re.fullmatch(r"(radius|box)\(([^)]*)\)", text.strip())
    if not match:
        raise TypeMismatch(f"expected radius(...) or box(...), got {text!r}")
    kind, body = match.groups()
    numbers = _floats(body, kind)

    if kind == "radius":
        if len(numbers) != 3:
            raise TypeMismatch("radius takes lat,lon,km")
        lat, lon, km = numbers
        if not check_lat_lon(lat, lon) or not km > 0:
            raise TypeMismatch(f"radius out of range: {text!r}")
        return Radius(lat, lon, km)

    if len(numbers) != 4:
        raise TypeMismatch("box takes swlat,swlon,nelat,nelon")
    south, west, north, east = numbers
    if not (check_lat_lon(south, west) and check_lat_lon(north, east)) or south > north:
        raise TypeMismatch(f"box out of range: {text!r}")
    return Box(south, west, north, east)


def _floats(text: str, what: str) -> List[float]:
    try:
        numbers = [float(part) for part in text.split(",")]
    except ValueError:
        raise TypeMismatch(f"{what} takes decimal numbers, got {text!r}")
    if not all(math.isfinite(n) for n in numbers):
        raise TypeMismatch(f"{what} takes finite numbers, got {text!r}")
    return numbers


def typed_value(selector: Selector, operator: str, raw: str) -> Value:
    """Convert a raw value to the type the selector and operator call for."""
    if selector.namespace == "geo" or operator == "within":
        if selector.namespace != "geo" or operator != "within":
            raise TypeMismatch(f"=within= pairs only with geo:position, not {selector} {OPERATOR_SYMBOLS[operator]}")
        return parse_region(raw)

    if operator in RANGE_OPERATORS and not (selector.is_timestamp or selector.namespace == "x"):
        raise TypeMismatch(f"{OPERATOR_SYMBOLS[operator]} needs a timestamp selector, not {selector}")

    if selector.is_timestamp or operator in RANGE_OPERATORS:
        try:
            return parse_timestamp(raw)
        except AtomError:
            raise TypeMismatch(f"{selector} compares RFC 3339 timestamps, got {raw!r}")
    return raw


def parse_filter(text: str) -> FilterExpr:
    """
    Parse filter text into a FilterExpr.

    ``;`` (and) binds tighter than ``,`` (or); parentheses group.

    Raises:
        QuerySyntaxError: with the failing position and expected tokens
        UnknownOperator: for ``=name=`` operators outside the language
        TypeMismatch: when an operator or value does not fit its selector
    """
    return _FilterParser(text).parse()


# --- Filter serialization ----------------------------------------------------

def format_value(value: Value) -> str:
    if isinstance(value, datetime):
        return format_timestamp(value)
    if isinstance(value, (Radius, Box)):
        return value.to_text()
    if value == "" or any(ch in _RESERVED for ch in value):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    return value


def filter_to_text(expr: FilterExpr) -> str:
    """Canonical text: children of And/Or sorted lexicographically."""
    if isinstance(expr, Predicate):
        return f"{expr.selector}{OPERATOR_SYMBOLS[expr.operator]}{format_value(expr.value)}"
    if isinstance(expr, And):
        parts = [
            f"({filter_to_text(c)})" if isinstance(c, Or) else filter_to_text(c)
            for c in expr.children
        ]
        return ";".join(sorted(parts))
    return ",".join(sorted(filter_to_text(c) for c in expr.children))


def canonical_filter(expr: Optional[FilterExpr]) -> Optional[FilterExpr]:
    """Same filter with And/Or children in canonical order."""
    if expr is None or isinstance(expr, Predicate):
        return expr
    children = sorted((canonical_filter(c) for c in expr.children), key=filter_to_text)
    return type(expr)(tuple(children))


def canonical_query(query: Query) -> Query:
    return replace(query, filter=canonical_filter(query.filter))


# --- Cross-entry functions ---------------------------------------------------

def _split_top_level(text: str, what: str) -> List[str]:
    """Split on commas outside parentheses and quotes."""
    parts, depth, quote, start = [], 0, None, 0
    i = 0
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\":
                i += 1
            elif ch == quote:
                quote = None
        elif ch in ("'", '"'):
            quote = ch
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise BadParam(what, f"unbalanced ')' at position {i}")
        elif ch == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
        i += 1
    if depth or quote:
        raise BadParam(what, "unbalanced parentheses or quotes")
    parts.append(text[start:])
    return parts


def _unquote(arg: str) -> str:
    if len(arg) >= 2 and arg[0] in ("'", '"') and arg[-1] == arg[0]:
        return re.sub(r"\\(.)", r"\1", arg[1:-1])
    return arg


def _int_arg(fn: str, arg: str, minimum: int) -> int:
    try:
        value = int(arg)
    except ValueError:
        raise BadParam("xq", f"{fn} expects an integer, got {arg!r}")
    if value < minimum:
        raise BadParam("xq", f"{fn} expects an integer >= {minimum}, got {value}")
    return value


def _km_arg(fn: str, arg: str) -> float:
    try:
        value = float(arg)
    except ValueError:
        raise BadParam("xq", f"{fn} expects a radius in km, got {arg!r}")
    if not (math.isfinite(value) and value > 0):
        raise BadParam("xq", f"{fn} radius must be > 0, got {arg!r}")
    return value


def parse_function(text: str) -> CrossEntryFn:
    match = re.fullmatch(r"\s*([a-z]+)\((.*)\)\s*", text, re.DOTALL)
    if not match:
        raise BadParam("xq", f"expected name(args), got {text!r}")
    name, body = match.groups()
    if name not in FUNCTION_ARITIES:
        raise BadParam("xq", f"unknown function {name!r}")
    args = [a.strip() for a in _split_top_level(body, "xq")] if body.strip() else []
    if len(args) not in FUNCTION_ARITIES[name]:
        raise BadParam("xq", f"{name} takes {' or '.join(map(str, FUNCTION_ARITIES[name]))} arguments, got {len(args)}")

    if name == "window":
        return CrossEntryFn(name, (_int_arg(name, args[0], 1), _int_arg(name, args[1], 1)))
    if name == "cluster":
        return CrossEntryFn(name, (_km_arg(name, args[0]), _int_arg(name, args[1], 1)))

    origin_a, origin_b = _unquote(args[0]), _unquote(args[1])
    if not origin_a or not origin_b:
        raise BadParam("xq", "cooccur needs two origin URIs")
    fn_args = [origin_a, origin_b, _km_arg(name, args[2])]
    if len(args) == 4:
        fn_args.append(_int_arg(name, args[3], 0))
    return CrossEntryFn(name, tuple(fn_args))


def parse_functions(text: str) -> Tuple[CrossEntryFn, ...]:
    """Parse the ``xq`` list, e.g. ``window(3600,4),cluster(10,2)``."""
    if not text.strip():
        return ()
    return tuple(parse_function(part) for part in _split_top_level(text, "xq"))


def function_to_text(fn: CrossEntryFn) -> str:
    parts = []
    for arg in fn.args:
        if isinstance(arg, str):
            parts.append(format_value(arg))
        elif isinstance(arg, float):
            parts.append(format_number(arg))
        else:
            parts.append(str(arg))
    return f"{fn.name}({','.join(parts)})"


# --- URI parameters ----------------------------------------------------------

def parse_sort_key(text: str) -> SortKey:
    if text in SORT_KEYS and text != "geo-distance":
        return SortKey(text)
    match = re.fullmatch(r"geo-distance\(([^)]*)\)", text)
    if match:
        try:
            numbers = _floats(match.group(1), "geo-distance")
        except TypeMismatch as e:
            raise BadParam("sort-by", str(e))
        if len(numbers) == 2 and check_lat_lon(*numbers):
            return SortKey("geo-distance", (numbers[0], numbers[1]))
        raise BadParam("sort-by", f"geo-distance takes lat,lon, got {text!r}")
    raise BadParam("sort-by", f"unknown sort key {text!r}")


def _positive_int(param: str, text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise BadParam(param, f"not an integer: {text!r}")
    if value < 1:
        raise BadParam(param, f"must be >= 1, got {value}")
    return value


def _param_items(params) -> List[Tuple[str, str]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return list(params)


def parse_query_string(raw: str) -> List[Tuple[str, str]]:
    """Decode a raw URI query string into ordered (name, value) pairs."""
    return parse_qsl(raw.lstrip("?"), keep_blank_values=True)


def parse_uri_params(params) -> Query:
    """
    Assemble a Query from decoded URI parameters.

    Args:
        params: Ordered (name, value) pairs or a mapping; unknown names are ignored

    Returns:
        The Query; no recognized parameters yields the identity query
    """
    seen = {}
    for name, value in _param_items(params):
        if name not in QUERY_PARAMS:
            continue
        if name in seen:
            raise BadParam(name, "given more than once")
        seen[name] = value

    query_filter = parse_filter(seen["q"]) if "q" in seen else None
    cross_entry = parse_functions(seen["xq"]) if "xq" in seen else ()

    shaping = {}
    if "sort-by" in seen:
        shaping["sort_by"] = parse_sort_key(seen["sort-by"])
    if "order" in seen:
        if seen["order"] not in ("asc", "desc"):
            raise BadParam("order", f"expected asc or desc, got {seen['order']!r}")
        shaping["order"] = seen["order"]
    if "group-by" in seen:
        try:
            selector = parse_selector(seen["group-by"])
        except QuerySyntaxError as e:
            raise BadParam("group-by", str(e))
        if selector.namespace not in ("atom", "link"):
            raise BadParam("group-by", f"cannot group by {selector}")
        shaping["group_by"] = selector
    if "max-results" in seen:
        shaping["max_results"] = _positive_int("max-results", seen["max-results"])
    if "start-index" in seen:
        shaping["start_index"] = _positive_int("start-index", seen["start-index"])

    return Query(filter=query_filter, cross_entry=cross_entry, shaping=Shaping(**shaping))


def serialize_query(query: Query) -> List[Tuple[str, str]]:
    """Canonical (name, value) pairs; the identity query yields none."""
    params = []
    if query.filter is not None:
        params.append(("q", filter_to_text(query.filter)))
    if query.cross_entry:
        params.append(("xq", ",".join(function_to_text(fn) for fn in query.cross_entry)))
    shaping = query.shaping
    if shaping.sort_by is not None:
        params.append(("sort-by", str(shaping.sort_by)))
    if shaping.order is not None:
        params.append(("order", shaping.order))
    if shaping.group_by is not None:
        params.append(("group-by", str(shaping.group_by)))
    if shaping.max_results is not None:
        params.append(("max-results", str(shaping.max_results)))
    if shaping.start_index is not None:
        params.append(("start-index", str(shaping.start_index)))
    return params


# --- Capability checks -------------------------------------------------------

@dataclass(frozen=True)
class Unsupported:
    kind: str  # selector | operator | function | shaping
    name: str

    def __str__(self):
        return f"{self.kind} {self.name}"


def query_features(query: Query) -> List[Unsupported]:
    """Every feature a query uses, in first-use order, without duplicates."""
    features = []

    def add(kind, name):
        feature = Unsupported(kind, name)
        if feature not in features:
            features.append(feature)

    for p in predicates(query.filter):
        add("selector", str(p.selector))
        add("operator", p.operator)
    for fn in query.cross_entry:
        add("function", fn.signature)

    shaping = query.shaping
    if shaping.sort_by is not None:
        add("shaping", "sort-by")
        if shaping.sort_by.name == "geo-distance":
            add("selector", str(GEO_POSITION))
    if shaping.order is not None:
        add("shaping", "order")
    if shaping.group_by is not None:
        add("shaping", "group-by")
        add("selector", str(shaping.group_by))
    if shaping.max_results is not None:
        add("shaping", "max-results")
    if shaping.start_index is not None:
        add("shaping", "start-index")
    return features


def supports_selector(caps: "Capabilities", name: str) -> bool:
    """Whether capabilities advertise a selector, honoring scope and link(*) wildcards."""
    collection_scoped = name.startswith("x:")
    for cap in caps.selectors:
        if collection_scoped and cap.scope != "collection":
            continue
        if cap.name == name:
            return True
        wildcard = re.fullmatch(r"link\(\*\)\.(\w+)", cap.name)
        if wildcard and name.startswith("link(") and name.endswith(")." + wildcard.group(1)):
            return True
    return False


def supports(caps: "Capabilities", feature: Unsupported) -> bool:
    if feature.kind == "selector":
        return supports_selector(caps, feature.name)
    if feature.kind == "operator":
        return feature.name in caps.operators
    if feature.kind == "function":
        return feature.name in {f"{fn.name}/{fn.arity}" for fn in caps.functions}
    return feature.name in caps.shaping


def validate_against_capabilities(query: Query, caps: "Capabilities") -> List[Unsupported]:
    """Features the query uses that the capabilities do not advertise."""
    return [f for f in query_features(query) if not supports(caps, f)]


def filter_supported(expr: FilterExpr, caps: "Capabilities") -> bool:
    """Whether every selector and operator inside a filter is advertised."""
    single = Query(filter=expr)
    return not validate_against_capabilities(single, caps)
