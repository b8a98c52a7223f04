"""Atom feed model: parsing, validation and serialization.

Covers the core Atom elements, GeoRSS Simple geometry and the feedset
origin annotation. Every other foreign element is carried through as an
``Extension`` so it survives a parse/serialize cycle.
"""
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Iterable, List, Optional, Tuple, Union

from lxml import etree

from geo import LatLon, check_lat_lon, format_number

ATOM_NS = "http://www.w3.org/2005/Atom"
GEORSS_NS = "http://www.georss.org/georss"
FEEDSET_NS = "http://ns.feedql.dev/feedset"
HISTORY_NS = "http://purl.org/syndication/history/1.0"

NSMAP = {None: ATOM_NS, "georss": GEORSS_NS, "fs": FEEDSET_NS, "fh": HISTORY_NS}

GEO_KINDS = ("point", "line", "polygon", "box")

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

_RFC3339 = re.compile(
    r"^(\d{4}-\d{2}-\d{2})[Tt ](\d{2}:\d{2}:\d{2})(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$"
)


class AtomError(ValueError):
    """Base class for feed parsing and validation errors."""


class MalformedXml(AtomError):
    def __init__(self, message: str, position: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.position = position


class MissingRequired(AtomError):
    """A feed or entry lacks id, title or updated."""


class BadGeo(AtomError):
    """GeoRSS coordinates have the wrong count or are out of range."""


class BadTimestamp(AtomError):
    """A date construct is not RFC 3339."""


class InvariantViolation(AtomError):
    def __init__(self, violations: List["Violation"]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


def parse_timestamp(text: str) -> datetime:
    """Parse RFC 3339 text into an aware UTC datetime."""
    match = _RFC3339.match(text.strip())
    if not match:
        raise BadTimestamp(f"not an RFC 3339 timestamp: {text!r}")
    date_part, time_part, fraction, offset = match.groups()
    # fromisoformat only takes 3 or 6 fraction digits before Python 3.11
    micros = (fraction[1:] + "000000")[:6] if fraction else "000000"
    if offset in ("Z", "z"):
        offset = "+00:00"
    try:
        value = datetime.fromisoformat(f"{date_part}T{time_part}.{micros}{offset}")
        return value.astimezone(timezone.utc)
    except (ValueError, OverflowError) as e:
        raise BadTimestamp(f"not an RFC 3339 timestamp: {text!r} ({e})")


def format_timestamp(value: datetime) -> str:
    """Format a datetime as RFC 3339 in UTC with a literal Z."""
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    value = value.astimezone(timezone.utc)
    text = value.strftime("%Y-%m-%dT%H:%M:%S")
    if value.microsecond:
        text += f".{value.microsecond:06d}".rstrip("0")
    return text + "Z"


@dataclass(frozen=True)
class Person:
    name: str
    email: Optional[str] = None
    uri: Optional[str] = None


@dataclass(frozen=True)
class Category:
    term: str
    scheme: Optional[str] = None
    label: Optional[str] = None


@dataclass(frozen=True)
class Link:
    href: str
    rel: str = "alternate"
    type: Optional[str] = None


@dataclass(frozen=True)
class Content:
    """Inline text content, or a link-out when ``src`` is set."""
    text: Optional[str] = None
    src: Optional[str] = None
    type: Optional[str] = None


@dataclass(frozen=True)
class GeoShape:
    kind: str
    coords: Tuple[LatLon, ...]


@dataclass(frozen=True)
class Extension:
    """An unrecognized child element kept as (namespace, name, text)."""
    namespace: str
    name: str
    value: str = ""


@dataclass(frozen=True)
class Entry:
    id: str
    title: str
    updated: datetime
    published: Optional[datetime] = None
    authors: Tuple[Person, ...] = ()
    categories: Tuple[Category, ...] = ()
    links: Tuple[Link, ...] = ()
    summary: Optional[str] = None
    content: Optional[Content] = None
    geo: Optional[GeoShape] = None
    origin: Optional[str] = None
    extensions: Tuple[Extension, ...] = ()

    @property
    def timestamp(self) -> datetime:
        """Published time, falling back to updated (used by time windows)."""
        return self.published or self.updated


@dataclass(frozen=True)
class Feed:
    id: str
    title: str
    updated: datetime
    links: Tuple[Link, ...] = ()
    authors: Tuple[Person, ...] = ()
    entries: Tuple[Entry, ...] = ()
    extensions: Tuple[Extension, ...] = ()


@dataclass(frozen=True)
class Violation:
    subject: str
    rule: str

    def __str__(self):
        return f"{self.subject}: {self.rule}"


# --- GeoRSS Simple ---------------------------------------------------------

def geo_violations(shape: GeoShape) -> List[str]:
    """List the GeoRSS rules a shape breaks (empty when valid)."""
    problems = []
    if shape.kind not in GEO_KINDS:
        return [f"geo.kind {shape.kind!r} unknown"]

    for lat, lon in shape.coords:
        if not check_lat_lon(lat, lon):
            problems.append("geo coordinate range")
            break

    count = len(shape.coords)
    if shape.kind == "point" and count != 1:
        problems.append("geo point has 1 pair")
    elif shape.kind == "box":
        if count != 2:
            problems.append("geo box has 2 pairs")
        elif shape.coords[0][0] > shape.coords[1][0]:
            problems.append("geo box sw.lat <= ne.lat")
    elif shape.kind == "line" and count < 2:
        problems.append("geo line has >= 2 pairs")
    elif shape.kind == "polygon" and len(set(shape.coords)) < 3:
        problems.append("geo polygon has >= 3 distinct pairs")
    return problems


def parse_geo(kind: str, text: str) -> GeoShape:
    """Parse whitespace-separated "lat lon" pairs into a validated shape."""
    try:
        numbers = [float(token) for token in text.replace(",", " ").split()]
    except ValueError:
        raise BadGeo(f"georss:{kind} has a non-numeric coordinate: {text!r}")
    if len(numbers) % 2:
        raise BadGeo(f"georss:{kind} has an odd number of coordinates")

    coords = tuple((numbers[i], numbers[i + 1]) for i in range(0, len(numbers), 2))
    if kind == "polygon" and len(coords) > 3 and coords[0] == coords[-1]:
        coords = coords[:-1]

    shape = GeoShape(kind=kind, coords=coords)
    problems = geo_violations(shape)
    if problems:
        raise BadGeo(f"georss:{kind} {text.strip()!r}: {', '.join(problems)}")
    return shape


def format_geo(shape: GeoShape) -> str:
    coords = list(shape.coords)
    if shape.kind == "polygon" and coords and coords[0] != coords[-1]:
        coords.append(coords[0])
    return " ".join(f"{format_number(lat)} {format_number(lon)}" for lat, lon in coords)


def representative_point(shape: GeoShape) -> LatLon:
    """Reduce a shape to the single point spatial predicates are evaluated on."""
    coords = shape.coords
    if shape.kind == "point":
        return coords[0]
    if shape.kind == "box":
        (s, w), (n, e) = coords
        return ((s + n) / 2, (w + e) / 2)

    if shape.kind == "polygon" and len(coords) > 3 and coords[0] == coords[-1]:
        coords = coords[:-1]
    lat = sum(c[0] for c in coords) / len(coords)
    lon = sum(c[1] for c in coords) / len(coords)
    return (lat, lon)


# --- Parsing ---------------------------------------------------------------

def _qname(ns: str, name: str) -> str:
    return f"{{{ns}}}{name}"


def _split_tag(tag: str) -> Tuple[str, str]:
    if tag.startswith("{"):
        ns, _, name = tag[1:].partition("}")
        return ns, name
    return "", tag


def _text(element) -> str:
    return "".join(element.itertext())


def _required(element, name: str, owner: str):
    child = element.find(_qname(ATOM_NS, name))
    if child is None:
        raise MissingRequired(f"{owner} lacks atom:{name}")
    return child


def _timestamp(element) -> datetime:
    return parse_timestamp(_text(element))


def _parse_person(element) -> Person:
    fields = {}
    for name in ("name", "email", "uri"):
        child = element.find(_qname(ATOM_NS, name))
        if child is not None:
            fields[name] = _text(child).strip()
    return Person(name=fields.get("name", ""), email=fields.get("email"), uri=fields.get("uri"))


def _parse_link(element) -> Link:
    return Link(
        href=element.get("href", "").strip(),
        rel=element.get("rel") or "alternate",
        type=element.get("type"),
    )


def _parse_entry(element) -> Entry:
    entry_id = _text(_required(element, "id", "entry")).strip()
    owner = f"entry {entry_id or '(no id)'}"
    fields = {
        "id": entry_id,
        "title": _text(_required(element, "title", owner)),
        "updated": _timestamp(_required(element, "updated", owner)),
    }
    authors, categories, links, extensions = [], [], [], []

    for child in element:
        ns, name = _split_tag(child.tag)
        if ns == ATOM_NS and name in ("id", "title", "updated"):
            continue
        if ns == ATOM_NS and name == "published":
            fields["published"] = _timestamp(child)
        elif ns == ATOM_NS and name == "author":
            authors.append(_parse_person(child))
        elif ns == ATOM_NS and name == "category":
            categories.append(Category(
                term=child.get("term", ""),
                scheme=child.get("scheme"),
                label=child.get("label"),
            ))
        elif ns == ATOM_NS and name == "link":
            links.append(_parse_link(child))
        elif ns == ATOM_NS and name == "summary":
            fields["summary"] = _text(child)
        elif ns == ATOM_NS and name == "content":
            src = child.get("src")
            fields["content"] = Content(
                text=None if src else _text(child),
                src=src,
                type=child.get("type"),
            )
        elif ns == GEORSS_NS and name in GEO_KINDS and "geo" not in fields:
            fields["geo"] = parse_geo(name, _text(child))
        elif ns == FEEDSET_NS and name == "origin" and "origin" not in fields:
            fields["origin"] = child.get("href", "").strip()
        else:
            extensions.append(Extension(ns, name, _text(child)))

    return Entry(
        authors=tuple(authors),
        categories=tuple(categories),
        links=tuple(links),
        extensions=tuple(extensions),
        **fields,
    )


def _load_root(xml: Union[str, bytes]):
    if isinstance(xml, str):
        xml = xml.encode("utf-8")
    parser = etree.XMLParser(
        resolve_entities=False, no_network=True, remove_comments=True, remove_pis=True
    )
    try:
        return etree.fromstring(xml, parser)
    except etree.XMLSyntaxError as e:
        raise MalformedXml(f"not well-formed XML: {e.msg}", position=e.position)


def parse_feed(xml: Union[str, bytes], strict: bool = False) -> Feed:
    """
    Parse an Atom feed document.

    Args:
        xml: The document text (or raw bytes)
        strict: Also reject documents that parse but fail validate_feed

    Returns:
        The parsed Feed
    """
    root = _load_root(xml)
    if root.tag != _qname(ATOM_NS, "feed"):
        raise MalformedXml(f"root element is {root.tag}, expected atom:feed")

    feed_id = _text(_required(root, "id", "feed")).strip()
    fields = {
        "id": feed_id,
        "title": _text(_required(root, "title", "feed")),
        "updated": _timestamp(_required(root, "updated", "feed")),
    }
    authors, links, entries, extensions = [], [], [], []

    for child in root:
        ns, name = _split_tag(child.tag)
        if ns == ATOM_NS and name in ("id", "title", "updated"):
            continue
        if ns == ATOM_NS and name == "entry":
            entries.append(_parse_entry(child))
        elif ns == ATOM_NS and name == "author":
            authors.append(_parse_person(child))
        elif ns == ATOM_NS and name == "link":
            links.append(_parse_link(child))
        else:
            extensions.append(Extension(ns, name, _text(child)))

    feed = Feed(
        links=tuple(links),
        authors=tuple(authors),
        entries=tuple(entries),
        extensions=tuple(extensions),
        **fields,
    )
    if strict:
        violations = validate_feed(feed)
        if violations:
            raise InvariantViolation(violations)
    return feed


# --- Validation ------------------------------------------------------------

def _person_violations(subject: str, people: Iterable[Person]) -> List[Violation]:
    return [Violation(subject, "person.name nonempty") for p in people if not p.name]


def _link_violations(subject: str, links: Iterable[Link]) -> List[Violation]:
    return [Violation(subject, "link.href nonempty") for link in links if not link.href]


def validate_feed(feed: Feed) -> List[Violation]:
    """Check Feed/Entry invariants; an empty list means the feed is valid."""
    violations = []
    if not feed.id:
        violations.append(Violation("feed", "feed.id nonempty"))
    if not feed.title:
        violations.append(Violation("feed", "feed.title nonempty"))
    if feed.updated is None:
        violations.append(Violation("feed", "feed.updated present"))
    violations += _person_violations("feed", feed.authors)
    violations += _link_violations("feed", feed.links)

    seen = set()
    for entry in feed.entries:
        violations += validate_entry(entry)
        # Ids only need to be unique per origin inside a feedset
        key = (entry.origin, entry.id)
        if entry.id and key in seen:
            violations.append(Violation(f"entry {entry.id}", "duplicate entry id"))
        seen.add(key)
    return violations


def validate_entry(entry: Entry) -> List[Violation]:
    """Entry-level invariants (everything but id uniqueness)."""
    violations = []
    subject = f"entry {entry.id}"
    if not entry.id:
        violations.append(Violation(subject, "entry.id nonempty"))
    if entry.title is None:
        violations.append(Violation(subject, "entry.title present"))
    if entry.updated is None:
        violations.append(Violation(subject, "entry.updated present"))
    violations += _person_violations(subject, entry.authors)
    violations += _link_violations(subject, entry.links)
    violations += [
        Violation(subject, "category.term nonempty")
        for c in entry.categories if not c.term
    ]
    if entry.geo is not None:
        violations += [Violation(subject, rule) for rule in geo_violations(entry.geo)]
    if entry.origin is not None and not entry.origin:
        violations.append(Violation(subject, "entry.origin nonempty"))
    return violations


# --- Serialization ---------------------------------------------------------

def _add_text(parent, ns: str, name: str, text: str):
    child = etree.SubElement(parent, _qname(ns, name))
    child.text = text
    return child


def _add_person(parent, kind: str, person: Person):
    element = etree.SubElement(parent, _qname(ATOM_NS, kind))
    _add_text(element, ATOM_NS, "name", person.name)
    if person.email is not None:
        _add_text(element, ATOM_NS, "email", person.email)
    if person.uri is not None:
        _add_text(element, ATOM_NS, "uri", person.uri)


def _add_link(parent, link: Link):
    element = etree.SubElement(parent, _qname(ATOM_NS, "link"), href=link.href, rel=link.rel)
    if link.type is not None:
        element.set("type", link.type)


def _add_extension(parent, extension: Extension):
    tag = _qname(extension.namespace, extension.name) if extension.namespace else extension.name
    etree.SubElement(parent, tag).text = extension.value


def _add_entry(parent, entry: Entry):
    element = etree.SubElement(parent, _qname(ATOM_NS, "entry"))
    _add_text(element, ATOM_NS, "id", entry.id)
    _add_text(element, ATOM_NS, "title", entry.title)
    _add_text(element, ATOM_NS, "updated", format_timestamp(entry.updated))
    if entry.published is not None:
        _add_text(element, ATOM_NS, "published", format_timestamp(entry.published))
    for person in entry.authors:
        _add_person(element, "author", person)
    for category in entry.categories:
        attrs = {"term": category.term}
        if category.scheme is not None:
            attrs["scheme"] = category.scheme
        if category.label is not None:
            attrs["label"] = category.label
        etree.SubElement(element, _qname(ATOM_NS, "category"), **attrs)
    for link in entry.links:
        _add_link(element, link)
    if entry.summary is not None:
        _add_text(element, ATOM_NS, "summary", entry.summary)
    if entry.content is not None:
        content = etree.SubElement(element, _qname(ATOM_NS, "content"))
        if entry.content.type is not None:
            content.set("type", entry.content.type)
        if entry.content.src is not None:
            content.set("src", entry.content.src)
        else:
            content.text = entry.content.text or ""
    if entry.geo is not None:
        _add_text(element, GEORSS_NS, entry.geo.kind, format_geo(entry.geo))
    if entry.origin is not None:
        etree.SubElement(element, _qname(FEEDSET_NS, "origin"), href=entry.origin)
    for extension in entry.extensions:
        _add_extension(element, extension)


def _has_bare_extension(feed: Feed) -> bool:
    if any(not x.namespace for x in feed.extensions):
        return True
    return any(not x.namespace for e in feed.entries for x in e.extensions)


def serialize_feed(feed: Feed) -> str:
    """Serialize a valid Feed as namespace-well-formed Atom XML."""
    violations = validate_feed(feed)
    if violations:
        raise InvariantViolation(violations)

    nsmap = NSMAP
    if _has_bare_extension(feed):
        # Un-namespaced children cannot sit under a default namespace
        nsmap = {("atom" if k is None else k): v for k, v in NSMAP.items()}
    root = etree.Element(_qname(ATOM_NS, "feed"), nsmap=nsmap)
    _add_text(root, ATOM_NS, "id", feed.id)
    _add_text(root, ATOM_NS, "title", feed.title)
    _add_text(root, ATOM_NS, "updated", format_timestamp(feed.updated))
    for person in feed.authors:
        _add_person(root, "author", person)
    for link in feed.links:
        _add_link(root, link)
    for extension in feed.extensions:
        _add_extension(root, extension)
    for entry in feed.entries:
        _add_entry(root, entry)

    return etree.tostring(root, xml_declaration=True, encoding="utf-8", pretty_print=True).decode("utf-8")


def latest_update(entries: Iterable[Entry], default: datetime) -> datetime:
    """Most recent entry update, or ``default`` when there are no entries."""
    return max((e.updated for e in entries), default=default)


def with_entries(feed: Feed, entries: Iterable[Entry]) -> Feed:
    """Copy feed-level metadata onto a new entry list; updated follows the entries."""
    entries = tuple(entries)
    return replace(feed, entries=entries, updated=latest_update(entries, feed.updated))
