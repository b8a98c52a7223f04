"""Builders, fixtures and seeded random generators shared by the tests."""
import random
from datetime import datetime, timedelta, timezone
from typing import List, Optional, Sequence

from atom_model import Category, Entry, Feed, GeoShape, Link, Person
from collection_backend import FeedMeta, Member, new_collection, upsert_member
from discovery import Capabilities, FunctionCapability, SelectorCapability
from query_language import (
    ATOM_SELECTORS,
    OPERATORS,
    SHAPING_PARAMS,
    And,
    CrossEntryFn,
    Or,
    Predicate,
    Query,
    Selector,
    Shaping,
    SortKey,
    GEO_POSITION,
)
from geo import Box, Radius

BASE_TIME = datetime(2024, 3, 1, 12, 0, 0, tzinfo=timezone.utc)

WORDS = ("java", "jsp", "python", "rust", "maps", "servlet", "geo", "news")
AUTHORS = ("alice", "bob", "carol")
LICENSES = (
    "http://creativecommons.org/licenses/by/4.0/",
    "http://creativecommons.org/licenses/by-sa/4.0/",
    "http://example.org/all-rights-reserved",
)


def ts(hours: float = 0, minutes: float = 0, seconds: float = 0) -> datetime:
    return BASE_TIME + timedelta(hours=hours, minutes=minutes, seconds=seconds)


def point(lat: float, lon: float) -> GeoShape:
    return GeoShape("point", ((lat, lon),))


def make_entry(entry_id: str, title: Optional[str] = None, updated: Optional[datetime] = None,
               published: Optional[datetime] = None, categories: Sequence[str] = (),
               geo: Optional[GeoShape] = None, links: Sequence[Link] = (),
               authors: Sequence[str] = (), summary: Optional[str] = None,
               origin: Optional[str] = None) -> Entry:
    return Entry(
        id=entry_id,
        title=title if title is not None else f"Entry {entry_id}",
        updated=updated or BASE_TIME,
        published=published,
        authors=tuple(Person(name) for name in authors),
        categories=tuple(Category(term) for term in categories),
        links=tuple(links),
        summary=summary,
        geo=geo,
        origin=origin,
    )


def make_feed(entries: Sequence[Entry], feed_id: str = "urn:test:feed", title: str = "Test feed",
              updated: Optional[datetime] = None) -> Feed:
    entries = tuple(entries)
    return Feed(
        id=feed_id,
        title=title,
        updated=updated or max((e.updated for e in entries), default=BASE_TIME),
        entries=entries,
    )


def category_feed() -> Feed:
    """Six labeled entries for the java / jsp category queries."""
    labels = {
        "e1": ("java", "jsp"),
        "e2": ("java",),
        "e3": ("jsp",),
        "e4": ("python",),
        "e5": ("java", "jsp", "servlet"),
        "e6": (),
    }
    return make_feed(
        [make_entry(f"urn:e:{key}", updated=ts(hours=i), categories=terms)
         for i, (key, terms) in enumerate(labels.items())],
        feed_id="urn:test:categories",
    )


def burst_feed() -> Feed:
    """Four entries inside one hour among scattered ones."""
    offsets = {
        "early": -10.0,
        "b1": 0.0,
        "b2": 0.25,
        "b3": 0.5,
        "b4": 0.9,
        "late": 5.0,
        "later": 9.0,
    }
    return make_feed(
        [make_entry(f"urn:e:{key}", updated=ts(hours=h), published=ts(hours=h))
         for key, h in offsets.items()],
        feed_id="urn:test:burst",
    )


def numbered_collection(count: int, page_size: int = 10, archive_size: int = 10, name: str = "news"):
    """Members m01..mNN inserted oldest first, one hour apart."""
    meta = FeedMeta(id=f"urn:test:{name}", title=f"{name} collection", href=f"http://{name}.test/feeds/{name}")
    collection = new_collection(name, meta, page_size, archive_size)
    for i in range(1, count + 1):
        collection = upsert_member(collection, Member(make_entry(f"urn:m:{i:02d}", updated=ts(hours=i))))
    return collection


def photo_collection():
    """Five photos, two taken with a Canon camera."""
    cameras = ["Canon EOS 5D", "Nikon D750", "Canon PowerShot", "Sony A7", "Fujifilm X100"]
    meta = FeedMeta(id="urn:test:photos", title="Photos", href="http://photos.test/feeds/photos")
    collection = new_collection("photos", meta, page_size=10, archive_size=10)
    for i, camera in enumerate(cameras, start=1):
        entry = make_entry(
            f"urn:photo:{i}",
            title=f"Photo {i}",
            updated=ts(hours=i),
            categories=("landscape",) if i % 2 else ("portrait",),
            geo=point(48.0 + i / 100, 11.0),
        )
        hidden = {"camera-model": camera, "taken": f"2024-02-0{i}T10:00:00Z"}
        collection = upsert_member(collection, Member(entry, hidden))
    return collection


def full_feed_capabilities(tier: str = "open") -> Capabilities:
    from discovery import feed_scope_only, full_capabilities
    return feed_scope_only(full_capabilities(tier=tier))


# --- Random generators --------------------------------------------------------

def random_geo(rng: random.Random) -> GeoShape:
    lat, lon = rng.uniform(40.0, 40.5), rng.uniform(-74.2, -73.7)
    kind = rng.choice(("point", "point", "point", "box", "line"))
    if kind == "point":
        return point(round(lat, 4), round(lon, 4))
    other = (round(lat + rng.uniform(0.001, 0.05), 4), round(lon + rng.uniform(0.001, 0.05), 4))
    return GeoShape(kind, ((round(lat, 4), round(lon, 4)), other))


def random_entry(rng: random.Random, entry_id: str) -> Entry:
    updated = ts(minutes=rng.randrange(0, 60 * 24 * 3))
    published = updated - timedelta(minutes=rng.randrange(0, 120)) if rng.random() < 0.6 else None
    links = []
    if rng.random() < 0.5:
        links.append(Link(f"http://example.org/{entry_id}", "alternate"))
    if rng.random() < 0.4:
        links.append(Link(rng.choice(LICENSES), "license"))
    return make_entry(
        entry_id,
        title=" ".join(rng.sample(WORDS, rng.randint(1, 2))),
        updated=updated,
        published=published,
        categories=rng.sample(WORDS, rng.randint(0, 3)),
        geo=random_geo(rng) if rng.random() < 0.7 else None,
        links=links,
        authors=rng.sample(AUTHORS, rng.randint(0, 2)),
        summary=rng.choice(WORDS) if rng.random() < 0.3 else None,
    )


def random_feed(rng: random.Random, max_entries: int = 50, prefix: str = "urn:r",
                duplicate_rate: float = 0.0) -> Feed:
    """Random entries; with duplicate_rate, some ids reappear later as other versions."""
    count = rng.randint(0, max_entries)
    entries = [random_entry(rng, f"{prefix}:{i}") for i in range(count)]
    if duplicate_rate:
        for i in range(count):
            if rng.random() < duplicate_rate:
                entries.insert(rng.randint(i + 1, len(entries)), random_entry(rng, f"{prefix}:{i}"))
    return make_feed(entries)


def random_predicate(rng: random.Random) -> Predicate:
    kind = rng.randrange(9)
    if kind == 0:
        return Predicate(Selector("atom", "category"), rng.choice(("eq", "ne")), rng.choice(WORDS))
    if kind == 1:
        word = rng.choice(WORDS)
        return Predicate(Selector("atom", "category"), "eq", word[:2] + "*")
    if kind == 2:
        return Predicate(Selector("atom", "title"), rng.choice(("eq", "ne")), "*" + rng.choice(WORDS) + "*")
    if kind == 3:
        op = rng.choice(("lt", "le", "gt", "ge"))
        return Predicate(Selector("atom", rng.choice(("updated", "published"))), op,
                         ts(minutes=rng.randrange(0, 60 * 24 * 3)))
    if kind == 4:
        lat, lon = rng.uniform(40.0, 40.5), rng.uniform(-74.2, -73.7)
        if rng.random() < 0.5:
            region = Radius(round(lat, 3), round(lon, 3), rng.choice((2.0, 5.0, 15.0)))
        else:
            region = Box(round(lat - 0.1, 3), round(lon - 0.1, 3), round(lat + 0.1, 3), round(lon + 0.1, 3))
        return Predicate(GEO_POSITION, "within", region)
    if kind == 5:
        return Predicate(Selector("atom", "author.name"), rng.choice(("eq", "ne")), rng.choice(AUTHORS))
    if kind == 6:
        return Predicate(Selector("link", "href", "license"), "eq", "http://creativecommons.org/*")
    if kind == 7:
        return Predicate(Selector("atom", "summary"), rng.choice(("eq", "ne")), rng.choice(WORDS))
    return Predicate(Selector("atom", "id"), "ne", f"urn:r:{rng.randrange(10)}")


def random_filter(rng: random.Random, depth: int = 2):
    if depth == 0 or rng.random() < 0.4:
        return random_predicate(rng)
    children = tuple(random_filter(rng, depth - 1) for _ in range(rng.randint(2, 3)))
    node = And(children) if rng.random() < 0.6 else Or(children)
    # Keep the tree in the flattened shape the parser produces
    flat = []
    for child in node.children:
        flat.extend(child.children if type(child) is type(node) else (child,))
    return type(node)(tuple(flat))


def random_shaping(rng: random.Random) -> Shaping:
    fields = {}
    if rng.random() < 0.5:
        fields["sort_by"] = rng.choice((
            SortKey("updated"), SortKey("published"), SortKey("title"),
            SortKey("geo-distance", (40.25, -73.95)),
        ))
        if rng.random() < 0.5:
            fields["order"] = rng.choice(("asc", "desc"))
    if rng.random() < 0.3:
        fields["group_by"] = rng.choice((Selector("atom", "category"), Selector("atom", "author.name")))
    if rng.random() < 0.4:
        fields["max_results"] = rng.randint(1, 20)
    if rng.random() < 0.3:
        fields["start_index"] = rng.randint(1, 10)
    return Shaping(**fields)


def random_functions(rng: random.Random) -> List[CrossEntryFn]:
    functions = []
    for _ in range(rng.choice((0, 0, 1, 1, 2))):
        if rng.random() < 0.5:
            functions.append(CrossEntryFn("window", (rng.choice((600, 3600, 7200, 86400)), rng.randint(1, 4))))
        else:
            functions.append(CrossEntryFn("cluster", (rng.choice((1.0, 5.0, 20.0)), rng.randint(1, 3))))
    return functions


def random_query(rng: random.Random, origins: Sequence[str] = ()) -> Query:
    functions = random_functions(rng)
    if len(origins) >= 2 and rng.random() < 0.4:
        a, b = rng.sample(list(origins), 2)
        args = [a, b, rng.choice((5.0, 15.0, 40.0))]
        if rng.random() < 0.5:
            args.append(rng.choice((3600, 86400)))
        functions.insert(rng.randint(0, len(functions)), CrossEntryFn("cooccur", tuple(args)))
    return Query(
        filter=random_filter(rng) if rng.random() < 0.8 else None,
        cross_entry=tuple(functions),
        shaping=random_shaping(rng),
    )


def random_capabilities(rng: random.Random) -> Capabilities:
    selectors = [SelectorCapability(name) for name in ATOM_SELECTORS if rng.random() < 0.6]
    if rng.random() < 0.5:
        selectors.append(SelectorCapability("geo:position"))
    if rng.random() < 0.3:
        selectors.append(SelectorCapability("link(*).href"))
    if rng.random() < 0.2:
        selectors.append(SelectorCapability("x:camera-model", "collection"))
    operators = [name for name in OPERATORS.values() if rng.random() < 0.7]
    functions = [FunctionCapability("window", 2)] if rng.random() < 0.5 else []
    if rng.random() < 0.5:
        functions.append(FunctionCapability("cluster", 2))
    shaping = [name for name in SHAPING_PARAMS if rng.random() < 0.5]
    return Capabilities(
        selectors=tuple(selectors),
        operators=tuple(operators),
        functions=tuple(functions),
        shaping=tuple(shaping),
        tier=rng.choice(("open", "keyed")),
    )
