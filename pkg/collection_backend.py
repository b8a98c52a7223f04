"""
Collection storage: members with hidden backend fields, RFC 5005 paged and
archived feeds, and collection-scoped queries.
"""
import math
import os
import re
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Dict, Iterable, Mapping, Optional, Tuple

from atom_model import (
    EPOCH,
    HISTORY_NS,
    Entry,
    Extension,
    Feed,
    Link,
    Person,
    latest_update,
    parse_feed,
    serialize_feed,
    validate_entry,
)
from discovery import Capabilities, full_capabilities
from eval_engine import DEFAULT_CONTEXT, CrossFeedFnHere, EvalContext, eval_query
from query_language import Query, predicates


class CollectionError(ValueError):
    """Base class for collection errors."""


class StaleUpdate(CollectionError):
    pass


class PageOutOfRange(CollectionError):
    pass


class ArchiveOutOfRange(CollectionError):
    pass


class UnknownHiddenField(CollectionError):
    pass


class InvalidMember(CollectionError):
    pass


@dataclass(frozen=True)
class Member:
    entry: Entry
    # Collection-only fields, queried through x: selectors and never serialized
    hidden: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class FeedMeta:
    id: str
    title: str
    authors: Tuple[Person, ...] = ()
    # Feed-level updated used while the collection is empty
    updated: datetime = EPOCH
    # URI of the current feed; page and archive links hang off it
    href: str = ""

    @property
    def self_href(self) -> str:
        return self.href or self.id


@dataclass(frozen=True)
class Collection:
    name: str
    meta: FeedMeta
    page_size: int = 10
    archive_size: int = 10
    # Members in order of first insertion; archive blocks follow this order
    members: Tuple[Member, ...] = ()
    # Entry versions frozen when each archive block filled
    sealed: Tuple[Tuple[Entry, ...], ...] = ()
    # x: fields advertised even when no member carries them yet
    declared_fields: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.page_size < 1 or self.archive_size < 1:
            raise CollectionError("page_size and archive_size must be >= 1")

    def get(self, entry_id: str) -> Optional[Member]:
        for member in self.members:
            if member.entry.id == entry_id:
                return member
        return None

    def hidden_fields(self) -> Tuple[str, ...]:
        names = dict.fromkeys(self.declared_fields)
        for member in self.members:
            names.update(dict.fromkeys(sorted(member.hidden)))
        return tuple(names)


def new_collection(name: str, meta: FeedMeta, page_size: int = 10, archive_size: int = 10,
                   declared_fields: Iterable[str] = ()) -> Collection:
    return Collection(
        name=name,
        meta=meta,
        page_size=page_size,
        archive_size=archive_size,
        declared_fields=tuple(declared_fields),
    )


def _ascending(entries: Iterable[Entry]) -> Tuple[Entry, ...]:
    return tuple(sorted(sorted(entries, key=lambda e: e.id), key=lambda e: e.updated))


def _descending(entries: Iterable[Entry]) -> Tuple[Entry, ...]:
    return tuple(sorted(sorted(entries, key=lambda e: e.id), key=lambda e: e.updated, reverse=True))


def upsert_member(c: Collection, m: Member) -> Collection:
    """
    Insert a member or replace the one with the same entry id.

    Replacement requires an updated timestamp no older than the stored one.
    A member that completes an archive block seals that block.

    Raises:
        InvalidMember: the entry breaks an Atom invariant or a hidden key is empty
        StaleUpdate: the incoming entry is older than the stored version
    """
    violations = validate_entry(m.entry)
    if violations:
        raise InvalidMember("; ".join(str(v) for v in violations))
    if any(not key for key in m.hidden):
        raise InvalidMember(f"entry {m.entry.id}: hidden field names must be nonempty")
    member = Member(m.entry, dict(m.hidden))

    for i, existing in enumerate(c.members):
        if existing.entry.id != m.entry.id:
            continue
        if m.entry.updated < existing.entry.updated:
            raise StaleUpdate(
                f"entry {m.entry.id}: updated {m.entry.updated.isoformat()} is older than "
                f"stored {existing.entry.updated.isoformat()}"
            )
        if existing == member:
            return c
        members = c.members[:i] + (member,) + c.members[i + 1:]
        return replace(c, members=members)

    members = c.members + (member,)
    sealed = c.sealed
    if len(members) % c.archive_size == 0:
        block = members[-c.archive_size:]
        sealed = sealed + (_ascending(mb.entry for mb in block),)
    return replace(c, members=members, sealed=sealed)


def member_entries(c: Collection) -> Tuple[Entry, ...]:
    """All member entries, updated-descending with ties by id."""
    return _descending(m.entry for m in c.members)


def _base_feed(c: Collection, entries: Iterable[Entry], links: Iterable[Link],
               extensions: Iterable[Extension] = ()) -> Feed:
    entries = tuple(entries)
    all_updated = latest_update((m.entry for m in c.members), c.meta.updated)
    return Feed(
        id=c.meta.id,
        title=c.meta.title,
        updated=all_updated,
        authors=c.meta.authors,
        links=tuple(links),
        entries=entries,
        extensions=tuple(extensions),
    )


def page_href(c: Collection, page: int) -> str:
    return f"{c.meta.self_href}?page={page}"


def archive_href(c: Collection, index: int) -> str:
    return f"{c.meta.self_href}/archive/{index}"


def page_count(c: Collection) -> int:
    return max(1, math.ceil(len(c.members) / c.page_size))


def archive_count(c: Collection) -> int:
    """Number of archive blocks, the partial newest one included."""
    return math.ceil(len(c.members) / c.archive_size)


def current_feed(c: Collection) -> Feed:
    """
    The newest page_size members, newest first.

    Links to the second page when there is one and to the newest full archive.
    """
    entries = member_entries(c)[:c.page_size]
    links = [Link(c.meta.self_href, "self")]
    if page_count(c) > 1:
        links.append(Link(page_href(c, 2), "next"))
    if c.sealed:
        links.append(Link(archive_href(c, len(c.sealed)), "prev-archive"))
    return _base_feed(c, entries, links)


def paged_feed(c: Collection, page: int) -> Feed:
    """
    One page of the updated-descending member list.

    Raises:
        PageOutOfRange: page < 1 or past the last nonempty page (page 1 always exists)
    """
    last = page_count(c)
    if page < 1 or page > last:
        raise PageOutOfRange(f"page {page} out of range 1..{last}")

    start = (page - 1) * c.page_size
    entries = member_entries(c)[start:start + c.page_size]
    links = [Link(page_href(c, page), "self"), Link(c.meta.self_href, "current")]
    if page < last:
        links.append(Link(page_href(c, page + 1), "next"))
    if page > 1:
        links.append(Link(page_href(c, page - 1), "previous"))
    return _base_feed(c, entries, links)


def archive_is_full(c: Collection, index: int) -> bool:
    return 1 <= index <= len(c.sealed)


def archived_feed(c: Collection, index: int) -> Feed:
    """
    Archive block ``index`` (1-based), oldest block first.

    Full blocks serve their sealed entry versions and never change; each
    links next-archive to the following block, where later arrivals land.
    That target raises ArchiveOutOfRange until its first member arrives,
    which is always the case while the member count is a multiple of
    archive_size.
    The partial newest block is served from live members without fh:archive.

    Raises:
        ArchiveOutOfRange: no such block
    """
    total = archive_count(c)
    if index < 1 or index > total:
        raise ArchiveOutOfRange(f"archive {index} out of range 1..{total}")

    full = archive_is_full(c, index)
    if full:
        entries = c.sealed[index - 1]
    else:
        block = c.members[(index - 1) * c.archive_size:]
        entries = _ascending(m.entry for m in block)

    links = [Link(archive_href(c, index), "self"), Link(c.meta.self_href, "current")]
    if index > 1:
        links.append(Link(archive_href(c, index - 1), "prev-archive"))
    if full:
        links.append(Link(archive_href(c, index + 1), "next-archive"))

    feed = _base_feed(c, entries, links, [Extension(HISTORY_NS, "archive")] if full else [])
    # A sealed archive must not move when newer members arrive
    return replace(feed, updated=latest_update(entries, c.meta.updated))


def collection_capabilities(c: Collection, tier: str = "open") -> Capabilities:
    """Every single-feed feature of the language plus this collection's hidden fields."""
    caps = full_capabilities(c.hidden_fields(), tier=tier)
    return replace(caps, functions=tuple(fn for fn in caps.functions if fn.name != "cooccur"))


def collection_query(c: Collection, q: Query, ctx: EvalContext = DEFAULT_CONTEXT) -> Feed:
    """
    Evaluate a query over all members; x: predicates read Member.hidden.

    Raises:
        UnknownHiddenField: an x: selector names a field no member carries and none is declared
        CrossFeedFnHere: the query contains cooccur
    """
    if q.uses("cooccur"):
        raise CrossFeedFnHere("cooccur joins feeds and needs the aggregator")

    known = set(c.hidden_fields())
    for p in predicates(q.filter):
        if p.selector.namespace == "x" and p.selector.path not in known:
            raise UnknownHiddenField(f"unknown hidden field x:{p.selector.path}")

    hidden = {m.entry.id: m.hidden for m in c.members}
    feed = _base_feed(c, member_entries(c), [Link(c.meta.self_href, "self")])
    return eval_query(q, feed, replace(ctx, hidden=hidden))


class CollectionStore:
    """
    Holds the current Collection snapshot.

    Readers take ``snapshot`` and work on that immutable value; writers
    serialize on a lock and swap in the new state.
    """

    def __init__(self, collection: Collection):
        self._collection = collection
        self._lock = threading.Lock()

    @property
    def snapshot(self) -> Collection:
        return self._collection

    def upsert(self, member: Member) -> Collection:
        with self._lock:
            before = len(self._collection.sealed)
            self._collection = upsert_member(self._collection, member)
            if len(self._collection.sealed) > before:
                print(f"✅ Sealed archive {len(self._collection.sealed)} of {self._collection.name}")
            return self._collection


# --- Files -------------------------------------------------------------------

_TSV_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n"}
_TSV_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n"}


def escape_tsv(value: str) -> str:
    return "".join(_TSV_ESCAPES.get(ch, ch) for ch in value)


def unescape_tsv(value: str) -> str:
    return re.sub(r"\\(.)", lambda m: _TSV_UNESCAPES.get(m.group(1), m.group(0)), value)


def collection_paths(directory: str, name: str) -> Tuple[str, str]:
    return (
        os.path.join(directory, f"{name}.atom"),
        os.path.join(directory, f"{name}.hidden.tsv"),
    )


def save_collection(c: Collection, directory: str) -> Tuple[str, str]:
    """
    Write ``<name>.atom`` (members in insertion order) and ``<name>.hidden.tsv``.

    Returns:
        The two file paths
    """
    atom_path, tsv_path = collection_paths(directory, c.name)
    links = [Link(c.meta.self_href, "self")] if c.meta.href else []
    feed = _base_feed(c, (m.entry for m in c.members), links)
    with open(atom_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_feed(feed))

    with open(tsv_path, "w", encoding="utf-8", newline="\n") as f:
        for member in c.members:
            for key in sorted(member.hidden):
                f.write(f"{escape_tsv(member.entry.id)}\t{escape_tsv(key)}\t{escape_tsv(member.hidden[key])}\n")
    return atom_path, tsv_path


def _read_hidden(tsv_path: str) -> Dict[str, Dict[str, str]]:
    hidden: Dict[str, Dict[str, str]] = {}
    if not os.path.exists(tsv_path):
        return hidden
    with open(tsv_path, encoding="utf-8", newline="\n") as f:
        for number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CollectionError(f"{tsv_path}:{number}: expected id, field and value separated by TAB")
            entry_id, key, value = (unescape_tsv(p) for p in parts)
            hidden.setdefault(entry_id, {})[key] = value
    return hidden


def load_collection(atom_path: str, hidden_path: Optional[str] = None, name: Optional[str] = None,
                    page_size: int = 10, archive_size: int = 10,
                    declared_fields: Iterable[str] = ()) -> Collection:
    """
    Load a collection saved by save_collection.

    The hidden-field file defaults to the ``.hidden.tsv`` sibling of the Atom
    file and the name to the Atom file's base name.
    Members are replayed in file order, so archive blocks are rebuilt from
    the stored versions.

    Raises:
        FileNotFoundError: the Atom file does not exist
        CollectionError: the hidden-field file is malformed or names unknown ids
    """
    stem = os.path.basename(atom_path)
    stem = stem[:-len(".atom")] if stem.endswith(".atom") else stem
    name = name or stem
    tsv_path = hidden_path or os.path.join(os.path.dirname(atom_path), f"{stem}.hidden.tsv")
    with open(atom_path, "rb") as f:
        feed = parse_feed(f.read(), strict=True)
    hidden = _read_hidden(tsv_path)

    unknown = set(hidden) - {e.id for e in feed.entries}
    if unknown:
        raise CollectionError(f"{tsv_path}: hidden fields for unknown entries {sorted(unknown)}")

    href = next((link.href for link in feed.links if link.rel == "self"), "")
    meta = FeedMeta(id=feed.id, title=feed.title, authors=feed.authors, updated=feed.updated, href=href)
    collection = new_collection(name, meta, page_size, archive_size, declared_fields)
    for entry in feed.entries:
        collection = upsert_member(collection, Member(entry, hidden.get(entry.id, {})))

    print(f"✅ Loaded collection {name}: {len(collection.members)} members")
    return collection
