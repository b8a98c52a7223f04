"""HTTP client for feeds, capability documents and query endpoints."""
import threading
from dataclasses import replace
from typing import Iterable, List, Optional, Sequence, Tuple
from urllib.parse import urljoin, urlsplit, urlunsplit

import requests

import config
from aggregator import SourceUnavailable, dedupe_entries
from atom_model import AtomError, Feed, parse_feed, with_entries
from discovery import Capabilities, CapabilitiesError, discover_from_feed, parse_capabilities

KEY_HEADER = "X-FeedQL-Key"
# Upper bound on pages followed in one walk
MAX_PAGES = 1000


class FetchError(RuntimeError):
    """Transport failure: the server could not be reached or the connection broke."""

    def __init__(self, url: str, reason: str):
        super().__init__(f"{url}: {reason}")
        self.url = url
        self.reason = reason


class HttpStatusError(FetchError):
    """The server answered with a non-2xx status."""

    def __init__(self, url: str, status_code: int, detail=None):
        super().__init__(url, f"HTTP {status_code}")
        self.status_code = status_code
        self.detail = detail


def _detail(response):
    try:
        return response.json().get("detail")
    except (ValueError, AttributeError):
        return response.text or None


def http_get(url: str, session=None, params: Optional[Sequence[Tuple[str, str]]] = None,
             key: Optional[str] = None, timeout: float = None):
    """
    GET a URL and return the response.

    Args:
        session: Anything with a requests-style ``get`` (defaults to ``requests``)
        params: Query parameters as (name, value) pairs
        key: API key sent in the X-FeedQL-Key header

    Raises:
        FetchError: transport failure
        HttpStatusError: non-2xx answer
    """
    session = session or requests
    headers = {KEY_HEADER: key} if key else {}
    try:
        response = session.get(
            url,
            params=list(params or []),
            headers=headers,
            timeout=timeout or config.FETCH_TIMEOUT,
        )
    except requests.RequestException as e:
        raise FetchError(url, str(e))
    if not 200 <= response.status_code < 300:
        raise HttpStatusError(url, response.status_code, _detail(response))
    return response


def fetch_feed(url: str, session=None, params=None, key: Optional[str] = None) -> Feed:
    """Fetch and parse one Atom document."""
    return parse_feed(http_get(url, session, params, key).content)


def fetch_capabilities(url: str, session=None, key: Optional[str] = None) -> Capabilities:
    return parse_capabilities(http_get(url, session, key=key).content)


def capabilities_uri(feed: Feed, feed_url: str) -> Optional[str]:
    """Absolute URI of the capability document a feed links to."""
    href = discover_from_feed(feed)
    return urljoin(feed_url, href) if href else None


def discover_capabilities(feed_url: str, session=None, key: Optional[str] = None) -> Optional[Capabilities]:
    """
    Fetch a feed and follow its capability link.

    Returns:
        The advertised Capabilities, or None when the feed has no capability link
    """
    uri = capabilities_uri(fetch_feed(feed_url, session, key=key), feed_url)
    if uri is None:
        return None
    return fetch_capabilities(uri, session, key)


def query_endpoint(feed_url: str) -> str:
    """The query endpoint that sits next to a feed URL."""
    parts = urlsplit(feed_url)
    return urlunsplit((parts.scheme, parts.netloc, parts.path.rstrip("/") + "/query", "", ""))


def walk_feed(url: str, rels: Iterable[str], session=None, key: Optional[str] = None,
              max_pages: int = MAX_PAGES) -> Feed:
    """
    Fetch a feed and every document reachable over the given link relations.

    Entries are merged in visiting order; an id seen more than once keeps its
    latest updated version.
    """
    rels = tuple(rels)
    first = None
    entries = []
    pending, seen = [url], set()
    while pending and len(seen) < max_pages:
        current = pending.pop(0)
        if current in seen:
            continue
        seen.add(current)
        feed = fetch_feed(current, session, key=key)
        first = first or feed
        entries += feed.entries
        for link in feed.links:
            if link.rel in rels:
                pending.append(urljoin(current, link.href))
    merged = with_entries(first, dedupe_entries(entries))
    return replace(merged, links=tuple(link for link in first.links if link.rel not in rels))


def fetch_all_pages(url: str, session=None, key: Optional[str] = None) -> Feed:
    """The current feed plus every page after it."""
    return walk_feed(url, ("next",), session, key)


def fetch_history(url: str, session=None, key: Optional[str] = None) -> Feed:
    """Pages plus the archive chain: the complete history of a feed."""
    return walk_feed(url, ("next", "prev-archive"), session, key)


class HttpFetcher:
    """
    Aggregator transport over HTTP.

    With nothing pushed a source is fetched as a plain feed (all pages);
    pushed filters go to the source's query endpoint as ``q``.
    """

    def __init__(self, session=None, key: Optional[str] = None):
        self.session = session
        self.key = key
        self.transferred = 0
        self._lock = threading.Lock()

    def fetch(self, origin: str, params: List[Tuple[str, str]]) -> Feed:
        try:
            if params:
                feed = fetch_feed(query_endpoint(origin), self.session, params, self.key)
            else:
                feed = fetch_all_pages(origin, self.session, self.key)
        except (FetchError, AtomError) as e:
            raise SourceUnavailable(origin, str(e))
        with self._lock:
            self.transferred += len(feed.entries)
        return feed

    def capabilities(self, origin: str) -> Optional[Capabilities]:
        """Discovered capabilities of a source; None when it advertises none."""
        try:
            return discover_capabilities(origin, self.session, self.key)
        except (FetchError, AtomError, CapabilitiesError) as e:
            raise SourceUnavailable(origin, str(e))
