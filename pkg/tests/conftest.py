from urllib.parse import urlsplit

import pytest
import requests
from fastapi.testclient import TestClient

from api import create_app
from config import CollectionConfig, FeedsetConfig, ServiceConfig
from feed_factory import category_feed, numbered_collection, photo_collection
from collection_backend import FeedMeta, Member, new_collection, upsert_member

NEWS_KEY = "s3cret"


class RoutingSession:
    """Routes requests-style GETs to in-process apps by host; unknown hosts fail like a dead server."""

    def __init__(self):
        self.clients = {}
        self.calls = []

    def mount(self, host: str, app) -> TestClient:
        client = TestClient(app)
        self.clients[host] = client
        return client

    def get(self, url, params=None, headers=None, timeout=None):
        host = urlsplit(url).netloc
        self.calls.append((url, list(params or [])))
        if host not in self.clients:
            raise requests.ConnectionError(f"connection refused: {host}")
        return self.clients[host].get(url, params=params, headers=headers)


def collection_from_feed(name, feed, page_size=10, archive_size=10):
    meta = FeedMeta(id=feed.id, title=feed.title)
    collection = new_collection(name, meta, page_size, archive_size)
    for entry in feed.entries:
        collection = upsert_member(collection, Member(entry))
    return collection


def service_config(host, collections=None, feedsets=None):
    return ServiceConfig(
        host=host,
        port=80,
        base_uri=f"http://{host}",
        request_log="",
        collections=collections or {},
        feedsets=feedsets or {},
    )


@pytest.fixture
def session():
    return RoutingSession()


@pytest.fixture
def news_service(session):
    """Open collection 'news' (the six labeled entries) and 25-member 'archive' at news.test."""
    collections = {
        "news": collection_from_feed("news", category_feed()),
        "archive": numbered_collection(25, name="archive"),
        "photos": photo_collection(),
    }
    app = create_app(service_config("news.test"), collections)
    return session.mount("news.test", app)


@pytest.fixture
def keyed_service(session):
    config = service_config("keyed.test", collections={
        "news": CollectionConfig(name="news", atom="unused.atom", tier="keyed", keys=(NEWS_KEY,)),
    })
    app = create_app(config, {"news": collection_from_feed("news", category_feed())})
    return session.mount("keyed.test", app)


@pytest.fixture
def feedset_service(session):
    config = service_config("hub.test", feedsets={
        "local": FeedsetConfig(name="local", sources=("http://a.test/feeds/a", "http://b.test/feeds/b")),
    })
    app = create_app(config, {}, session=session)
    return session.mount("hub.test", app)
