"""FastAPI service for query-enabled feeds.

Plain feeds and archives are public and cacheable; the query endpoints are
the keyed tier and are never shared-cacheable.
"""
import hashlib
import hmac
import time
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

from fastapi import FastAPI, HTTPException, Request, Response
from pydantic import BaseModel

import config
from aggregator import AggregationError, SourceUnavailable, execute_plan, plan_query
from atom_model import Feed, serialize_feed
from collection_backend import (
    ArchiveOutOfRange,
    Collection,
    CollectionError,
    CollectionStore,
    PageOutOfRange,
    archive_is_full,
    archived_feed,
    collection_capabilities,
    collection_query,
    current_feed,
    load_collection,
    paged_feed,
)
from config import ServiceConfig
from database import get_stats, init_database, log_api_request
from discovery import Capabilities, embed_capability_link, feed_scope_only, full_capabilities, serialize_capabilities
from eval_engine import EvalError
from feed_client import KEY_HEADER, HttpFetcher
from query_language import (
    BadParam,
    Query,
    QueryError,
    QuerySyntaxError,
    parse_uri_params,
    validate_against_capabilities,
)

ATOM_TYPE = "application/atom+xml"
XML_TYPE = "application/xml"

FEED_CACHE = "public, max-age=60"
ARCHIVE_CACHE = "public, max-age=31536000, immutable"
CAPABILITIES_CACHE = "public, max-age=300"
QUERY_CACHE = "private, no-cache"


class HealthResponse(BaseModel):
    status: str
    message: str


@dataclass
class ServedCollection:
    store: CollectionStore
    tier: str = "open"
    keys: Tuple[str, ...] = ()


@dataclass
class ServedFeedset:
    sources: Tuple[str, ...]
    tier: str = "open"
    keys: Tuple[str, ...] = ()


def make_etag(body: bytes) -> str:
    return '"' + hashlib.sha256(body).hexdigest() + '"'


def etag_matches(if_none_match: Optional[str], etag: str) -> bool:
    """Strong comparison against an If-None-Match list."""
    if not if_none_match:
        return False
    candidates = [c.strip() for c in if_none_match.split(",")]
    return "*" in candidates or etag in candidates


def cached_response(request: Request, body: str, media_type: str, cache_control: str) -> Response:
    """200 with ETag, or 304 when the client already holds this body."""
    payload = body.encode("utf-8")
    etag = make_etag(payload)
    headers = {"ETag": etag, "Cache-Control": cache_control}
    if etag_matches(request.headers.get("if-none-match"), etag):
        return Response(status_code=304, headers=headers)
    return Response(content=payload, media_type=media_type, headers=headers)


def check_key(tier: str, keys: Tuple[str, ...], presented: Optional[str]):
    if tier != "keyed":
        return
    if presented and any(hmac.compare_digest(presented.encode(), k.encode()) for k in keys):
        return
    raise HTTPException(
        status_code=401,
        detail={"error": "unauthorized", "message": f"a valid {KEY_HEADER} header is required"},
        headers={"WWW-Authenticate": KEY_HEADER},
    )


def parse_request_query(request: Request, caps: Capabilities) -> Query:
    """Parse URI params and check them against capabilities; 400 on any problem."""
    try:
        query = parse_uri_params(request.query_params.multi_items())
    except QuerySyntaxError as e:
        raise HTTPException(status_code=400, detail={
            "error": "syntax",
            "message": str(e),
            "position": e.position,
            "expected": list(e.expected),
        })
    except BadParam as e:
        raise HTTPException(status_code=400, detail={"error": "bad-param", "param": e.param, "message": str(e)})
    except QueryError as e:
        raise HTTPException(status_code=400, detail={"error": "bad-query", "message": str(e)})

    unsupported = validate_against_capabilities(query, caps)
    if unsupported:
        raise HTTPException(status_code=400, detail={
            "error": "unsupported",
            "unsupported": [str(u) for u in unsupported],
        })
    return query


def query_response(feed: Feed) -> Response:
    return Response(
        content=serialize_feed(feed).encode("utf-8"),
        media_type=ATOM_TYPE,
        headers={"Cache-Control": QUERY_CACHE, "Vary": KEY_HEADER},
    )


def load_collections(service: ServiceConfig) -> Dict[str, Collection]:
    """Load every configured collection file."""
    return {
        name: load_collection(cc.atom, cc.hidden, name, cc.page_size, cc.archive_size)
        for name, cc in service.collections.items()
    }


def create_app(service: Optional[ServiceConfig] = None, collections: Optional[Dict[str, Collection]] = None,
               session=None) -> FastAPI:
    """
    Build the service.

    Args:
        service: Service configuration (defaults to environment settings only)
        collections: Preloaded collections by name; loaded from the config files when omitted
        session: requests-style session used to reach feedset sources
    """
    service = service or ServiceConfig()
    if collections is None:
        collections = load_collections(service)
    base = service.public_base

    served: Dict[str, ServedCollection] = {}
    for name, collection in collections.items():
        cc = service.collections.get(name)
        meta = replace(collection.meta, href=f"{base}/feeds/{name}")
        served[name] = ServedCollection(
            store=CollectionStore(replace(collection, meta=meta)),
            tier=cc.tier if cc else "open",
            keys=cc.keys if cc else (),
        )
    feedsets = {
        name: ServedFeedset(fs.sources, fs.tier, fs.keys)
        for name, fs in service.feedsets.items()
    }

    app = FastAPI(
        title="FeedQL",
        description="Query-enabled Atom feeds, archives, capability documents and feedsets",
        version="1.0.0",
    )
    app.state.collections = served
    app.state.feedsets = feedsets
    app.state.service = service

    if service.request_log:
        init_database(service.request_log)

        @app.middleware("http")
        async def log_requests(request: Request, call_next):
            start_time = time.time()
            response = await call_next(request)
            response_time = (time.time() - start_time) * 1000
            log_api_request(request.url.path, request.method, response.status_code, response_time,
                            service.request_log)
            return response

    def served_collection(name: str) -> ServedCollection:
        if name not in served:
            raise HTTPException(status_code=404, detail=f"unknown collection {name}")
        return served[name]

    def served_feedset(name: str) -> ServedFeedset:
        if name not in feedsets:
            raise HTTPException(status_code=404, detail=f"unknown feedset {name}")
        return feedsets[name]

    def feedset_capabilities(fs: ServedFeedset) -> Capabilities:
        # An intermediary has no access to collection-only fields
        return feed_scope_only(full_capabilities(tier=fs.tier))

    @app.get("/health", response_model=HealthResponse)
    def health():
        """Health check endpoint."""
        return HealthResponse(status="healthy", message=f"serving {len(served)} collections")

    @app.get("/stats")
    def stats():
        """Request log totals."""
        if not service.request_log:
            return {"request_log": "disabled"}
        return get_stats(service.request_log)

    @app.get("/feeds/{name}")
    def get_feed(name: str, request: Request):
        """Current feed, or one page of it with ?page=N. Query parameters are ignored."""
        entry = served_collection(name)
        collection = entry.store.snapshot
        page = request.query_params.get("page")
        try:
            if page is None:
                feed = current_feed(collection)
            else:
                if not (page.isascii() and page.isdigit()):
                    raise HTTPException(status_code=400, detail="page must be a positive integer")
                feed = paged_feed(collection, int(page))
        except PageOutOfRange as e:
            raise HTTPException(status_code=404, detail=str(e))
        feed = embed_capability_link(feed, f"{collection.meta.self_href}/capabilities")
        return cached_response(request, serialize_feed(feed), ATOM_TYPE, FEED_CACHE)

    @app.get("/feeds/{name}/archive/{index}")
    def get_archive(name: str, index: int, request: Request):
        """Archived block; full blocks are immutable."""
        collection = served_collection(name).store.snapshot
        try:
            feed = archived_feed(collection, index)
        except ArchiveOutOfRange as e:
            raise HTTPException(status_code=404, detail=str(e))
        feed = embed_capability_link(feed, f"{collection.meta.self_href}/capabilities")
        cache = ARCHIVE_CACHE if archive_is_full(collection, index) else FEED_CACHE
        return cached_response(request, serialize_feed(feed), ATOM_TYPE, cache)

    @app.get("/feeds/{name}/capabilities")
    def get_capabilities(name: str, request: Request):
        entry = served_collection(name)
        caps = collection_capabilities(entry.store.snapshot, entry.tier)
        return cached_response(request, serialize_capabilities(caps), XML_TYPE, CAPABILITIES_CACHE)

    @app.get("/feeds/{name}/query")
    def query_feed(name: str, request: Request):
        """Collection query; the keyed tier."""
        entry = served_collection(name)
        check_key(entry.tier, entry.keys, request.headers.get(KEY_HEADER))
        collection = entry.store.snapshot
        query = parse_request_query(request, collection_capabilities(collection, entry.tier))
        try:
            feed = collection_query(collection, query)
        except (CollectionError, EvalError) as e:
            raise HTTPException(status_code=400, detail={"error": "bad-query", "message": str(e)})
        feed = embed_capability_link(feed, f"{collection.meta.self_href}/capabilities")
        return query_response(feed)

    @app.get("/feedsets/{name}/capabilities")
    def get_feedset_capabilities(name: str, request: Request):
        caps = feedset_capabilities(served_feedset(name))
        return cached_response(request, serialize_capabilities(caps), XML_TYPE, CAPABILITIES_CACHE)

    @app.get("/feedsets/{name}/query")
    def query_feedset(name: str, request: Request):
        """Aggregate the feedset's sources, pushing filters upstream where they are supported."""
        fs = served_feedset(name)
        presented = request.headers.get(KEY_HEADER)
        check_key(fs.tier, fs.keys, presented)
        query = parse_request_query(request, feedset_capabilities(fs))

        fetcher = HttpFetcher(session=session, key=presented or config.API_KEY or None)
        try:
            sources = [(origin, fetcher.capabilities(origin)) for origin in fs.sources]
            plan = plan_query(query, sources)
            feed = execute_plan(plan, fetcher, max_workers=config.FETCH_WORKERS,
                                base_uri=f"{base}/feedsets/{name}")
        except SourceUnavailable as e:
            raise HTTPException(status_code=502, detail={
                "error": "source-unavailable",
                "origin": e.origin,
                "message": str(e),
            })
        except AggregationError as e:
            raise HTTPException(status_code=400, detail={"error": "bad-query", "message": str(e)})
        print(f"✅ Feedset {name}: {len(feed.entries)} entries, {fetcher.transferred} transferred")
        feed = embed_capability_link(feed, f"{base}/feedsets/{name}/capabilities")
        return query_response(feed)

    return app


def serve(service: ServiceConfig, collections: Optional[Dict[str, Collection]] = None):
    """Run the service until interrupted."""
    import uvicorn
    app = create_app(service, collections)
    print(f"✅ Serving on http://{service.host}:{service.port}")
    uvicorn.run(app, host=service.host, port=service.port)


if __name__ == "__main__":
    serve(ServiceConfig())
