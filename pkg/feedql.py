#!/usr/bin/env python3
"""
Command-line client and server launcher.

Exit codes: 0 success, 1 usage or config error, 2 query rejected
(locally, 400 or 401), 3 transport failure.
"""
import argparse
import sys
from typing import List, Optional, Tuple

import config
from aggregator import AggregationError, SourceUnavailable, execute_plan, plan_query
from atom_model import AtomError, Feed, MalformedXml, serialize_feed
from collection_backend import CollectionError
from config import ConfigError, load_service_config
from discovery import Capabilities, CapabilitiesError, feed_scope_only, full_capabilities
from feed_client import (
    FetchError,
    HttpFetcher,
    HttpStatusError,
    discover_capabilities,
    fetch_feed,
    fetch_history,
    query_endpoint,
)
from query_language import (
    QueryError,
    QuerySyntaxError,
    parse_uri_params,
    serialize_query,
    validate_against_capabilities,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_REJECTED = 2
EXIT_TRANSPORT = 3

# (flag, URI parameter)
QUERY_FLAGS = (
    ("--q", "q"),
    ("--xq", "xq"),
    ("--sort-by", "sort-by"),
    ("--order", "order"),
    ("--group-by", "group-by"),
    ("--max-results", "max-results"),
    ("--start-index", "start-index"),
)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _err(message: str):
    print(message, file=sys.stderr)


def _write_feed(feed: Feed):
    sys.stdout.write(serialize_feed(feed))


def _key(args) -> Optional[str]:
    return args.key or config.API_KEY or None


def _query_params(args) -> List[Tuple[str, str]]:
    params = []
    for flag, name in QUERY_FLAGS:
        value = getattr(args, flag[2:].replace("-", "_"))
        if value is not None:
            params.append((name, value))
    return params


def _report_rejection(e: HttpStatusError):
    _err(f"❌ Rejected with HTTP {e.status_code}")
    if e.detail is not None:
        _err(f"   {e.detail}")


def _report_syntax(e: QueryError):
    if isinstance(e, QuerySyntaxError):
        _err(f"❌ Query syntax error at position {e.position}: {e}")
    else:
        _err(f"❌ Bad query: {e}")


def _report_unsupported(unsupported):
    _err("❌ Query uses unsupported features:")
    for feature in unsupported:
        _err(f"   {feature}")


def cmd_fetch(args, session=None) -> int:
    """Print a feed, optionally merged with its whole page and archive history."""
    try:
        if args.follow_archives:
            feed = fetch_history(args.url, session, _key(args))
        else:
            feed = fetch_feed(args.url, session, key=_key(args))
    except HttpStatusError as e:
        _report_rejection(e)
        return EXIT_REJECTED
    except FetchError as e:
        _err(f"❌ {e}")
        return EXIT_TRANSPORT
    except AtomError as e:
        _err(f"❌ Not a valid Atom feed: {e}")
        return EXIT_REJECTED
    _write_feed(feed)
    return EXIT_OK


def capability_rows(caps: Capabilities) -> List[Tuple[str, str, str]]:
    rows = [("selector", s.name, s.scope) for s in caps.selectors]
    rows += [("operator", name, "") for name in caps.operators]
    rows += [("function", f"{fn.name}/{fn.arity}", "") for fn in caps.functions]
    rows += [("shaping", name, "") for name in caps.shaping]
    rows.append(("tier", caps.tier, ""))
    return rows


def cmd_discover(args, session=None) -> int:
    """Print the query capabilities a feed advertises as a table."""
    try:
        caps = discover_capabilities(args.url, session, _key(args))
    except HttpStatusError as e:
        _report_rejection(e)
        return EXIT_REJECTED
    except FetchError as e:
        _err(f"❌ {e}")
        return EXIT_TRANSPORT
    except MalformedXml as e:
        where = f" at line {e.position[0]}, column {e.position[1]}" if e.position else ""
        _err(f"❌ Malformed document{where}: {e}")
        return EXIT_REJECTED
    except (AtomError, CapabilitiesError) as e:
        _err(f"❌ Invalid document: {e}")
        return EXIT_REJECTED

    if caps is None:
        print("no query capabilities")
        return EXIT_OK

    rows = capability_rows(caps)
    width = max(len(name) for _, name, _ in rows)
    for kind, name, scope in rows:
        print(f"{kind:<9} {name:<{width}} {scope}".rstrip())
    return EXIT_OK


def cmd_query(args, session=None) -> int:
    """Validate a query against discovered capabilities, then send it."""
    try:
        query = parse_uri_params(_query_params(args))
    except QueryError as e:
        _report_syntax(e)
        return EXIT_REJECTED

    key = _key(args)
    try:
        caps = discover_capabilities(args.url, session, key)
        if caps is None:
            _err("no query capabilities")
            return EXIT_REJECTED

        unsupported = validate_against_capabilities(query, caps)
        if unsupported:
            _report_unsupported(unsupported)
            return EXIT_REJECTED

        feed = fetch_feed(query_endpoint(args.url), session, serialize_query(query), key)
    except HttpStatusError as e:
        _report_rejection(e)
        return EXIT_REJECTED
    except FetchError as e:
        _err(f"❌ {e}")
        return EXIT_TRANSPORT
    except (AtomError, CapabilitiesError) as e:
        _err(f"❌ Invalid document: {e}")
        return EXIT_REJECTED

    _write_feed(feed)
    return EXIT_OK


def cmd_aggregate(args, session=None) -> int:
    """Aggregate sources client-side and evaluate the query over the feedset."""
    try:
        query = parse_uri_params(_query_params(args))
    except QueryError as e:
        _report_syntax(e)
        return EXIT_REJECTED

    # Hidden collection fields are out of reach once entries leave their collection
    unsupported = validate_against_capabilities(query, feed_scope_only(full_capabilities()))
    if unsupported:
        _report_unsupported(unsupported)
        return EXIT_REJECTED

    fetcher = HttpFetcher(session=session, key=_key(args))
    sources = []
    for origin in args.source:
        try:
            sources.append((origin, fetcher.capabilities(origin)))
        except SourceUnavailable as e:
            if not args.partial:
                _err(f"❌ {e}")
                return EXIT_TRANSPORT
            sources.append((origin, None))

    try:
        plan = plan_query(query, sources)
        feed = execute_plan(
            plan,
            fetcher,
            partial=args.partial,
            max_workers=config.FETCH_WORKERS,
            base_uri=args.base_uri or config.FEEDSET_BASE,
        )
    except SourceUnavailable as e:
        _err(f"❌ {e}")
        return EXIT_TRANSPORT
    except AggregationError as e:
        _err(f"❌ {e}")
        return EXIT_REJECTED

    _write_feed(feed)
    return EXIT_OK


def cmd_serve(args, session=None) -> int:
    """Load the config and its collections, then serve until interrupted."""
    from api import load_collections, serve

    try:
        service = load_service_config(args.config)
        collections = load_collections(service)
    except ConfigError as e:
        _err(f"❌ Config error: {e}")
        return EXIT_USAGE
    except (OSError, AtomError, CollectionError) as e:
        _err(f"❌ Could not load collection: {e}")
        return EXIT_USAGE

    serve(service, collections)
    return EXIT_OK


def _add_query_flags(parser: argparse.ArgumentParser):
    for flag, name in QUERY_FLAGS:
        parser.add_argument(flag, default=None, help=f"'{name}' query parameter")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="feedql", description="Query-enabled Atom feeds")
    commands = parser.add_subparsers(dest="command", required=True)

    fetch = commands.add_parser("fetch", help="print a feed")
    fetch.add_argument("url")
    fetch.add_argument("--follow-archives", action="store_true",
                       help="merge every page and archived feed into one complete feed")
    fetch.add_argument("--key", help="API key (default: FEEDQL_KEY)")
    fetch.set_defaults(handler=cmd_fetch)

    discover = commands.add_parser("discover", help="show a feed's query capabilities")
    discover.add_argument("url")
    discover.add_argument("--key", help="API key (default: FEEDQL_KEY)")
    discover.set_defaults(handler=cmd_discover)

    query = commands.add_parser("query", help="query a feed through its query endpoint")
    query.add_argument("url")
    _add_query_flags(query)
    query.add_argument("--key", help="API key (default: FEEDQL_KEY)")
    query.set_defaults(handler=cmd_query)

    aggregate = commands.add_parser("aggregate", help="aggregate sources into a feedset and query it")
    aggregate.add_argument("--source", action="append", required=True, help="source feed URL (repeatable)")
    _add_query_flags(aggregate)
    aggregate.add_argument("--partial", action="store_true",
                           help="skip unavailable sources (lossy: results may be incomplete)")
    aggregate.add_argument("--key", help="API key (default: FEEDQL_KEY)")
    aggregate.add_argument("--base-uri", help="base URI for the feedset id (default: FEEDQL_FEEDSET_BASE)")
    aggregate.set_defaults(handler=cmd_aggregate)

    serve = commands.add_parser("serve", help="run the feed service")
    serve.add_argument("--config", required=True, help="service config file")
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None, session=None) -> int:
    args = build_parser().parse_args(argv)
    return args.handler(args, session)


if __name__ == "__main__":
    sys.exit(main())
