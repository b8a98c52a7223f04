"""Configuration: environment settings and the service config file."""
import configparser
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

# Load environment variables from .env file if it exists
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass  # python-dotenv not installed, skip loading .env file


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending section/key or path."""


def _env_number(name: str, default: str, kind=int):
    raw = os.environ.get(name, default).strip()
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected a number, got {raw!r}")


# Server
HOST = os.environ.get("FEEDQL_HOST", "127.0.0.1").strip()
PORT = _env_number("FEEDQL_PORT", "8000")
BASE_URI = os.environ.get("FEEDQL_BASE_URI", "").strip().rstrip("/")
# SQLite request log; empty disables logging
REQUEST_LOG = os.environ.get("FEEDQL_REQUEST_LOG", "").strip()

# Client
FETCH_TIMEOUT = _env_number("FEEDQL_FETCH_TIMEOUT", "10", float)
FETCH_WORKERS = _env_number("FEEDQL_FETCH_WORKERS", "4")
FEEDSET_BASE = os.environ.get("FEEDQL_FEEDSET_BASE", "urn:feedql:feedset").strip()
API_KEY = os.environ.get("FEEDQL_KEY", "").strip()

TIERS = ("open", "keyed")
COLLECTION_KEYS = ("atom", "hidden", "page_size", "archive_size", "tier", "keys")
FEEDSET_KEYS = ("sources", "tier", "keys")
SERVICE_KEYS = ("bind", "base_uri", "request_log")


@dataclass(frozen=True)
class CollectionConfig:
    name: str
    atom: str
    hidden: Optional[str] = None
    page_size: int = 10
    archive_size: int = 10
    tier: str = "open"
    keys: Tuple[str, ...] = ()


@dataclass(frozen=True)
class FeedsetConfig:
    name: str
    sources: Tuple[str, ...]
    tier: str = "open"
    keys: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ServiceConfig:
    host: str = HOST
    port: int = PORT
    base_uri: str = BASE_URI
    request_log: str = REQUEST_LOG
    collections: Dict[str, CollectionConfig] = field(default_factory=dict)
    feedsets: Dict[str, FeedsetConfig] = field(default_factory=dict)

    @property
    def public_base(self) -> str:
        """Absolute URI prefix for links in served feeds."""
        return self.base_uri or f"http://{self.host}:{self.port}"


def _split_list(value: str) -> Tuple[str, ...]:
    return tuple(v for v in value.replace(",", " ").split() if v)


def _positive(section: str, key: str, value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
    if number < 1:
        raise ConfigError(f"[{section}] {key}: must be >= 1, got {number}")
    return number


def _tier(section: str, values) -> Tuple[str, Tuple[str, ...]]:
    tier = values.get("tier", "open").strip()
    if tier not in TIERS:
        raise ConfigError(f"[{section}] tier: expected open or keyed, got {tier!r}")
    keys = _split_list(values.get("keys", ""))
    if tier == "keyed" and not keys:
        raise ConfigError(f"[{section}] keys: tier keyed needs at least one key")
    return tier, keys


def _check_keys(section: str, values, allowed: Tuple[str, ...]):
    for key in values:
        if key not in allowed:
            raise ConfigError(f"[{section}] {key}: unknown key")


def _resolve(base_dir: str, section: str, key: str, path: str) -> str:
    path = path.strip()
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    if not os.path.exists(path):
        raise ConfigError(f"[{section}] {key}: no such file {path}")
    return path


def load_service_config(path: str) -> ServiceConfig:
    """
    Parse a service config file.

    Sections are ``[service]``, ``[collection <name>]`` and ``[feedset <name>]``;
    relative file paths resolve against the config file's directory and
    environment settings fill in anything ``[service]`` leaves out.

    Raises:
        ConfigError: unreadable file, duplicate section, unknown key or bad value
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}")
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e.message}")

    base_dir = os.path.dirname(os.path.abspath(path))
    service = {"host": HOST, "port": PORT, "base_uri": BASE_URI, "request_log": REQUEST_LOG}
    collections: Dict[str, CollectionConfig] = {}
    feedsets: Dict[str, FeedsetConfig] = {}

    for section in parser.sections():
        values = parser[section]
        kind, _, name = section.partition(" ")
        name = name.strip()

        if section == "service":
            _check_keys(section, values, SERVICE_KEYS)
            if "bind" in values:
                host, sep, port = values["bind"].strip().rpartition(":")
                if not sep or not host:
                    raise ConfigError(f"[service] bind: expected host:port, got {values['bind']!r}")
                service["host"], service["port"] = host, _positive(section, "bind", port)
            if "base_uri" in values:
                service["base_uri"] = values["base_uri"].strip().rstrip("/")
            if "request_log" in values:
                service["request_log"] = values["request_log"].strip()

        elif kind == "collection" and name:
            _check_keys(section, values, COLLECTION_KEYS)
            if "atom" not in values:
                raise ConfigError(f"[{section}] atom: missing")
            if name in collections:
                raise ConfigError(f"[{section}]: duplicate collection name {name}")
            tier, keys = _tier(section, values)
            collections[name] = CollectionConfig(
                name=name,
                atom=_resolve(base_dir, section, "atom", values["atom"]),
                hidden=_resolve(base_dir, section, "hidden", values["hidden"]) if "hidden" in values else None,
                page_size=_positive(section, "page_size", values.get("page_size", "10")),
                archive_size=_positive(section, "archive_size", values.get("archive_size", "10")),
                tier=tier,
                keys=keys,
            )

        elif kind == "feedset" and name:
            _check_keys(section, values, FEEDSET_KEYS)
            sources = _split_list(values.get("sources", ""))
            if not sources:
                raise ConfigError(f"[{section}] sources: at least one origin URI needed")
            if len(set(sources)) != len(sources):
                raise ConfigError(f"[{section}] sources: origin listed twice")
            tier, keys = _tier(section, values)
            feedsets[name] = FeedsetConfig(name=name, sources=sources, tier=tier, keys=keys)

        else:
            raise ConfigError(f"[{section}]: unknown section")

    return ServiceConfig(collections=collections, feedsets=feedsets, **service)
