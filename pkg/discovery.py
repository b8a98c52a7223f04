"""Query capability documents and in-feed discovery links."""
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Tuple, Union

from lxml import etree

from atom_model import Feed, Link, MalformedXml
from query_language import (
    ATOM_SELECTORS,
    FUNCTION_ARITIES,
    GEO_POSITION,
    OPERATORS,
    SHAPING_PARAMS,
)

CAPABILITIES_NS = "http://ns.feedql.dev/capabilities"
CAPABILITIES_REL = "http://ns.feedql.dev/rel/capabilities"

SCOPES = ("feed", "collection")
TIERS = ("open", "keyed")


class CapabilitiesError(ValueError):
    """A capability document is well-formed XML but not a valid document."""


class UnknownScope(CapabilitiesError):
    pass


@dataclass(frozen=True)
class SelectorCapability:
    name: str
    scope: str = "feed"


@dataclass(frozen=True)
class FunctionCapability:
    name: str
    arity: int


@dataclass(frozen=True)
class Capabilities:
    selectors: Tuple[SelectorCapability, ...] = ()
    operators: Tuple[str, ...] = ()
    functions: Tuple[FunctionCapability, ...] = ()
    shaping: Tuple[str, ...] = ()
    tier: str = "open"

    @property
    def keyed(self) -> bool:
        return self.tier == "keyed"

    def hidden_fields(self) -> Tuple[str, ...]:
        """Names of the collection-scoped (x:) fields advertised."""
        return tuple(s.name[2:] for s in self.selectors if s.scope == "collection")


def _unique(items: Iterable) -> tuple:
    return tuple(dict.fromkeys(items))


def full_capabilities(hidden_fields: Iterable[str] = (), tier: str = "open") -> Capabilities:
    """Capabilities listing every feature of the query language."""
    selectors = [SelectorCapability(name) for name in ATOM_SELECTORS]
    selectors += [
        SelectorCapability(str(GEO_POSITION)),
        SelectorCapability("link(*).href"),
        SelectorCapability("link(*).type"),
    ]
    selectors += [SelectorCapability(f"x:{name}", "collection") for name in hidden_fields]
    return Capabilities(
        selectors=_unique(selectors),
        operators=tuple(OPERATORS.values()),
        functions=tuple(
            FunctionCapability(name, arity)
            for name, arities in FUNCTION_ARITIES.items()
            for arity in arities
        ),
        shaping=SHAPING_PARAMS,
        tier=tier,
    )


def feed_scope_only(caps: Capabilities) -> Capabilities:
    """Drop collection-scoped selectors (what an intermediary can answer)."""
    return replace(caps, selectors=tuple(s for s in caps.selectors if s.scope == "feed"))


def capability_violations(caps: Capabilities) -> list:
    """Problems that make caps an invalid document; empty when it is valid."""
    problems = []
    for s in caps.selectors:
        if s.scope not in SCOPES:
            problems.append(f"selector {s.name}: unknown scope {s.scope!r}")
        elif (s.scope == "collection") != s.name.startswith("x:"):
            problems.append(f"selector {s.name}: scope collection is only for x: selectors")
    if caps.tier not in TIERS:
        problems.append(f"unknown tier {caps.tier!r}")
    for name, values in (("selector", caps.selectors), ("operator", caps.operators),
                         ("function", caps.functions), ("shaping", caps.shaping)):
        if len(set(values)) != len(values):
            problems.append(f"duplicate {name} entries")
    return problems


def serialize_capabilities(caps: Capabilities) -> str:
    """Render the capability document served at a collection's capability link."""
    problems = capability_violations(caps)
    if problems:
        raise CapabilitiesError("; ".join(problems))
    root = etree.Element(f"{{{CAPABILITIES_NS}}}capabilities", nsmap={None: CAPABILITIES_NS})
    for s in caps.selectors:
        etree.SubElement(root, f"{{{CAPABILITIES_NS}}}selector", name=s.name, scope=s.scope)
    for name in caps.operators:
        etree.SubElement(root, f"{{{CAPABILITIES_NS}}}operator", name=name)
    for fn in caps.functions:
        etree.SubElement(root, f"{{{CAPABILITIES_NS}}}function", name=fn.name, arity=str(fn.arity))
    for name in caps.shaping:
        etree.SubElement(root, f"{{{CAPABILITIES_NS}}}shaping", name=name)
    etree.SubElement(root, f"{{{CAPABILITIES_NS}}}tier").text = caps.tier
    return etree.tostring(root, xml_declaration=True, encoding="utf-8", pretty_print=True).decode("utf-8")


def parse_capabilities(xml: Union[str, bytes]) -> Capabilities:
    """
    Parse a capability document.

    Raises:
        MalformedXml: not well-formed, or not a capabilities document
        UnknownScope: a selector scope other than feed or collection
        CapabilitiesError: any other structural problem, including a
            collection scope on a selector outside x:
    """
    if isinstance(xml, str):
        xml = xml.encode("utf-8")
    parser = etree.XMLParser(resolve_entities=False, no_network=True, remove_comments=True)
    try:
        root = etree.fromstring(xml, parser)
    except etree.XMLSyntaxError as e:
        raise MalformedXml(f"not well-formed XML: {e.msg}", position=e.position)
    if root.tag != f"{{{CAPABILITIES_NS}}}capabilities":
        raise MalformedXml(f"root element is {root.tag}, expected capabilities")

    selectors, operators, functions, shaping = [], [], [], []
    tier = "open"
    for child in root:
        tag = etree.QName(child).localname
        name = child.get("name", "")
        if tag == "selector":
            scope = child.get("scope", "feed")
            if scope not in SCOPES:
                raise UnknownScope(f"selector {name}: unknown scope {scope!r}")
            selectors.append(SelectorCapability(name, scope))
        elif tag == "operator":
            operators.append(name)
        elif tag == "function":
            try:
                functions.append(FunctionCapability(name, int(child.get("arity", ""))))
            except ValueError:
                raise CapabilitiesError(f"function {name}: arity is not an integer")
        elif tag == "shaping":
            shaping.append(name)
        elif tag == "tier":
            tier = (child.text or "").strip()
            if tier not in TIERS:
                raise CapabilitiesError(f"unknown tier {tier!r}")

    caps = Capabilities(
        selectors=_unique(selectors),
        operators=_unique(operators),
        functions=_unique(functions),
        shaping=_unique(shaping),
        tier=tier,
    )
    problems = capability_violations(caps)
    if problems:
        raise CapabilitiesError("; ".join(problems))
    return caps


def embed_capability_link(feed: Feed, caps_uri: str) -> Feed:
    """Point a feed at its capability document, replacing any earlier link."""
    links = tuple(link for link in feed.links if link.rel != CAPABILITIES_REL)
    return replace(feed, links=links + (Link(href=caps_uri, rel=CAPABILITIES_REL, type="application/xml"),))


def discover_from_feed(feed: Feed) -> Optional[str]:
    """The capability document URI a feed advertises, if any."""
    for link in feed.links:
        if link.rel == CAPABILITIES_REL:
            return link.href
    return None
