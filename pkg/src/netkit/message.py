"""NETCONF XML documents: hello, rpc, rpc-reply and rpc-error."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable

from lxml import etree

BASE_NS = "urn:ietf:params:xml:ns:netconf:base:1.0"
BASE_1_0 = "urn:ietf:params:netconf:base:1.0"
BASE_1_1 = "urn:ietf:params:netconf:base:1.1"
_CAP = "urn:ietf:params:netconf:capability:"
WRITABLE_RUNNING = _CAP + "writable-running:1.0"
CANDIDATE = _CAP + "candidate:1.0"
ROLLBACK_ON_ERROR = _CAP + "rollback-on-error:1.0"
STARTUP = _CAP + "startup:1.0"
VALIDATE_1_0 = _CAP + "validate:1.0"
VALIDATE_1_1 = _CAP + "validate:1.1"
WITH_DEFAULTS = _CAP + "with-defaults:1.0"

# What the agent actually implements. with-defaults is deliberately absent:
# the datastore always reports explicit values and has no trimming modes.
AGENT_CAPABILITIES = (
    BASE_1_0,
    BASE_1_1,
    WRITABLE_RUNNING,
    CANDIDATE,
    ROLLBACK_ON_ERROR,
    STARTUP,
    VALIDATE_1_1,
)
MANAGER_CAPABILITIES = (BASE_1_0, BASE_1_1)

ERROR_TYPES = ("transport", "rpc", "protocol", "application")
ERROR_SEVERITIES = ("error", "warning")
ERROR_TAGS = frozenset({
    "in-use", "invalid-value", "too-big", "missing-attribute", "bad-attribute",
    "unknown-attribute", "missing-element", "bad-element", "unknown-element",
    "unknown-namespace", "access-denied", "lock-denied", "resource-denied",
    "rollback-failed", "data-exists", "data-missing", "operation-not-supported",
    "operation-failed", "partial-operation", "malformed-message",
})

_PARSER = etree.XMLParser(remove_blank_text=True, resolve_entities=False, no_network=True)


def qn(tag: str, ns: str = BASE_NS) -> str:
    return f"{{{ns}}}{tag}"


def localname(el) -> str:
    return etree.QName(el).localname


def namespace(el) -> str | None:
    return etree.QName(el).namespace


class MalformedMessage(Exception):
    pass


class MalformedHello(MalformedMessage):
    pass


class MalformedReply(MalformedMessage):
    pass


class CapabilitySet:
    """Ordered, duplicate-free collection of capability URIs."""

    def __init__(self, uris: Iterable[str] = ()):
        self._uris: dict[str, None] = {}
        for uri in uris:
            uri = uri.strip()
            if uri:
                self._uris.setdefault(uri, None)

    def __iter__(self):
        return iter(self._uris)

    def __len__(self):
        return len(self._uris)

    def __contains__(self, uri):
        return uri in self._uris

    def __eq__(self, other):
        if isinstance(other, CapabilitySet):
            return list(self) == list(other)
        return NotImplemented

    def __repr__(self):
        return f"CapabilitySet({list(self)!r})"

    def supports(self, name: str) -> bool:
        """True if any URI names the capability, e.g. ``supports(":candidate")``."""
        name = name.lstrip(":")
        for uri in self._uris:
            tail = uri.split("?", 1)[0]
            if tail.endswith(":" + name) or tail.rsplit(":", 1)[0].endswith(":" + name):
                return True
        return False


@dataclass
class RpcError(Exception):
    """A structured rpc-error. Raised by operation handlers, carried in replies."""

    error_tag: str
    error_type: str = "application"
    severity: str = "error"
    error_message: str | None = None
    error_path: str | None = None
    error_info: list = field(default_factory=list)  # list of (tag, text) or elements

    def __post_init__(self):
        if self.error_tag not in ERROR_TAGS:
            raise ValueError(f"unknown error-tag {self.error_tag!r}")
        if self.error_type not in ERROR_TYPES:
            raise ValueError(f"unknown error-type {self.error_type!r}")
        if self.severity not in ERROR_SEVERITIES:
            raise ValueError(f"unknown error-severity {self.severity!r}")
        Exception.__init__(self, self.error_tag, self.error_message)

    def __str__(self):
        text = self.error_tag
        if self.error_message:
            text += f": {self.error_message}"
        if self.error_path:
            text += f" ({self.error_path})"
        return text

    def info(self, tag: str) -> str | None:
        for item in self.error_info:
            if isinstance(item, tuple) and item[0] == tag:
                return item[1]
            if not isinstance(item, tuple) and localname(item) == tag:
                return item.text
        return None

    def to_element(self):
        el = etree.Element(qn("rpc-error"), nsmap={None: BASE_NS})
        etree.SubElement(el, qn("error-type")).text = self.error_type
        etree.SubElement(el, qn("error-tag")).text = self.error_tag
        etree.SubElement(el, qn("error-severity")).text = self.severity
        if self.error_path:
            etree.SubElement(el, qn("error-path")).text = self.error_path
        if self.error_message:
            msg = etree.SubElement(el, qn("error-message"))
            msg.set("{http://www.w3.org/XML/1998/namespace}lang", "en")
            msg.text = self.error_message
        if self.error_info:
            info = etree.SubElement(el, qn("error-info"))
            for item in self.error_info:
                if isinstance(item, tuple):
                    etree.SubElement(info, qn(item[0])).text = item[1]
                else:
                    info.append(item)
        return el

    @classmethod
    def from_element(cls, el) -> "RpcError":
        def text(tag):
            child = el.find(qn(tag))
            return child.text.strip() if child is not None and child.text else None

        info_el = el.find(qn("error-info"))
        info = []
        if info_el is not None:
            for child in info_el:
                if namespace(child) == BASE_NS:
                    info.append((localname(child), (child.text or "").strip()))
                else:
                    info.append(child)
        try:
            return cls(
                error_tag=text("error-tag") or "",
                error_type=text("error-type") or "application",
                severity=text("error-severity") or "error",
                error_message=text("error-message"),
                error_path=text("error-path"),
                error_info=info,
            )
        except ValueError as exc:
            raise MalformedReply(str(exc)) from None


@dataclass
class RpcReply:
    message_id: str
    ok: bool = False
    data: object = None  # the <data> element when present
    errors: list = field(default_factory=list)
    root: object = None

    @property
    def kind(self) -> str:
        if self.errors:
            return "errors"
        return "data" if self.data is not None else "ok"

    @property
    def error(self) -> RpcError | None:
        hard = [e for e in self.errors if e.severity == "error"]
        return hard[0] if hard else None


def serialize(el) -> bytes:
    return etree.tostring(el, encoding="UTF-8", xml_declaration=False)


def parse_xml(data: bytes):
    try:
        return etree.fromstring(data, _PARSER)
    except etree.XMLSyntaxError as exc:
        raise MalformedMessage(f"not well-formed XML: {exc}") from None


def build_hello(caps: Iterable[str], session_id: int | None = None):
    root = etree.Element(qn("hello"), nsmap={None: BASE_NS})
    capabilities = etree.SubElement(root, qn("capabilities"))
    for uri in CapabilitySet(caps):
        etree.SubElement(capabilities, qn("capability")).text = uri
    if session_id is not None:
        if session_id < 1:
            raise ValueError("session-id must be positive")
        etree.SubElement(root, qn("session-id")).text = str(session_id)
    return root


def parse_hello(doc) -> tuple[CapabilitySet, int | None]:
    if isinstance(doc, (bytes, str)):
        try:
            doc = parse_xml(doc.encode() if isinstance(doc, str) else doc)
        except MalformedMessage as exc:
            raise MalformedHello(str(exc)) from None
    if doc.tag != qn("hello"):
        raise MalformedHello(f"expected base-namespace <hello>, got {doc.tag}")
    caps_el = doc.find(qn("capabilities"))
    uris = [] if caps_el is None else [c.text or "" for c in caps_el.findall(qn("capability"))]
    caps = CapabilitySet(uris)
    if not len(caps):
        raise MalformedHello("hello carries no capabilities")
    sid_el = doc.find(qn("session-id"))
    session_id = None
    if sid_el is not None:
        raw = (sid_el.text or "").strip()
        if not raw.isdigit() or int(raw) < 1:
            raise MalformedHello(f"bad session-id {raw!r}")
        session_id = int(raw)
    return caps, session_id


def build_rpc(message_id: str, operation):
    if not message_id:
        raise ValueError("message-id must be non-empty")
    root = etree.Element(qn("rpc"), nsmap={None: BASE_NS})
    root.set("message-id", message_id)
    root.append(operation)
    return root


def _reply_root(message_id: str | None, attrs=None):
    root = etree.Element(qn("rpc-reply"), nsmap={None: BASE_NS})
    if message_id is not None:
        root.set("message-id", message_id)
    for key, value in (attrs or {}).items():
        if key != "message-id":
            root.set(key, value)
    return root


def build_ok_reply(message_id, attrs=None):
    root = _reply_root(message_id, attrs)
    etree.SubElement(root, qn("ok"))
    return root


def build_data_reply(message_id, data_children, attrs=None):
    root = _reply_root(message_id, attrs)
    data = etree.SubElement(root, qn("data"))
    for child in data_children:
        data.append(child)
    return root


def build_error_reply(message_id, errors, attrs=None):
    root = _reply_root(message_id, attrs)
    for err in errors:
        root.append(err.to_element())
    return root


def parse_rpc_reply(doc) -> RpcReply:
    if isinstance(doc, (bytes, str)):
        try:
            doc = parse_xml(doc.encode() if isinstance(doc, str) else doc)
        except MalformedMessage as exc:
            raise MalformedReply(str(exc)) from None
    if doc.tag != qn("rpc-reply"):
        raise MalformedReply(f"expected <rpc-reply>, got {doc.tag}")
    message_id = doc.get("message-id")
    if message_id is None:
        message_id = doc.get(qn("message-id"))
    ok = doc.find(qn("ok")) is not None
    data = doc.find(qn("data"))
    errors = [RpcError.from_element(e) for e in doc.findall(qn("rpc-error"))]
    if ok and (errors or data is not None):
        raise MalformedReply("<ok/> combined with other reply content")
    if not ok and data is None and not errors:
        raise MalformedReply("reply carries neither <ok/>, <data> nor <rpc-error>")
    return RpcReply(message_id=message_id or "", ok=ok, data=data, errors=errors, root=doc)


class MessageIdCounter:
    """Per-session source of message-ids: "1", "2", ..."""

    def __init__(self):
        self._counter = itertools.count(1)

    def next(self) -> str:
        return str(next(self._counter))


def next_message_id(counter: MessageIdCounter) -> str:
    return counter.next()
