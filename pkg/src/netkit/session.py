"""NETCONF sessions for both roles.

Hellos always travel with end-of-message framing; once both are in, each
side switches to whatever ``select_framing`` picks. The manager side lets
several threads ``call`` at once and matches replies by message-id; the
agent side answers one request at a time, in order.
"""

from __future__ import annotations

import enum
import logging
import threading
from typing import Callable

from lxml import etree

from . import framing
from .channel import ChannelClosed
from .framing import FramingError, FramingVersion, NoCommonBase
from .message import (
    BASE_NS, MANAGER_CAPABILITIES, CapabilitySet, MalformedHello, MalformedMessage,
    MalformedReply, MessageIdCounter, RpcError, RpcReply, build_data_reply, build_error_reply,
    build_hello, build_ok_reply, build_rpc, localname, namespace, parse_hello, parse_rpc_reply,
    parse_xml, qn, serialize,
)

log = logging.getLogger(__name__)

HELLO_TIMEOUT = 30.0
REPLY_TIMEOUT = 60.0


class SessionError(Exception):
    pass


class HelloTimeout(SessionError):
    pass


class SessionClosed(SessionError):
    pass


class ReplyTimeout(SessionError):
    pass


class TransportError(SessionError):
    pass


class Role(enum.Enum):
    MANAGER = "manager"
    AGENT = "agent"


class Phase(enum.Enum):
    TRANSPORT_READY = "TransportReady"
    HELLO_SENT = "HelloSent"
    ESTABLISHED = "Established"
    CLOSED = "Closed"


class Session:
    def __init__(self, channel, role: Role, local_caps, username: str | None = None,
                 max_message: int = framing.DEFAULT_MAX_MESSAGE, max_chunk: int = framing.DEFAULT_MAX_CHUNK):
        self.channel = channel
        self.role = role
        self.local_caps = CapabilitySet(local_caps)
        self.username = username if username is not None else getattr(channel, "username", None)
        self.max_chunk = max_chunk
        self.phase = Phase.TRANSPORT_READY
        self.session_id: int | None = None
        self.negotiated: FramingVersion | None = None
        self.peer_caps: CapabilitySet | None = None
        self.sent_session_id = False
        self.received_session_id = False
        self._framing = FramingVersion.EOM_1_0
        self._decoder = framing.EomDecoder(max_message)
        self._max_message = max_message
        self._send_lock = threading.Lock()

    @property
    def clock(self):
        return self.channel.clock

    def __repr__(self):
        return f"<{type(self).__name__} id={self.session_id} {self.phase.value} {self.negotiated}>"

    # -- framed I/O ---------------------------------------------------------

    def send_message(self, payload: bytes) -> None:
        data = framing.encode(self._framing, payload, self.max_chunk)
        with self._send_lock:
            try:
                self.channel.send(data)
            except (ChannelClosed, OSError) as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def recv_message(self, timeout: float | None = None) -> bytes | None:
        """Next complete message; None on clean EOF. Raises TimeoutError or FramingError."""
        deadline = None if timeout is None else self.clock.monotonic() + timeout
        while True:
            frame = self._decoder.next_frame()
            if frame is not None:
                return frame
            remaining = None if deadline is None else max(0.0, deadline - self.clock.monotonic())
            if remaining == 0.0:
                raise TimeoutError("no complete message before timeout")
            data = self.channel.recv(65536, timeout=remaining)
            if not data:
                if self._decoder.buffered() == 0:
                    return None
                self._decoder.feed_eof()
                return self._decoder.next_frame()
            self._decoder.feed(data)

    # -- hello exchange -----------------------------------------------------

    def _exchange_hellos(self, own_session_id: int | None, hello_timeout: float) -> None:
        hello = build_hello(self.local_caps, own_session_id)
        self.send_message(serialize(hello))
        self.sent_session_id = own_session_id is not None
        self.phase = Phase.HELLO_SENT
        try:
            payload = self.recv_message(hello_timeout)
        except TimeoutError:
            self.close()
            raise HelloTimeout(f"no hello from peer within {hello_timeout} s") from None
        except FramingError as exc:
            self.close()
            raise MalformedHello(f"hello framing: {exc}") from None
        if payload is None:
            self.close()
            raise SessionClosed("peer closed before sending hello")
        try:
            caps, peer_sid = parse_hello(payload)
            if self.role is Role.MANAGER and peer_sid is None:
                raise MalformedHello("agent hello lacks a session-id")
            if self.role is Role.AGENT and peer_sid is not None:
                raise MalformedHello("manager hello must not carry a session-id")
            version = framing.select_framing(self.local_caps, caps)
        except (MalformedHello, NoCommonBase):
            self.close()
            raise
        self.peer_caps = caps
        if peer_sid is not None:
            self.session_id = peer_sid
            self.received_session_id = True
        self.negotiated = version
        if version is FramingVersion.CHUNKED_1_1:
            leftover = self._decoder.take_buffer()
            self._decoder = framing.ChunkedDecoder(self._max_message)
            self._decoder.feed(leftover)
        self._framing = version
        self.phase = Phase.ESTABLISHED

    def close(self) -> None:
        self.phase = Phase.CLOSED
        try:
            self.channel.close()
        except OSError:
            pass

    @property
    def established(self) -> bool:
        return self.phase is Phase.ESTABLISHED


def _as_element(xml):
    if isinstance(xml, (str, bytes)):
        return parse_xml(xml.encode() if isinstance(xml, str) else xml)
    return xml


def _datastore(tag: str, name: str):
    el = etree.Element(qn(tag))
    etree.SubElement(el, qn(name))
    return el


def _filter_element(flt):
    if flt is None:
        return None
    if isinstance(flt, (str, bytes)):
        text = flt.decode() if isinstance(flt, bytes) else flt
        doc = parse_xml(f'<filter xmlns="{BASE_NS}" type="subtree">{text}</filter>'.encode())
        return doc
    if flt.tag == qn("filter"):
        return flt
    el = etree.Element(qn("filter"), type="subtree")
    el.append(flt)
    return el


_DEAD = object()


class ManagerSession(Session):
    """Client side: sends rpcs, correlates replies."""

    def __init__(self, channel, local_caps=MANAGER_CAPABILITIES, username=None,
                 reply_timeout: float = REPLY_TIMEOUT, **kw):
        super().__init__(channel, Role.MANAGER, local_caps, username, **kw)
        self.reply_timeout = reply_timeout
        self._ids = MessageIdCounter()
        self._cond = threading.Condition()
        self._replies: dict[str, RpcReply] = {}
        self._waiting: set[str] = set()
        self._reading = False
        self._dead: Exception | None = None
        self._keepalive: threading.Thread | None = None

    @classmethod
    def establish(cls, channel, local_caps=MANAGER_CAPABILITIES, username=None,
                  hello_timeout: float = HELLO_TIMEOUT, **kw) -> "ManagerSession":
        session = cls(channel, local_caps, username, **kw)
        session._exchange_hellos(None, hello_timeout)
        log.debug("manager session %s established (%s)", session.session_id, session.negotiated)
        return session

    def call(self, operation, timeout: float | None = None) -> RpcReply:
        if self.phase is not Phase.ESTABLISHED or self._dead is not None:
            raise SessionClosed("session is not established")
        operation = _as_element(operation)
        message_id = self._ids.next()
        with self._cond:
            self._waiting.add(message_id)
        try:
            self.send_message(serialize(build_rpc(message_id, operation)))
        except TransportError:
            self._mark_dead(SessionClosed("transport failed"))
            raise
        timeout = self.reply_timeout if timeout is None else timeout
        deadline = self.clock.monotonic() + timeout
        with self._cond:
            try:
                while True:
                    if message_id in self._replies:
                        return self._replies.pop(message_id)
                    if self._dead is not None:
                        raise SessionClosed(str(self._dead))
                    remaining = deadline - self.clock.monotonic()
                    if remaining <= 0:
                        raise ReplyTimeout(f"no reply to message-id {message_id} within {timeout} s")
                    if self._reading:
                        self._cond.wait(min(remaining, 0.05))
                        continue
                    self._reading = True
                    self._cond.release()
                    try:
                        payload = self._read_one(remaining)
                    finally:
                        self._cond.acquire()
                        self._reading = False
                    self._absorb(payload)
                    self._cond.notify_all()
            finally:
                self._waiting.discard(message_id)

    def _read_one(self, timeout):
        try:
            payload = self.recv_message(timeout)
        except TimeoutError:
            return None
        except FramingError as exc:
            return exc
        except (OSError, ConnectionError) as exc:
            return exc
        return _DEAD if payload is None else payload

    def _absorb(self, payload) -> None:
        if payload is None:
            return
        if payload is _DEAD or isinstance(payload, Exception):
            self._dead = payload if isinstance(payload, Exception) else SessionClosed("peer closed the session")
            self.phase = Phase.CLOSED
            return
        try:
            reply = parse_rpc_reply(payload)
        except (MalformedReply, MalformedMessage) as exc:
            log.warning("dropping malformed reply: %s", exc)
            return
        if reply.message_id in self._waiting:
            self._replies[reply.message_id] = reply
        else:
            log.warning("reply for unknown message-id %r dropped", reply.message_id)

    def _mark_dead(self, exc) -> None:
        with self._cond:
            self._dead = exc
            self.phase = Phase.CLOSED
            self._cond.notify_all()

    # -- operations ---------------------------------------------------------

    def get(self, filter=None, **kw) -> RpcReply:
        op = etree.Element(qn("get"), nsmap={None: BASE_NS})
        flt = _filter_element(filter)
        if flt is not None:
            op.append(flt)
        return self.call(op, **kw)

    def get_config(self, source: str = "running", filter=None, **kw) -> RpcReply:
        op = etree.Element(qn("get-config"), nsmap={None: BASE_NS})
        op.append(_datastore("source", source))
        flt = _filter_element(filter)
        if flt is not None:
            op.append(flt)
        return self.call(op, **kw)

    def edit_config(self, config, target: str = "candidate", default_operation: str | None = None,
                    error_option: str | None = None, test_option: str | None = None, **kw) -> RpcReply:
        op = etree.Element(qn("edit-config"), nsmap={None: BASE_NS})
        op.append(_datastore("target", target))
        if default_operation:
            etree.SubElement(op, qn("default-operation")).text = default_operation
        if test_option:
            etree.SubElement(op, qn("test-option")).text = test_option
        if error_option:
            etree.SubElement(op, qn("error-option")).text = error_option
        config = _as_element(config)
        if config.tag != qn("config"):
            wrapper = etree.Element(qn("config"))
            wrapper.append(config)
            config = wrapper
        op.append(config)
        return self.call(op, **kw)

    def copy_config(self, source: str, target: str, **kw) -> RpcReply:
        op = etree.Element(qn("copy-config"), nsmap={None: BASE_NS})
        op.append(_datastore("target", target))
        op.append(_datastore("source", source))
        return self.call(op, **kw)

    def delete_config(self, target: str = "startup", **kw) -> RpcReply:
        op = etree.Element(qn("delete-config"), nsmap={None: BASE_NS})
        op.append(_datastore("target", target))
        return self.call(op, **kw)

    def lock(self, target: str = "running", **kw) -> RpcReply:
        op = etree.Element(qn("lock"), nsmap={None: BASE_NS})
        op.append(_datastore("target", target))
        return self.call(op, **kw)

    def unlock(self, target: str = "running", **kw) -> RpcReply:
        op = etree.Element(qn("unlock"), nsmap={None: BASE_NS})
        op.append(_datastore("target", target))
        return self.call(op, **kw)

    def validate(self, source: str = "candidate", **kw) -> RpcReply:
        op = etree.Element(qn("validate"), nsmap={None: BASE_NS})
        op.append(_datastore("source", source))
        return self.call(op, **kw)

    def commit(self, **kw) -> RpcReply:
        return self.call(etree.Element(qn("commit"), nsmap={None: BASE_NS}), **kw)

    def discard_changes(self, **kw) -> RpcReply:
        return self.call(etree.Element(qn("discard-changes"), nsmap={None: BASE_NS}), **kw)

    def kill_session(self, session_id: int, **kw) -> RpcReply:
        op = etree.Element(qn("kill-session"), nsmap={None: BASE_NS})
        etree.SubElement(op, qn("session-id")).text = str(session_id)
        return self.call(op, **kw)

    def close_session(self, **kw) -> RpcReply | None:
        """Politely end the session; the channel is closed either way."""
        reply = None
        if self.phase is Phase.ESTABLISHED and self._dead is None:
            try:
                reply = self.call(etree.Element(qn("close-session"), nsmap={None: BASE_NS}), **kw)
            except SessionError:
                pass
        self.stop_keepalive()
        self.close()
        return reply

    def start_keepalive(self, interval: float) -> None:
        """Probe liveness with an empty-filter get-config every ``interval`` seconds."""
        stop = threading.Event()

        def loop():
            while not self.clock.sleep(interval, stop):
                try:
                    self.get_config("running", filter="")
                except SessionError as exc:
                    log.info("keepalive ended: %s", exc)
                    return

        self._keepalive_stop = stop
        self._keepalive = threading.Thread(target=loop, name="netconf-keepalive", daemon=True)
        self._keepalive.start()

    def stop_keepalive(self) -> None:
        if self._keepalive is not None:
            self._keepalive_stop.set()
            self._keepalive = None


Handler = Callable[["AgentSession", object], object]


class AgentSession(Session):
    """Server side: answers rpcs through a dispatcher until the session ends."""

    def __init__(self, channel, local_caps, username=None, **kw):
        super().__init__(channel, Role.AGENT, local_caps, username, **kw)
        self._on_close: list[Callable[["AgentSession"], None]] = []
        self._closed_once = threading.Event()

    @classmethod
    def establish(cls, channel, local_caps, session_id: int, username=None,
                  hello_timeout: float = HELLO_TIMEOUT, **kw) -> "AgentSession":
        session = cls(channel, local_caps, username, **kw)
        session.session_id = session_id
        session.handshake(hello_timeout)
        return session

    def handshake(self, hello_timeout: float = HELLO_TIMEOUT) -> None:
        """Hello exchange for a session whose id is already assigned."""
        self._exchange_hellos(self.session_id, hello_timeout)
        log.debug("agent session %s established for %r (%s)", self.session_id, self.username, self.negotiated)

    def on_close(self, fn: Callable[["AgentSession"], None]) -> None:
        self._on_close.append(fn)

    def _finish(self) -> None:
        self.close()
        if self._closed_once.is_set():
            return
        self._closed_once.set()
        for fn in self._on_close:
            try:
                fn(self)
            except Exception:
                log.exception("session %s close hook failed", self.session_id)

    def kill(self) -> None:
        self._finish()

    def _reply(self, root) -> bool:
        try:
            self.send_message(serialize(root))
            return True
        except TransportError:
            return False

    def serve(self, dispatcher: Handler) -> None:
        """Answer rpcs until close-session, kill, EOF or a framing error.

        ``dispatcher(session, operation_element)`` returns None for <ok/>,
        a list of elements for <data>, or raises RpcError.
        """
        if self.phase is not Phase.ESTABLISHED:
            raise SessionClosed("session is not established")
        try:
            while self.phase is Phase.ESTABLISHED:
                try:
                    payload = self.recv_message(None)
                except FramingError as exc:
                    log.warning("session %s: framing error, closing: %s", self.session_id, exc)
                    break
                except (OSError, ConnectionError):
                    break
                if payload is None:
                    break
                if not self._handle(payload, dispatcher):
                    break
        finally:
            self._finish()

    def _handle(self, payload: bytes, dispatcher: Handler) -> bool:
        try:
            doc = parse_xml(payload)
        except MalformedMessage as exc:
            err = RpcError("malformed-message", "rpc", error_message=str(exc))
            return self._reply(build_error_reply(None, [err]))
        if doc.tag != qn("rpc"):
            err = RpcError("unknown-element", "protocol", error_message=f"unexpected <{localname(doc)}>",
                           error_info=[("bad-element", localname(doc))])
            return self._reply(build_error_reply(None, [err]))
        attrs = dict(doc.attrib)
        message_id = attrs.get("message-id")
        if message_id is None:
            err = RpcError("missing-attribute", "rpc", error_message="rpc lacks message-id",
                           error_info=[("bad-attribute", "message-id"), ("bad-element", "rpc")])
            return self._reply(build_error_reply(None, [err]))
        ops = [c for c in doc if isinstance(c.tag, str)]
        if len(ops) != 1:
            err = RpcError("malformed-message", "rpc", error_message="rpc must carry exactly one operation")
            return self._reply(build_error_reply(message_id, [err], attrs))
        op = ops[0]
        if op.tag == qn("close-session"):
            self._reply(build_ok_reply(message_id, attrs))
            return False
        try:
            result = dispatcher(self, op)
        except RpcError as err:
            return self._reply(build_error_reply(message_id, [err], attrs))
        except Exception as exc:
            log.exception("session %s: handler for %s crashed", self.session_id, op.tag)
            err = RpcError("operation-failed", "application", error_message=str(exc))
            return self._reply(build_error_reply(message_id, [err], attrs))
        if result is None:
            reply = build_ok_reply(message_id, attrs)
        else:
            reply = build_data_reply(message_id, result, attrs)
        return self._reply(reply) and self.phase is Phase.ESTABLISHED


def operation_key(op) -> tuple[str | None, str]:
    return namespace(op), localname(op)
