"""The NETCONF agent: datastores + system model + session table."""

from __future__ import annotations

import itertools
import logging
import threading

from .clock import SystemClock
from .datastore import Datastores, apply_edit, parse_config_element
from .framing import NoCommonBase
from .message import AGENT_CAPABILITIES, BASE_NS, MalformedMessage, RpcError, localname, namespace, qn
from .session import AgentSession, HELLO_TIMEOUT, SessionError
from .sysmodel import SYS_NS, SystemModel
from .tls import TlsError, tls_accept
from .tree import new_root, parse_filter

log = logging.getLogger(__name__)


def _missing(name: str) -> RpcError:
    return RpcError("missing-element", "protocol", error_message=f"missing <{name}>",
                    error_info=[("bad-element", name)])


def _datastore_param(op, tag: str) -> str:
    el = op.find(qn(tag))
    if el is None:
        raise _missing(tag)
    kids = [c for c in el if isinstance(c.tag, str)]
    if len(kids) != 1:
        raise RpcError("invalid-value", "protocol", error_message=f"<{tag}> must name one datastore",
                       error_info=[("bad-element", tag)])
    if kids[0].tag == qn("url"):
        raise RpcError("operation-not-supported", "protocol", error_message=":url is not supported")
    return localname(kids[0])


def _text_param(op, tag: str, default: str | None = None) -> str | None:
    el = op.find(qn(tag))
    if el is None or el.text is None:
        return default
    return el.text.strip()


class Agent:
    """Owns the datastores and every live session; dispatches rpcs.

    Transport-agnostic: ``handle`` runs a session over any authenticated
    channel, ``listen`` adds a TLS listener, and the call-home engine feeds
    outbound connections through ``handle`` as well.
    """

    def __init__(self, startup_path=None, initial=None, platform=None, clock=None,
                 capabilities=AGENT_CAPABILITIES, hello_timeout: float = HELLO_TIMEOUT):
        self.clock = clock or SystemClock()
        self.system = SystemModel(platform=platform, clock=self.clock)
        self.datastores = Datastores(
            schema=self.system.schema,
            startup_path=startup_path,
            validator=self.system.validate,
            state_provider=self.system.get_state,
            on_running_change=self.system.on_running_change,
            initial=initial,
        )
        self.capabilities = tuple(capabilities)
        self.hello_timeout = hello_timeout
        self._ids = itertools.count(1)
        self._table_lock = threading.Lock()
        self._sessions: dict[int, AgentSession] = {}
        self._threads: list[threading.Thread] = []
        self._servers: list[Listener] = []
        self._handlers = {
            (BASE_NS, "get"): self._get,
            (BASE_NS, "get-config"): self._get_config,
            (BASE_NS, "edit-config"): self._edit_config,
            (BASE_NS, "copy-config"): self._copy_config,
            (BASE_NS, "delete-config"): self._delete_config,
            (BASE_NS, "lock"): self._lock,
            (BASE_NS, "unlock"): self._unlock,
            (BASE_NS, "validate"): self._validate,
            (BASE_NS, "commit"): self._commit,
            (BASE_NS, "discard-changes"): self._discard,
            (BASE_NS, "kill-session"): self._kill_session,
            (SYS_NS, "system-restart"): self._system_restart,
            (SYS_NS, "system-shutdown"): self._system_shutdown,
        }

    # -- session table ------------------------------------------------------

    def _allocate_id(self) -> int:
        with self._table_lock:
            return next(self._ids)

    @property
    def sessions(self) -> dict[int, AgentSession]:
        with self._table_lock:
            return dict(self._sessions)

    def open_session(self, channel, username: str | None = None) -> AgentSession:
        """Hello exchange over an authenticated channel; registers the session."""
        session = AgentSession(channel, self.capabilities, username)
        session.session_id = self._allocate_id()
        # registered before the hello so the id is killable as soon as the peer knows it
        with self._table_lock:
            self._sessions[session.session_id] = session
        try:
            session.handshake(self.hello_timeout)
        except BaseException:
            with self._table_lock:
                self._sessions.pop(session.session_id, None)
            raise
        session.on_close(self._forget)
        return session

    def _forget(self, session: AgentSession) -> None:
        released = self.datastores.release_locks(session.session_id)
        if released:
            log.info("session %s ended; released locks on %s", session.session_id, ", ".join(released))
        with self._table_lock:
            self._sessions.pop(session.session_id, None)

    def handle(self, channel, username: str | None = None) -> AgentSession | None:
        """Establish and serve one session to completion (blocking)."""
        try:
            session = self.open_session(channel, username)
        except (SessionError, NoCommonBase, MalformedMessage, ValueError) as exc:
            log.warning("session setup failed: %s", exc)
            return None
        session.serve(self.dispatch)
        return session

    def handle_in_thread(self, channel, username: str | None = None) -> threading.Thread:
        t = threading.Thread(target=self.handle, args=(channel, username), daemon=True,
                             name=f"netconf-session-{username}")
        t.start()
        self._threads.append(t)
        return t

    # -- dispatch -----------------------------------------------------------

    def dispatch(self, session: AgentSession, op):
        handler = self._handlers.get((namespace(op), localname(op)))
        if handler is None:
            raise RpcError("operation-not-supported", "protocol",
                           error_message=f"operation <{localname(op)}> is not supported",
                           error_info=[("bad-element", localname(op))])
        return handler(session, op)

    def _filter(self, op):
        el = op.find(qn("filter"))
        return parse_filter(el) if el is not None else None

    def _get(self, session, op):
        tree = self.datastores.get(self._filter(op))
        return [c.to_element(BASE_NS) for c in tree.children]

    def _get_config(self, session, op):
        tree = self.datastores.get_config(_datastore_param(op, "source"), self._filter(op))
        return [c.to_element(BASE_NS) for c in tree.children]

    def _edit_config(self, session, op):
        target = _datastore_param(op, "target")
        config = op.find(qn("config"))
        if config is None:
            if op.find(qn("url")) is not None:
                raise RpcError("operation-not-supported", "protocol", error_message=":url is not supported")
            raise _missing("config")
        default_op = _text_param(op, "default-operation", "merge")
        error_op = _text_param(op, "error-option", "stop-on-error")
        test_option = _text_param(op, "test-option", "test-then-set")
        if test_option not in ("test-then-set", "set", "test-only"):
            raise RpcError("invalid-value", "protocol", error_message=f"bad test-option {test_option!r}")
        edits = parse_config_element(config, self.system.schema)
        if test_option == "test-only":
            tree = apply_edit(self.datastores.snapshot(target), edits, default_op, "rollback-on-error",
                              self.system.schema)
            self.datastores.validate(tree)
            return None
        self.datastores.edit_config(target, edits, default_op, error_op, session.session_id, test_option)
        return None

    def _copy_config(self, session, op):
        target = _datastore_param(op, "target")
        src_el = op.find(qn("source"))
        if src_el is None:
            raise _missing("source")
        inline = src_el.find(qn("config"))
        if inline is not None:
            source = new_root()
            source.children = parse_config_element(inline, self.system.schema)
        else:
            source = _datastore_param(op, "source")
        self.datastores.copy_config(source, target, session.session_id)
        return None

    def _delete_config(self, session, op):
        self.datastores.delete_config(_datastore_param(op, "target"), session.session_id)
        return None

    def _lock(self, session, op):
        self.datastores.lock(_datastore_param(op, "target"), session.session_id)
        return None

    def _unlock(self, session, op):
        self.datastores.unlock(_datastore_param(op, "target"), session.session_id)
        return None

    def _validate(self, session, op):
        src_el = op.find(qn("source"))
        if src_el is None:
            raise _missing("source")
        inline = src_el.find(qn("config"))
        if inline is not None:
            tree = new_root()
            tree.children = parse_config_element(inline, self.system.schema)
            self.datastores.validate(tree)
        else:
            self.datastores.validate(_datastore_param(op, "source"))
        return None

    def _commit(self, session, op):
        if op.find(qn("confirmed")) is not None:
            raise RpcError("operation-not-supported", "protocol", error_message=":confirmed-commit is not supported")
        self.datastores.commit(session.session_id)
        return None

    def _discard(self, session, op):
        self.datastores.discard_changes(session.session_id)
        return None

    def _kill_session(self, session, op):
        raw = _text_param(op, "session-id")
        if raw is None:
            raise _missing("session-id")
        if not raw.isdigit():
            raise RpcError("invalid-value", "protocol", error_message=f"bad session-id {raw!r}")
        target_id = int(raw)
        if target_id == session.session_id:
            raise RpcError("invalid-value", "protocol", error_message="a session cannot kill itself")
        target = self.sessions.get(target_id)
        if target is None:
            raise RpcError("invalid-value", "protocol", error_message=f"no session {target_id}")
        self.datastores.release_locks(target_id)
        target.kill()
        log.info("session %s killed by session %s", target_id, session.session_id)
        return None

    def _system_restart(self, session, op):
        self.system.rpc_system_restart(session.session_id)
        return None

    def _system_shutdown(self, session, op):
        self.system.rpc_system_shutdown(session.session_id)
        return None

    # -- listening ----------------------------------------------------------

    def listen(self, network, host: str, port: int, tls_config) -> "Listener":
        """Accept NETCONF-over-TLS connections until the listener is closed."""
        listener = network.listen(host, port)
        server = Listener(self, listener, tls_config)
        server.start()
        self._servers.append(server)
        return server

    def close(self) -> None:
        for server in self._servers:
            server.close()
        for session in list(self.sessions.values()):
            session.kill()


class Listener:
    def __init__(self, agent: Agent, listener, tls_config):
        self.agent = agent
        self.listener = listener
        self.tls_config = tls_config
        self.address = listener.address
        self.rejected = 0
        self._thread = threading.Thread(target=self._run, daemon=True, name="netconf-listener")

    def start(self) -> None:
        self._thread.start()

    def _run(self) -> None:
        while True:
            raw = self.listener.accept()
            if raw is None:
                return
            threading.Thread(target=self._serve, args=(raw,), daemon=True).start()

    def _serve(self, raw) -> None:
        try:
            chan, username = tls_accept(raw, self.tls_config)
        except TlsError as exc:
            self.rejected += 1
            log.warning("rejected connection from %s: %s", raw.peer, exc)
            return
        self.agent.handle(chan, username)

    def close(self) -> None:
        self.listener.close()
