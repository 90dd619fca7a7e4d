"""Call Home over TLS.

The agent opens the TCP connection to the manager, then the roles reverse:
the agent runs the TLS *server* side and the NETCONF agent side over the
connection it initiated, and the manager runs TLS client + NETCONF manager
over the connection it accepted.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import random
import threading
from typing import Callable

from .clock import SystemClock
from .framing import NoCommonBase
from .message import MalformedMessage
from .session import HELLO_TIMEOUT, ManagerSession, SessionError
from .tls import TlsError, tls_accept, tls_connect

log = logging.getLogger(__name__)

CALLHOME_TLS_PORT = 4335
CALLHOME_SSH_PORT = 4334


class TransportNotBuilt(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class CallHomeEndpoint:
    host: str
    port: int = CALLHOME_TLS_PORT

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if self.port == CALLHOME_SSH_PORT:
            raise TransportNotBuilt("port 4334 is SSH call home: transport not built")

    def __str__(self):
        return f"{self.host}:{self.port}"


@dataclasses.dataclass(frozen=True)
class Backoff:
    initial: float = 1.0
    multiplier: float = 2.0
    max: float = 60.0
    jitter: bool = False

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError("backoff initial must be > 0")
        if self.multiplier < 1:
            raise ValueError("backoff multiplier must be >= 1")
        if self.max < self.initial:
            raise ValueError("backoff max must be >= initial")

    def delays(self):
        """Endless delay sequence: initial, initial*m, ... capped at max."""
        delay = self.initial
        while True:
            yield delay
            delay = min(delay * self.multiplier, self.max)


class BackoffTimer:
    def __init__(self, backoff: Backoff, rng: random.Random | None = None):
        self.backoff = backoff
        self.rng = rng or random.Random()
        self.reset()

    def reset(self) -> None:
        self._gen = self.backoff.delays()

    def next_delay(self) -> float:
        delay = next(self._gen)
        if self.backoff.jitter:
            delay = self.rng.uniform(0, delay)
        return delay


@dataclasses.dataclass(frozen=True)
class CallHomePolicy:
    endpoints: tuple
    connection_type: str = "persistent"  # persistent | periodic
    period: float = 300.0
    backoff: Backoff = Backoff()
    max_attempts_per_endpoint: int | None = None  # None = unlimited
    probe_interval: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "endpoints", tuple(self.endpoints))
        if not self.endpoints:
            raise ValueError("call home needs at least one endpoint")
        if self.connection_type not in ("persistent", "periodic"):
            raise ValueError(f"unknown connection type {self.connection_type!r}")
        if self.connection_type == "periodic" and self.period <= 0:
            raise ValueError("periodic interval must be > 0")
        if self.max_attempts_per_endpoint is not None and self.max_attempts_per_endpoint < 1:
            raise ValueError("max_attempts_per_endpoint must be >= 1")


class EndpointState(enum.Enum):
    IDLE = "idle"
    CONNECTING = "connecting"
    ESTABLISHED = "established"
    BACKING_OFF = "backing_off"
    STOPPED = "stopped"


@dataclasses.dataclass
class EndpointStatus:
    endpoint: CallHomeEndpoint
    state: EndpointState = EndpointState.IDLE
    session_id: int | None = None
    next_attempt_at: float | None = None
    attempts: int = 0
    failures: int = 0
    sessions: int = 0
    last_error: str | None = None


class CallHomeEngine:
    """Agent side: keeps calling home per policy.

    ``connector(host, port)`` returns a raw channel or raises OSError; all
    waiting goes through ``clock`` so schedules are testable.
    """

    def __init__(self, agent, policy: CallHomePolicy, tls_config, connector: Callable,
                 clock=None, rng: random.Random | None = None):
        self.agent = agent
        self.policy = policy
        self.tls_config = tls_config
        self.connector = connector
        self.clock = clock or SystemClock()
        self._timer = BackoffTimer(policy.backoff, rng)
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._status = {ep: EndpointStatus(ep) for ep in policy.endpoints}
        self._current = None
        self.attempt_log: list[tuple[float, CallHomeEndpoint, bool]] = []
        self.stopped_reason: str | None = None
        self._thread: threading.Thread | None = None

    # -- status ---------------------------------------------------------------

    def monitor(self) -> dict:
        """Snapshot of every endpoint's state."""
        with self._lock:
            return {str(ep): dataclasses.replace(st) for ep, st in self._status.items()}

    def _set(self, ep, **changes) -> None:
        with self._lock:
            st = self._status[ep]
            for key, value in changes.items():
                setattr(st, key, value)

    # -- lifecycle --------------------------------------------------------------

    def start(self) -> threading.Thread:
        self._thread = threading.Thread(target=self.run, daemon=True, name="callhome")
        self._thread.start()
        return self._thread

    def stop(self) -> None:
        self._stop.set()
        current = self._current
        if current is not None:
            current.kill()

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def _exhausted(self, ep) -> bool:
        limit = self.policy.max_attempts_per_endpoint
        return limit is not None and self._status[ep].failures >= limit

    def run(self) -> None:
        while not self._stop.is_set():
            had_session = False
            for ep in self.policy.endpoints:
                if self._stop.is_set():
                    break
                if self._exhausted(ep):
                    continue
                if self._attempt(ep):
                    had_session = True
                    break
            if self._stop.is_set():
                break
            live = [ep for ep in self.policy.endpoints if not self._exhausted(ep)]
            if not live:
                self.stopped_reason = "max attempts exhausted on every endpoint"
                break
            if had_session and self.policy.connection_type == "periodic":
                delay = self.policy.period
            else:
                delay = self._timer.next_delay()
            wake = self.clock.monotonic() + delay
            for ep in live:
                self._set(ep, state=EndpointState.BACKING_OFF, next_attempt_at=wake, session_id=None)
            if self.clock.sleep(delay, self._stop):
                break
        for ep in self.policy.endpoints:
            self._set(ep, state=EndpointState.STOPPED, next_attempt_at=None, session_id=None)
        if self.stopped_reason is None:
            self.stopped_reason = "stopped"
        log.info("call home engine stopped: %s", self.stopped_reason)

    def _attempt(self, ep) -> bool:
        """One connection attempt; True if a session ran (and has now ended)."""
        now = self.clock.monotonic()
        with self._lock:
            st = self._status[ep]
            st.state = EndpointState.CONNECTING
            st.attempts += 1
            st.next_attempt_at = None
        try:
            raw = self.connector(ep.host, ep.port)
        except OSError as exc:
            self.attempt_log.append((now, ep, False))
            self._fail(ep, f"connect: {exc}")
            return False
        try:
            # role reversal: we dialled, but we are the TLS server
            chan, username = tls_accept(raw, self.tls_config)
            session = self.agent.open_session(chan, username)
        except (TlsError, SessionError, NoCommonBase, MalformedMessage, OSError, ValueError) as exc:
            self.attempt_log.append((now, ep, False))
            self._fail(ep, f"{type(exc).__name__}: {exc}")
            return False
        self.attempt_log.append((now, ep, True))
        self._timer.reset()
        with self._lock:
            st = self._status[ep]
            st.state = EndpointState.ESTABLISHED
            st.session_id = session.session_id
            st.failures = 0
            st.sessions += 1
            st.last_error = None
        self._current = session
        log.info("called home to %s: session %s for %r", ep, session.session_id, username)
        try:
            session.serve(self.agent.dispatch)
        finally:
            self._current = None
        self._set(ep, session_id=None, last_error="session ended")
        return True

    def _fail(self, ep, message: str) -> None:
        with self._lock:
            st = self._status[ep]
            st.failures += 1
            st.last_error = message
        log.info("call home to %s failed: %s", ep, message)


class ManagerListener:
    """Manager side of call home: accept TCP, then act as TLS client and
    NETCONF manager over the accepted connection."""

    def __init__(self, listener, tls_config, sink: Callable[[ManagerSession], None],
                 hello_timeout: float = HELLO_TIMEOUT, parallel: bool = True,
                 probe_interval: float | None = None, reply_timeout: float | None = None):
        self.listener = listener
        self.address = listener.address
        self.tls_config = tls_config
        self.sink = sink
        self.hello_timeout = hello_timeout
        self.parallel = parallel
        self.probe_interval = probe_interval
        self.reply_timeout = reply_timeout
        self.failures: list[str] = []
        self.sessions: list[ManagerSession] = []
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._run, daemon=True, name="callhome-listener")
        self._workers: list[threading.Thread] = []

    def start(self) -> "ManagerListener":
        self._thread.start()
        return self

    def _run(self) -> None:
        while True:
            raw = self.listener.accept()
            if raw is None:
                return
            if self.parallel:
                t = threading.Thread(target=self._handle, args=(raw,), daemon=True)
                t.start()
                self._workers.append(t)
            else:
                self._handle(raw)

    def _handle(self, raw) -> None:
        try:
            # role reversal: we accepted, but we are the TLS client
            chan = tls_connect(raw, self.tls_config, expected_identity=None)
            kw = {} if self.reply_timeout is None else {"reply_timeout": self.reply_timeout}
            session = ManagerSession.establish(chan, username=chan.username,
                                               hello_timeout=self.hello_timeout, **kw)
        except (TlsError, SessionError, NoCommonBase, MalformedMessage, OSError, ValueError) as exc:
            with self._lock:
                self.failures.append(f"{type(exc).__name__}: {exc}")
            log.warning("call home from %s failed: %s", raw.peer, exc)
            raw.close()
            return
        with self._lock:
            self.sessions.append(session)
        if self.probe_interval:
            session.start_keepalive(self.probe_interval)
        try:
            self.sink(session)
        except Exception:
            log.exception("call home session sink failed")

    def close(self) -> None:
        self.listener.close()


def manager_listen(network, host: str, port: int, tls_config, sink, **kw) -> ManagerListener:
    if port == CALLHOME_SSH_PORT:
        raise TransportNotBuilt("port 4334 is SSH call home: transport not built")
    return ManagerListener(network.listen(host, port), tls_config, sink, **kw).start()


def agent_call_home(agent, policy: CallHomePolicy, tls_config, network, clock=None) -> CallHomeEngine:
    """Start an engine that dials the policy's endpoints through ``network``."""
    engine = CallHomeEngine(agent, policy, tls_config, network.connect, clock=clock)
    engine.start()
    return engine
