"""Core system configuration for a home router: hostname, clock, DNS
resolver, read-only state and the restart/shutdown operations.

The schema is a hard-coded subset of the ietf-system YANG module. Changes
to ``running`` are diffed at leaf level and handed to registered callbacks,
which is where a real device would apply them to the OS.
"""

from __future__ import annotations

import dataclasses
import ipaddress
import logging
import re
import shlex
import subprocess
import threading
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable

from .clock import SystemClock, rfc3339
from .message import RpcError
from .tree import ConfigNode, LeafChange, SchemaNode, leaf_diff, new_root, schema_child, schema_root, segment

log = logging.getLogger(__name__)

SYS_NS = "urn:ietf:params:xml:ns:yang:ietf-system"

_LABEL = re.compile(r"^[A-Za-z0-9](?:[A-Za-z0-9-]{0,61}[A-Za-z0-9])?$")


@lru_cache(maxsize=None)
def timezones() -> frozenset[str]:
    text = resources.files("netkit").joinpath("data/timezones.txt").read_text()
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


def is_domain_name(value: str) -> bool:
    name = value[:-1] if value.endswith(".") else value
    if not name or len(name) > 253:
        return False
    return all(_LABEL.match(label) for label in name.split("."))


def is_ip_address(value: str) -> bool:
    try:
        ipaddress.ip_address(value)
    except ValueError:
        return False
    return True


def _uint_range(lo, hi):
    def check(value: str) -> bool:
        return value.isdigit() and lo <= int(value) <= hi
    return check


def _leaf(name, check=None, type_name="string", config=True):
    return SchemaNode(name, SYS_NS, "leaf", check=check, type_name=type_name, config=config)


def _container(name, *children, config=True):
    return SchemaNode(name, SYS_NS, "container", {c.name: c for c in children}, config=config)


def _build_schema() -> SchemaNode:
    server = SchemaNode("server", SYS_NS, "list", {
        "name": _leaf("name"),
        "udp-and-tcp": _container(
            "udp-and-tcp",
            _leaf("address", is_ip_address, "ip-address"),
            _leaf("port", _uint_range(1, 65535), "port-number"),
        ),
    }, keys=("name",))
    search = SchemaNode("search", SYS_NS, "leaf-list", check=is_domain_name, type_name="domain-name")
    system = _container(
        "system",
        _leaf("contact"),
        _leaf("hostname", is_domain_name, "domain-name"),
        _leaf("location"),
        _container("clock", _leaf("timezone-name", lambda v: v in timezones(), "timezone-name")),
        _container(
            "dns-resolver",
            search,
            server,
            _container("options",
                       _leaf("timeout", _uint_range(1, 60), "uint8"),
                       _leaf("attempts", _uint_range(1, 10), "uint8")),
        ),
    )
    state = _container(
        "system-state",
        _container("clock",
                   _leaf("current-datetime", config=False),
                   _leaf("boot-datetime", config=False),
                   _leaf("uptime", config=False),
                   config=False),
        config=False,
    )
    return schema_root([system, state])


SCHEMA = _build_schema()


def validate(root: ConfigNode, schema: SchemaNode = SCHEMA) -> None:
    """Raise invalid-value (or missing-element) for anything the schema rejects."""
    _validate_children(root, schema, "")


def _validate_children(node: ConfigNode, sn: SchemaNode, path: str) -> None:
    seen = set()
    for c in node.children:
        csn = schema_child(sn, c)
        here = f"{path}/{c.name}"
        if csn is None:
            raise RpcError("invalid-value", "application", error_path=here,
                           error_message=f"unknown element {c.name!r} in namespace {c.namespace!r}")
        if not csn.config:
            raise RpcError("invalid-value", "application", error_path=here,
                           error_message=f"{c.name} is state data and cannot be configured")
        here = f"{path}/{segment(c, csn)}"
        if csn.kind in ("leaf", "leaf-list"):
            if not c.is_leaf:
                raise RpcError("invalid-value", "application", error_path=here,
                               error_message=f"{c.name} must be a leaf")
            if csn.check is not None and not csn.check(c.value):
                raise RpcError("invalid-value", "application", error_path=here,
                               error_message=f"{c.value!r} is not a valid {csn.type_name}")
        else:
            if c.is_leaf:
                raise RpcError("invalid-value", "application", error_path=here,
                               error_message=f"{c.name} must be a container")
            if csn.kind == "list":
                for k in csn.keys:
                    if c.leaf(k) is None:
                        raise RpcError("missing-element", "application", error_path=here,
                                       error_message=f"list entry lacks key {k!r}",
                                       error_info=[("bad-element", k)])
            _validate_children(c, csn, here)
        if csn.kind in ("leaf", "container"):
            if c.name in seen:
                raise RpcError("invalid-value", "application", error_path=here,
                               error_message=f"{c.name} appears more than once")
            seen.add(c.name)


def default_config(hostname: str = "openwrt", timezone: str = "UTC") -> ConfigNode:
    root = new_root()
    root.children.append(ConfigNode("system", SYS_NS, children=[
        ConfigNode("hostname", SYS_NS, hostname),
        ConfigNode("clock", SYS_NS, children=[ConfigNode("timezone-name", SYS_NS, timezone)]),
    ]))
    return root


@dataclasses.dataclass(frozen=True)
class ChangeEvent:
    path: str
    old_value: str | None
    new_value: str | None
    source_session: int | None


class UnknownPath(ValueError):
    pass


class PlatformError(Exception):
    pass


class JournalPlatform:
    """Simulated device: actions go to an append-only journal, nothing runs."""

    def __init__(self, journal_path=None, clock=None):
        self.journal_path = Path(journal_path) if journal_path else None
        self.clock = clock or SystemClock()
        self.records: list[str] = []
        self.applied: list[ChangeEvent] = []
        self._lock = threading.Lock()

    def _journal(self, action: str) -> None:
        line = f"{rfc3339(self.clock.time())} {action}"
        with self._lock:
            self.records.append(line)
            if self.journal_path is not None:
                with open(self.journal_path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def restart(self) -> None:
        self._journal("restart")

    def shutdown(self) -> None:
        self._journal("shutdown")

    def apply(self, event: ChangeEvent) -> None:
        self.applied.append(event)


class CommandPlatform(JournalPlatform):
    """Real mode: restart/shutdown run configured external commands."""

    def __init__(self, restart_command: str, shutdown_command: str, journal_path=None, clock=None):
        super().__init__(journal_path, clock)
        self.restart_command = restart_command
        self.shutdown_command = shutdown_command

    def _run(self, command: str, action: str) -> None:
        try:
            proc = subprocess.run(shlex.split(command), capture_output=True, text=True, timeout=60)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise PlatformError(f"{action} hook failed: {exc}") from None
        if proc.returncode != 0:
            raise PlatformError(f"{action} hook exited {proc.returncode}: {proc.stderr.strip()}")
        self._journal(action)

    def restart(self) -> None:
        self._run(self.restart_command, "restart")

    def shutdown(self) -> None:
        self._run(self.shutdown_command, "shutdown")


def _split_path(path: str) -> list[str]:
    return [re.sub(r"\[.*?\]", "", p) for p in re.split(r"/(?![^\[]*\])", path.strip("/")) if p]


class Registration:
    def __init__(self, model: "SystemModel", prefix: list[str], handler):
        self._model = model
        self.prefix = prefix
        self.handler = handler

    def cancel(self) -> None:
        self._model._unregister(self)


class SystemModel:
    """The system module: schema, validation, state, callbacks and RPCs."""

    def __init__(self, platform=None, clock=None):
        self.clock = clock or SystemClock()
        self.platform = platform if platform is not None else JournalPlatform(clock=self.clock)
        self.schema = SCHEMA
        self.boot_time = self.clock.time()
        self.boot_monotonic = self.clock.monotonic()
        self._registrations: list[Registration] = []
        self._lock = threading.Lock()

    def register_callback(self, prefix: str, handler: Callable[[ChangeEvent], None]) -> Registration:
        parts = _split_path(prefix)
        sn = self.schema
        for part in parts:
            sn = sn.children.get(part)
            if sn is None or not sn.config:
                raise UnknownPath(f"{prefix!r} is not a configuration path of the system schema")
        reg = Registration(self, parts, handler)
        with self._lock:
            self._registrations.append(reg)
        return reg

    def _unregister(self, reg: Registration) -> None:
        with self._lock:
            if reg in self._registrations:
                self._registrations.remove(reg)

    def events(self, old: ConfigNode, new: ConfigNode, session_id: int | None) -> list[ChangeEvent]:
        return [ChangeEvent(c.path, c.old_value, c.new_value, session_id)
                for c in leaf_diff(old, new, self.schema)]

    def on_running_change(self, old: ConfigNode, new: ConfigNode, session_id: int | None) -> None:
        """Datastore hook; runs inside the commit critical section."""
        events = self.events(old, new, session_id)
        with self._lock:
            regs = list(self._registrations)
        for event in events:
            self.platform.apply(event)
            parts = _split_path(event.path)
            for reg in regs:
                if parts[:len(reg.prefix)] == reg.prefix:
                    try:
                        reg.handler(event)
                    except Exception:
                        log.exception("callback for %s failed", event.path)

    def validate(self, root: ConfigNode) -> None:
        validate(root, self.schema)

    def get_state(self) -> ConfigNode:
        now = self.clock.time()
        uptime = int(self.clock.monotonic() - self.boot_monotonic)
        root = new_root()
        root.children.append(ConfigNode("system-state", SYS_NS, children=[
            ConfigNode("clock", SYS_NS, children=[
                ConfigNode("current-datetime", SYS_NS, rfc3339(now)),
                ConfigNode("boot-datetime", SYS_NS, rfc3339(self.boot_time)),
                ConfigNode("uptime", SYS_NS, str(uptime)),
            ]),
        ]))
        return root

    def rpc_system_restart(self, session_id: int | None = None) -> None:
        self._platform_action(self.platform.restart, "restart")

    def rpc_system_shutdown(self, session_id: int | None = None) -> None:
        self._platform_action(self.platform.shutdown, "shutdown")

    def _platform_action(self, action, name: str) -> None:
        try:
            action()
        except PlatformError as exc:
            raise RpcError("operation-failed", "application", error_message=str(exc)) from None
        log.info("platform %s requested", name)
