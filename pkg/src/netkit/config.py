"""Agent and manager configuration files.

Flat ``key = value`` text with ``[section]`` headers (configparser dialect:
``#`` and ``;`` start comments, keys are case-insensitive). Relative paths
are resolved against the directory of the file. Agent sections::

    [agent]     startup_path, sim_platform, journal_path, restart_command,
                shutdown_command, hello_timeout
    [listen]    address (default 0.0.0.0), port (default 6513)
    [callhome]  endpoints (host:port, comma separated), connection_type
                (persistent|periodic), period, backoff_initial,
                backoff_multiplier, backoff_max, jitter, max_attempts
    [tls]       cert, key, trust_anchors (comma separated)
    [cert_map]  <fingerprint> = <username>, one per line

Manager sections::

    [manager]         output (xml|compact), reply_timeout, hello_timeout
    [connect]         address, port (default 6513), server_identity
    [callhome_listen] address (default 0.0.0.0), port (default 4335),
                      probe_interval
    [tls], [cert_map] as above; the manager's cert_map lists agent
                      certificates accepted over call home
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .callhome import CALLHOME_SSH_PORT, CALLHOME_TLS_PORT, Backoff, CallHomeEndpoint, CallHomePolicy
from .tls import CertToNameEntry, TlsConfigError, TlsEndpointConfig

NETCONF_TLS_PORT = 6513

AGENT_SECTIONS = {
    "agent": {"startup_path", "sim_platform", "journal_path", "restart_command", "shutdown_command",
              "hello_timeout"},
    "listen": {"address", "port"},
    "callhome": {"endpoints", "connection_type", "period", "backoff_initial", "backoff_multiplier",
                 "backoff_max", "jitter", "max_attempts", "probe_interval"},
    "tls": {"cert", "key", "trust_anchors"},
    "cert_map": None,
}
MANAGER_SECTIONS = {
    "manager": {"output", "reply_timeout", "hello_timeout"},
    "connect": {"address", "port", "server_identity"},
    "callhome_listen": {"address", "port", "probe_interval"},
    "tls": {"cert", "key", "trust_anchors"},
    "cert_map": None,
}


class ConfigError(Exception):
    """Invalid configuration; the message names the file and line or key."""


@dataclasses.dataclass
class ListenConfig:
    address: str = "0.0.0.0"
    port: int = NETCONF_TLS_PORT


@dataclasses.dataclass
class AgentConfig:
    tls: TlsEndpointConfig
    listen: ListenConfig | None = None
    callhome: CallHomePolicy | None = None
    startup_path: Path | None = None
    sim_platform: bool = True
    journal_path: Path | None = None
    restart_command: str | None = None
    shutdown_command: str | None = None
    hello_timeout: float = 30.0


@dataclasses.dataclass
class ManagerConfig:
    tls: TlsEndpointConfig | None
    connect: ListenConfig | None = None
    server_identity: str | None = None
    callhome_listen: ListenConfig | None = None
    probe_interval: float | None = None
    output: str = "xml"
    reply_timeout: float = 60.0
    hello_timeout: float = 30.0


def _read(path, text: str | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(delimiters=("=",), interpolation=None, strict=True,
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    try:
        if text is None:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh, source=str(path))
        else:
            cp.read_string(text, source=str(path))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror or exc}") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: key outside any [section]") from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else "?"
        raise ConfigError(f"{path}:{line}: cannot parse line") from None
    return cp


class _Reader:
    def __init__(self, path, cp: configparser.ConfigParser, sections: dict):
        self.path = Path(path)
        self.base = self.path.parent
        self.cp = cp
        for section in cp.sections():
            if section not in sections and not section.startswith("assert"):
                raise ConfigError(f"{path}: unknown section [{section}]")
            allowed = sections.get(section)
            if allowed is None:
                continue
            for key in cp[section]:
                if key not in allowed:
                    raise ConfigError(f"{path}: [{section}] unknown key {key!r}")

    def fail(self, section, key, message):
        raise ConfigError(f"{self.path}: [{section}] {key}: {message}")

    def has(self, section) -> bool:
        return self.cp.has_section(section)

    def get(self, section, key, default=None):
        if not self.cp.has_option(section, key):
            return default
        return self.cp.get(section, key).strip()

    def require(self, section, key):
        value = self.get(section, key)
        if value in (None, ""):
            self.fail(section, key, "is required")
        return value

    def number(self, section, key, default, kind=float):
        raw = self.get(section, key)
        if raw in (None, ""):
            return default
        try:
            return kind(raw)
        except ValueError:
            self.fail(section, key, f"{raw!r} is not a number")

    def boolean(self, section, key, default):
        raw = self.get(section, key)
        if raw in (None, ""):
            return default
        try:
            return self.cp.getboolean(section, key)
        except ValueError:
            self.fail(section, key, f"{raw!r} is not a boolean")

    def path_(self, section, key, required=False):
        raw = self.require(section, key) if required else self.get(section, key)
        if raw in (None, ""):
            return None
        p = Path(raw).expanduser()
        return p if p.is_absolute() else self.base / p

    def port(self, section, default):
        port = self.number(section, "port", default, int)
        if not 1 <= port <= 65535 and port != 0:
            self.fail(section, "port", f"{port} out of range")
        return port

    def tls(self, required=True) -> TlsEndpointConfig | None:
        if not self.has("tls"):
            if required:
                raise ConfigError(f"{self.path}: missing [tls] section")
            return None
        cert = self.path_("tls", "cert", True)
        key = self.path_("tls", "key", True)
        anchors_raw = self.require("tls", "trust_anchors")
        anchors = []
        for item in anchors_raw.split(","):
            p = Path(item.strip()).expanduser()
            anchors.append(p if p.is_absolute() else self.base / p)
        for section, key_, p in [("tls", "cert", cert), ("tls", "key", key)] + [("tls", "trust_anchors", a) for a in anchors]:
            if not p.is_file():
                self.fail(section, key_, f"file not found: {p}")
        entries = []
        if self.has("cert_map"):
            for fp, user in self.cp.items("cert_map"):
                try:
                    entries.append(CertToNameEntry(fp, user.strip()))
                except TlsConfigError as exc:
                    self.fail("cert_map", fp, str(exc))
        try:
            return TlsEndpointConfig(str(cert), str(key), [str(a) for a in anchors], entries)
        except TlsConfigError as exc:
            raise ConfigError(f"{self.path}: [cert_map] {exc}") from None


def _parse_endpoint(r: _Reader, item: str) -> CallHomeEndpoint:
    host, sep, port = item.strip().rpartition(":")
    if not sep:
        host, port = item.strip(), str(CALLHOME_TLS_PORT)
    host = host.strip("[]")
    if not host or not port.isdigit():
        r.fail("callhome", "endpoints", f"bad endpoint {item.strip()!r} (want host:port)")
    port = int(port)
    if port == CALLHOME_SSH_PORT:
        r.fail("callhome", "endpoints", f"{item.strip()}: port 4334 is SSH call home, transport not built")
    try:
        return CallHomeEndpoint(host, port)
    except ValueError as exc:
        r.fail("callhome", "endpoints", str(exc))


def _policy(r: _Reader) -> CallHomePolicy:
    raw = r.require("callhome", "endpoints")
    endpoints = [_parse_endpoint(r, item) for item in raw.split(",") if item.strip()]
    max_attempts = r.get("callhome", "max_attempts", "unlimited")
    if max_attempts in ("", "unlimited"):
        max_attempts = None
    elif max_attempts.isdigit() and int(max_attempts) >= 1:
        max_attempts = int(max_attempts)
    else:
        r.fail("callhome", "max_attempts", f"{max_attempts!r} is not a positive integer or 'unlimited'")
    try:
        backoff = Backoff(
            initial=r.number("callhome", "backoff_initial", 1.0),
            multiplier=r.number("callhome", "backoff_multiplier", 2.0),
            max=r.number("callhome", "backoff_max", 60.0),
            jitter=r.boolean("callhome", "jitter", False),
        )
        probe = r.number("callhome", "probe_interval", 0.0)
        return CallHomePolicy(
            endpoints=endpoints,
            connection_type=r.get("callhome", "connection_type", "persistent"),
            period=r.number("callhome", "period", 300.0),
            backoff=backoff,
            max_attempts_per_endpoint=max_attempts,
            probe_interval=probe or None,
        )
    except ValueError as exc:
        raise ConfigError(f"{r.path}: [callhome] {exc}") from None


def load_agent_config(path, text: str | None = None) -> AgentConfig:
    r = _Reader(path, _read(path, text), AGENT_SECTIONS)
    listen = ListenConfig(r.get("listen", "address", "0.0.0.0"), r.port("listen", NETCONF_TLS_PORT)) \
        if r.has("listen") else None
    callhome = _policy(r) if r.has("callhome") else None
    if listen is None and callhome is None:
        raise ConfigError(f"{path}: need a [listen] or [callhome] section (or both)")
    cfg = AgentConfig(
        tls=r.tls(),
        listen=listen,
        callhome=callhome,
        startup_path=r.path_("agent", "startup_path"),
        sim_platform=r.boolean("agent", "sim_platform", True),
        journal_path=r.path_("agent", "journal_path"),
        restart_command=r.get("agent", "restart_command"),
        shutdown_command=r.get("agent", "shutdown_command"),
        hello_timeout=r.number("agent", "hello_timeout", 30.0),
    )
    if not cfg.sim_platform and not (cfg.restart_command and cfg.shutdown_command):
        r.fail("agent", "sim_platform", "false requires restart_command and shutdown_command")
    return cfg


def load_manager_config(path, text: str | None = None) -> ManagerConfig:
    r = _Reader(path, _read(path, text), MANAGER_SECTIONS)
    output = r.get("manager", "output", "xml")
    if output not in ("xml", "compact"):
        r.fail("manager", "output", f"{output!r} is not xml or compact")
    connect = None
    if r.has("connect"):
        connect = ListenConfig(r.require("connect", "address"), r.port("connect", NETCONF_TLS_PORT))
    ch = None
    if r.has("callhome_listen"):
        port = r.port("callhome_listen", CALLHOME_TLS_PORT)
        if port == CALLHOME_SSH_PORT:
            r.fail("callhome_listen", "port", "4334 is SSH call home, transport not built")
        ch = ListenConfig(r.get("callhome_listen", "address", "0.0.0.0"), port)
    return ManagerConfig(
        tls=r.tls(required=False),
        connect=connect,
        server_identity=r.get("connect", "server_identity"),
        callhome_listen=ch,
        probe_interval=r.number("callhome_listen", "probe_interval", 0.0) or None,
        output=output,
        reply_timeout=r.number("manager", "reply_timeout", 60.0),
        hello_timeout=r.number("manager", "hello_timeout", 30.0),
    )


def load_scenario(path) -> tuple[dict, dict]:
    """A natsim scenario: ``[scenario]`` settings and its ``assert.*`` keys."""
    cp = _read(path)
    if not cp.has_section("scenario"):
        raise ConfigError(f"{path}: missing [scenario] section")
    settings, asserts = {}, {}
    for key, value in cp.items("scenario"):
        if key.startswith("assert."):
            asserts[key[len("assert."):]] = value.strip()
        else:
            settings[key] = value.strip()
    return settings, asserts
