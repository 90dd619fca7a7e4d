"""Integrated mutual-TLS transport with certificate-to-username mapping.

TLS itself is the stdlib ``ssl`` module driven through memory BIOs, so the
same code secures a TCP socket, an accepted call-home connection or an
in-memory loopback channel. This module owns configuration, policy and the
fingerprint map; no cryptography is implemented here.
"""

from __future__ import annotations

import dataclasses
import hashlib
import ipaddress
import logging
import re
import ssl
import threading
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives.serialization import Encoding

from .channel import ChannelClosed

log = logging.getLogger(__name__)

FINGERPRINT_ALGORITHMS = {"sha-256": (hashlib.sha256, 32)}
_FP_RE = re.compile(r"^(?P<algo>[a-z0-9-]+):(?P<hex>[0-9a-f]{2}(?::[0-9a-f]{2})*)$")


class TlsError(Exception):
    pass


class BadCertificate(TlsError):
    pass


class HandshakeFailed(TlsError):
    pass


class NoMapping(TlsError):
    """Authenticated peer certificate has no username mapping."""


class IdentityMismatch(TlsError):
    pass


class TlsConfigError(ValueError):
    pass


def fingerprint(der: bytes, algo: str = "sha-256") -> str:
    """``sha-256:aa:bb:...`` digest of a DER certificate."""
    if algo not in FINGERPRINT_ALGORITHMS:
        raise ValueError(f"unsupported fingerprint algorithm {algo!r}")
    try:
        x509.load_der_x509_certificate(der)
    except (ValueError, TypeError) as exc:
        raise BadCertificate(f"cannot parse certificate: {exc}") from None
    digest = FINGERPRINT_ALGORITHMS[algo][0](der).digest()
    return algo + ":" + ":".join(f"{b:02x}" for b in digest)


def load_pem_certs(path) -> list[bytes]:
    """DER bytes of every certificate in a PEM file."""
    data = Path(path).read_bytes()
    try:
        certs = x509.load_pem_x509_certificates(data)
    except ValueError as exc:
        raise BadCertificate(f"{path}: {exc}") from None
    return [c.public_bytes(Encoding.DER) for c in certs]


@dataclasses.dataclass(frozen=True)
class CertToNameEntry:
    fingerprint: str
    username: str

    def __post_init__(self):
        fp = self.fingerprint.strip().lower()
        m = _FP_RE.match(fp)
        if not m:
            raise TlsConfigError(f"malformed fingerprint {self.fingerprint!r}")
        algo = m.group("algo")
        if algo not in FINGERPRINT_ALGORITHMS:
            raise TlsConfigError(f"unsupported fingerprint algorithm {algo!r}")
        want = FINGERPRINT_ALGORITHMS[algo][1]
        if len(m.group("hex").split(":")) != want:
            raise TlsConfigError(f"{algo} fingerprint needs {want} bytes: {self.fingerprint!r}")
        if not self.username:
            raise TlsConfigError("empty username in cert map")
        object.__setattr__(self, "fingerprint", fp)


def check_cert_map(entries) -> tuple[CertToNameEntry, ...]:
    entries = tuple(entries)
    seen = set()
    for e in entries:
        if e.fingerprint in seen:
            raise TlsConfigError(f"duplicate cert map fingerprint {e.fingerprint}")
        seen.add(e.fingerprint)
    return entries


def cert_to_username(peer_der: bytes, cert_map) -> str:
    """Username of the first map entry whose fingerprint matches the certificate."""
    cache: dict[str, str] = {}
    for entry in cert_map:
        algo = entry.fingerprint.split(":", 1)[0]
        if algo not in cache:
            cache[algo] = fingerprint(peer_der, algo)
        if cache[algo] == entry.fingerprint:
            return entry.username
    raise NoMapping(f"no cert map entry for {fingerprint(peer_der)}")


@dataclasses.dataclass
class TlsEndpointConfig:
    cert_file: str
    key_file: str
    trust_anchors: list = dataclasses.field(default_factory=list)
    cert_map: tuple = ()
    min_version: ssl.TLSVersion = ssl.TLSVersion.TLSv1_2
    # test hook: cap the protocol version this endpoint offers
    max_version: ssl.TLSVersion | None = None

    def __post_init__(self):
        if self.min_version < ssl.TLSVersion.TLSv1_2:
            raise TlsConfigError("TLS below 1.2 is not permitted")
        if not self.trust_anchors:
            raise TlsConfigError("at least one trust anchor is required")
        self.cert_map = check_cert_map(self.cert_map)
        self._contexts: dict[str, ssl.SSLContext] = {}

    def _context(self, server_side: bool) -> ssl.SSLContext:
        key = "server" if server_side else "client"
        if key in self._contexts:
            return self._contexts[key]
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER if server_side else ssl.PROTOCOL_TLS_CLIENT)
        ctx.minimum_version = self.min_version
        if self.max_version is not None:
            ctx.maximum_version = self.max_version
        ctx.check_hostname = False  # identity is checked explicitly
        ctx.verify_mode = ssl.CERT_REQUIRED
        for anchor in self.trust_anchors:
            ctx.load_verify_locations(cafile=str(anchor))
        ctx.load_cert_chain(str(self.cert_file), str(self.key_file))
        self._contexts[key] = ctx
        return ctx

    def server_context(self) -> ssl.SSLContext:
        return self._context(True)

    def client_context(self) -> ssl.SSLContext:
        return self._context(False)


class TlsChannel:
    """TLS session over a raw byte channel. Same interface as the raw channel."""

    def __init__(self, raw, context: ssl.SSLContext, server_side: bool):
        self.raw = raw
        self.initiator = raw.initiator
        self.peer = getattr(raw, "peer", None)
        self.clock = raw.clock
        self._in = ssl.MemoryBIO()
        self._out = ssl.MemoryBIO()
        self._ssl = context.wrap_bio(self._in, self._out, server_side=server_side)
        self._lock = threading.Lock()
        self._read_lock = threading.Lock()
        self._closed = False
        self.username: str | None = None
        self.bytes_sent = 0
        self.bytes_received = 0

    def _flush(self) -> None:
        data = self._out.read()
        if data:
            self.raw.send(data)

    def _fill(self, timeout) -> bool:
        data = self.raw.recv(65536, timeout=timeout)
        with self._lock:
            if data:
                self._in.write(data)
            else:
                self._in.write_eof()
        return bool(data)

    def handshake(self, timeout: float | None) -> None:
        deadline = None if timeout is None else self.clock.monotonic() + timeout
        while True:
            with self._lock:
                try:
                    self._ssl.do_handshake()
                    self._flush()
                    return
                except ssl.SSLWantReadError:
                    self._flush()
                except ssl.SSLError:
                    # deliver our alert before the caller drops the connection
                    try:
                        self._flush()
                    except (OSError, ConnectionError):
                        pass
                    raise
            remaining = None if deadline is None else max(0.0, deadline - self.clock.monotonic())
            try:
                if not self._fill(remaining):
                    # one more pass lets ssl report the real alert, if any
                    with self._lock:
                        self._ssl.do_handshake()
                    raise HandshakeFailed("peer closed during TLS handshake")
            except TimeoutError:
                raise HandshakeFailed("TLS handshake timed out") from None

    @property
    def version(self) -> str | None:
        return self._ssl.version()

    def peer_cert_der(self) -> bytes | None:
        return self._ssl.getpeercert(binary_form=True)

    def peer_cert(self) -> dict:
        return self._ssl.getpeercert() or {}

    def send(self, data: bytes) -> None:
        with self._lock:
            if self._closed:
                raise ChannelClosed("channel closed")
            self._ssl.write(data)
            self.bytes_sent += len(data)
            self._flush()

    def recv(self, bufsize: int = 65536, timeout: float | None = None) -> bytes:
        deadline = None if timeout is None else self.clock.monotonic() + timeout
        with self._read_lock:
            while True:
                with self._lock:
                    if self._closed:
                        return b""
                    try:
                        data = self._ssl.read(bufsize)
                        self._flush()
                        self.bytes_received += len(data)
                        return data
                    except ssl.SSLWantReadError:
                        self._flush()
                    except (ssl.SSLZeroReturnError, ssl.SSLEOFError):
                        return b""
                    except ssl.SSLError as exc:
                        log.debug("TLS read failed: %s", exc)
                        return b""
                remaining = None if deadline is None else max(0.0, deadline - self.clock.monotonic())
                if remaining == 0.0:
                    raise TimeoutError("recv timed out")
                self._fill(remaining)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            try:
                self._ssl.unwrap()
            except ssl.SSLError:
                pass
            try:
                self._flush()
            except (OSError, ConnectionError):
                pass
        self.raw.close()

    @property
    def closed(self) -> bool:
        return self._closed


def tls_accept(raw, config: TlsEndpointConfig, timeout: float | None = 30.0):
    """Run the TLS server side over ``raw``; return ``(channel, username)``.

    A client certificate is demanded and must chain to a trust anchor and
    appear in the cert map. On any failure the raw channel is closed before
    a single application byte is read or written.
    """
    chan = TlsChannel(raw, config.server_context(), server_side=True)
    try:
        chan.handshake(timeout)
    except HandshakeFailed:
        raw.close()
        raise
    except (ssl.SSLError, OSError) as exc:
        raw.close()
        raise HandshakeFailed(str(exc)) from None
    der = chan.peer_cert_der()
    if der is None:
        raw.close()
        raise HandshakeFailed("client presented no certificate")
    try:
        chan.username = cert_to_username(der, config.cert_map)
    except NoMapping:
        raw.close()
        raise
    log.info("TLS peer authenticated as %r (%s)", chan.username, chan.version)
    return chan, chan.username


def _identity_matches(cert: dict, identity: str) -> bool:
    try:
        want_ip = ipaddress.ip_address(identity)
    except ValueError:
        want_ip = None
    sans = cert.get("subjectAltName", ())
    for kind, value in sans:
        if want_ip is not None and kind == "IP Address":
            try:
                if ipaddress.ip_address(value.strip()) == want_ip:
                    return True
            except ValueError:
                continue
        elif want_ip is None and kind == "DNS":
            if _dns_match(value, identity):
                return True
    if not any(kind == "DNS" for kind, _ in sans) and want_ip is None:
        for rdn in cert.get("subject", ()):
            for key, value in rdn:
                if key == "commonName" and _dns_match(value, identity):
                    return True
    return False


def _dns_match(pattern: str, name: str) -> bool:
    pattern, name = pattern.lower().rstrip("."), name.lower().rstrip(".")
    if pattern.startswith("*."):
        head, _, rest = name.partition(".")
        return bool(head) and rest == pattern[2:]
    return pattern == name


def tls_connect(raw, config: TlsEndpointConfig, expected_identity: str | None = None,
                timeout: float | None = 30.0) -> TlsChannel:
    """Run the TLS client side over ``raw``.

    The server chain is always verified. With ``expected_identity`` the
    certificate must name it; with a non-empty cert map (call home, where
    the TCP direction makes names meaningless) the server certificate must
    be mapped instead.
    """
    chan = TlsChannel(raw, config.client_context(), server_side=False)
    try:
        chan.handshake(timeout)
    except HandshakeFailed:
        raw.close()
        raise
    except (ssl.SSLError, OSError) as exc:
        raw.close()
        raise HandshakeFailed(str(exc)) from None
    if expected_identity is not None and not _identity_matches(chan.peer_cert(), expected_identity):
        raw.close()
        raise IdentityMismatch(f"server certificate does not name {expected_identity!r}")
    if config.cert_map:
        try:
            chan.username = cert_to_username(chan.peer_cert_der(), config.cert_map)
        except NoMapping:
            raw.close()
            raise
    return chan
