import threading
from pathlib import Path

import pytest
from hypothesis import settings

from netkit.agent import Agent
from netkit.channel import loopback_pair
from netkit.session import ManagerSession
from netkit.sysmodel import default_config
from netkit.tls import CertToNameEntry, TlsEndpointConfig, fingerprint, load_pem_certs, tls_accept, tls_connect

settings.register_profile("ci", deadline=None, max_examples=100)
settings.load_profile("ci")

FIXTURES = Path(__file__).parent / "fixtures"
CERTS = FIXTURES / "certs"

# openssl x509 -fingerprint -sha256, lowercased
ADMIN_FP = "sha-256:55:63:82:1d:4f:1b:06:09:13:c8:8d:df:87:e8:74:93:82:53:aa:47:ad:fb:6a:f4:34:44:a6:29:52:79:06:77"
AGENT_FP = "sha-256:26:44:bb:ec:88:c9:a9:14:e7:1f:00:12:02:02:5a:c6:43:f1:29:73:63:66:38:c9:18:0a:2f:a3:ee:17:43:a4"
GUEST_FP = "sha-256:75:69:db:4f:ab:38:77:31:be:d2:91:89:e8:47:bb:48:44:0a:49:8b:5a:ac:b8:90:ab:75:38:46:51:76:36:39"
UNMAPPED_FP = "sha-256:8f:ae:fb:dd:de:fd:07:02:28:78:af:21:49:c0:95:25:71:42:47:47:55:9a:56:bf:cb:b3:37:77:25:fa:c9:2a"
ROGUE_FP = "sha-256:62:97:15:dc:0a:25:9f:75:b8:4f:b7:ce:85:45:b2:41:0f:1f:47:be:84:58:39:81:e8:5f:31:3d:d2:9c:50:0c"


def cert(name):
    return str(CERTS / f"{name}.crt")


def key(name):
    return str(CERTS / f"{name}.key")


def der(name):
    return load_pem_certs(cert(name))[0]


def endpoint(name, anchors=("ca",), cert_map=(), **kw):
    return TlsEndpointConfig(cert(name), key(name), [cert(a) for a in anchors], list(cert_map), **kw)


def agent_tls(**kw):
    return endpoint("agent", cert_map=[CertToNameEntry(ADMIN_FP, "admin"), CertToNameEntry(GUEST_FP, "guest")], **kw)


def manager_tls(name="admin", **kw):
    return endpoint(name, **kw)


class Rig:
    """An agent and any number of manager sessions over TLS on loopback pipes."""

    def __init__(self, agent, clock=None):
        self.agent = agent
        self.clock = clock
        self.threads = []
        self.sessions = []

    def connect(self, who="admin", caps=None, faults_ab=None, faults_ba=None):
        a, b = loopback_pair(self.clock, faults_ab, faults_ba)
        t = threading.Thread(target=self._serve, args=(b,), daemon=True)
        t.start()
        self.threads.append(t)
        chan = tls_connect(a, manager_tls(who), "agent.example")
        kw = {} if caps is None else {"local_caps": caps}
        s = ManagerSession.establish(chan, reply_timeout=10, **kw)
        self.sessions.append(s)
        return s

    def _serve(self, raw):
        chan, user = tls_accept(raw, agent_tls())
        self.agent.handle(chan, user)

    def close(self):
        for s in self.sessions:
            s.close_session()
        for t in self.threads:
            t.join(5)


@pytest.fixture
def rig():
    r = Rig(Agent(initial=default_config()))
    yield r
    r.close()
