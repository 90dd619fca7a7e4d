"""Acceptance criteria. Each test prints one PASS/FAIL line, then asserts."""

import copy
import random
import ssl
import threading
import time
from pathlib import Path

import pytest

from conftest import agent_tls, manager_tls
from netkit.agent import Agent
from netkit.channel import loopback_pair
from netkit.cli import natsim
from netkit.datastore import Datastores, config_from_string
from netkit.framing import EOM, FramingVersion, NoCommonBase, decode_chunked, decode_eom, encode_chunked, encode_eom
from netkit.message import BASE_1_0, BASE_1_1, RpcError
from netkit.session import ManagerSession
from netkit.sysmodel import SCHEMA, SYS_NS, SystemModel, default_config
from netkit.tls import HandshakeFailed, NoMapping, tls_accept, tls_connect
from netkit.tree import canonical
from test_datastore import CONTAINERS, LEAVES, VALUES, OracleError, as_list, edits_to_nodes, node_as_list, \
    oracle_edit, to_node
from test_sysmodel import oracle_events
from test_tls import APPLICATION_DATA, tls_records

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


# 1 -----------------------------------------------------------------------------

def test_criterion_1_framing_round_trip(report):
    rng = random.Random(1)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        payload = rng.randbytes(rng.randint(0, 64 * 1024))
        while EOM in payload:
            payload = rng.randbytes(len(payload))
        max_chunk = rng.choice([1, 2, 3, 16, 4096])
        if decode_chunked(encode_chunked(payload, max_chunk)) != payload:
            mismatches += 1
        if decode_eom(encode_eom(payload)) != payload:
            mismatches += 1
    elapsed = time.perf_counter() - start
    report(1, mismatches == 0 and elapsed < 10,
           f"1000 payloads x 2 codecs, {mismatches} mismatches, {elapsed:.2f} s (limit 10 s)")


# 2 -----------------------------------------------------------------------------

def negotiate(manager_caps, agent_caps):
    agent = Agent(initial=default_config(), capabilities=agent_caps)
    a, b = loopback_pair()
    t = threading.Thread(target=agent.handle, args=(b, "admin"), daemon=True)
    t.start()
    try:
        s = ManagerSession.establish(a, manager_caps, hello_timeout=5)
    except NoCommonBase:
        t.join(5)
        return "NoCommonBase"
    (peer,) = agent.sessions.values()
    end = time.monotonic() + 5
    while peer.negotiated is None and time.monotonic() < end:
        time.sleep(0.005)
    assert peer.negotiated is s.negotiated
    s.close_session()
    t.join(5)
    return "CHUNKED" if s.negotiated is FramingVersion.CHUNKED_1_1 else "EOM"


def test_criterion_2_negotiation_matrix(report):
    only10, both = [BASE_1_0], [BASE_1_0, BASE_1_1]
    got = [negotiate(m, a) for m, a in ((only10, only10), (only10, both), (both, only10), (both, both))]
    got.append(negotiate([BASE_1_1], only10))
    want = ["EOM", "EOM", "EOM", "CHUNKED", "NoCommonBase"]
    report(2, got == want, f"expected {want}, got {got}")


# 3 -----------------------------------------------------------------------------

def test_criterion_3_call_home_nat(report):
    out, _ = natsim.run_scenario(FIXTURES / "natsim" / "baseline.scn")
    ok = (out.agent_unreachable and out.sessions == 1 and out.exit_code == 0
          and "<hostname>openwrt</hostname>" in out.output
          and out.role_reversal == [True] and out.wall_to_reply is not None and out.wall_to_reply < 2)
    report(3, ok, f"agent unreachable={out.agent_unreachable}, sessions={out.sessions}, "
                  f"role reversal={out.role_reversal}, reply in {out.wall_to_reply:.3f} s (limit 2 s)")


# 4 -----------------------------------------------------------------------------

def attempt(who, anchors=("ca",)):
    """One manager connection; returns (outcome, bytes of TLS application data seen)."""
    agent = Agent(initial=default_config())
    a, b = loopback_pair()
    up, down = a.record(), b.record()
    result = {}

    def serve():
        try:
            chan, user = tls_accept(b, agent_tls(max_version=ssl.TLSVersion.TLSv1_2), timeout=10)
        except Exception as exc:
            result["agent"] = exc
            return
        agent.handle(chan, user)

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    try:
        chan = tls_connect(a, manager_tls(who, anchors=anchors), "agent.example", timeout=10)
        s = ManagerSession.establish(chan, hello_timeout=5)
        (peer,) = agent.sessions.values()
        result["outcome"] = f"session:{peer.username}"
        s.close_session()
    except Exception:
        pass
    t.join(10)
    if "agent" in result:
        result["outcome"] = type(result["agent"]).__name__
    app = [r for r in tls_records(b"".join(up)) + tls_records(b"".join(down)) if r == APPLICATION_DATA]
    return result.get("outcome"), len(app)


def test_criterion_4_mutual_auth_gate(report):
    mapped = attempt("admin")
    unmapped = attempt("unmapped")
    untrusted = attempt("rogue", anchors=("ca", "rogue-ca"))
    got = (mapped[0], unmapped[0], untrusted[0])
    want = ("session:admin", NoMapping.__name__, HandshakeFailed.__name__)
    ok = got == want and mapped[1] > 0 and unmapped[1] == 0 and untrusted[1] == 0
    report(4, ok, f"outcomes {got}; application-data records in failures: "
                  f"unmapped={unmapped[1]}, untrusted={untrusted[1]}")


# 5 -----------------------------------------------------------------------------

def pick_names(rng, depth):
    pool = LEAVES + (CONTAINERS if depth > 1 else [])
    return rng.sample(pool, rng.randint(0, min(3, len(pool))))


def random_tree(rng, depth=4):
    names = pick_names(rng, depth)
    return {n: rng.choice(VALUES) if n in LEAVES else random_tree(rng, depth - 1) for n in names}


def random_edit(rng, depth=4):
    names = pick_names(rng, depth)
    ops = [None, None, "merge", "replace", "create", "delete", "remove"]
    return [(n, rng.choice(ops), rng.choice(VALUES) if n in LEAVES else random_edit(rng, depth - 1))
            for n in names]


def count_nodes(tree):
    return sum(1 + (0 if isinstance(v, str) else count_nodes(v)) for v in tree.values())


def test_criterion_5_edit_oracle(report):
    rng = random.Random(5)
    matched = pairs = restored = failing = 0
    while pairs < 500 or failing < 100:
        tree = random_tree(rng)
        if count_nodes(tree) > 30:
            continue
        edits = random_edit(rng)
        default_op = rng.choice(["merge", "replace", "none"])
        expected = copy.deepcopy(tree)
        try:
            oracle_edit(expected, edits, default_op)
            want = ("ok", as_list(expected))
        except OracleError as exc:
            want = ("error", exc.tag)
        store = Datastores(initial=to_node(tree))
        before = canonical(store.snapshot("running"))
        try:
            store.edit_config("running", edits_to_nodes(edits), default_op, "rollback-on-error")
            got = ("ok", node_as_list(store.snapshot("running")))
        except RpcError as exc:
            got = ("error", exc.error_tag)
        if pairs < 500:
            pairs += 1
            matched += got == want
        if want[0] == "error" and failing < 100:
            failing += 1
            restored += canonical(store.snapshot("running")) == before
    report(5, matched == 500 and restored == 100,
           f"{matched}/500 edits match the oracle; {restored}/100 failed edits restored byte-identical")


# 6 -----------------------------------------------------------------------------

def test_criterion_6_candidate_lifecycle(report):
    model = SystemModel()
    store = Datastores(schema=SCHEMA, validator=model.validate, state_provider=model.get_state,
                       on_running_change=model.on_running_change, initial=default_config())
    events = []
    model.register_callback("/system", events.append)
    edit = config_from_string(
        f'<system xmlns="{SYS_NS}"><hostname>edge</hostname><clock><timezone-name>Europe/Prague'
        '</timezone-name></clock><dns-resolver><server><name>isp</name><udp-and-tcp><address>192.0.2.53'
        '</address></udp-and-tcp></server></dns-resolver></system>', SCHEMA, edit=True)
    running_before = store.snapshot("running")
    store.edit_config("candidate", edit)
    untouched = canonical(store.snapshot("running")) == canonical(running_before)
    candidate = store.snapshot("candidate")
    store.commit(session_id=1)
    committed = canonical(store.snapshot("running")) == canonical(candidate) and not store.dirty
    got = {(e.path, e.old_value, e.new_value) for e in events}
    diff_ok = got == oracle_events(running_before, candidate) and len(events) == len(got) == 4
    store.edit_config("candidate", config_from_string(f'<system xmlns="{SYS_NS}"><hostname>x</hostname></system>',
                                                      SCHEMA, edit=True))
    store.discard_changes()
    discarded = canonical(store.snapshot("candidate")) == canonical(store.snapshot("running")) and not store.dirty
    report(6, untouched and committed and diff_ok and discarded,
           f"running untouched by candidate edit={untouched}, commit applied={committed}, "
           f"callbacks equal diff ({len(events)} events)={diff_ok}, discard restores={discarded}")


# 7 -----------------------------------------------------------------------------

def test_criterion_7_lock_exclusion(report):
    agent = Agent(initial=default_config())

    def connect():
        a, b = loopback_pair()
        threading.Thread(target=agent.handle, args=(b, "admin"), daemon=True).start()
        s = ManagerSession.establish(a, reply_timeout=5)
        s.raw = a
        return s

    first, second = connect(), connect()
    first.lock("running")
    denied = second.lock("running").error
    cited = denied is not None and denied.error_tag == "lock-denied" and \
        denied.info("session-id") == str(first.session_id)
    first.raw.close()
    end = time.monotonic() + 5
    while first.session_id in agent.sessions and time.monotonic() < end:
        time.sleep(0.01)
    third = connect()
    released = third.lock("running").kind == "ok"
    for s in (second, third):
        s.close_session()
    report(7, cited and released, f"lock-denied citing holder {first.session_id}: {cited}; "
                                  f"released on drop: {released}")


# 8 -----------------------------------------------------------------------------

# attempt times after manager death, exactly as the criterion states them
CRITERION_8_SCHEDULE = [1, 3, 7, 15, 31, 91, 151]


def test_criterion_8_reconnect_schedule(report):
    out, _ = natsim.run_scenario(FIXTURES / "natsim" / "manager-death.scn")
    got = [int(t) if t == int(t) else t for t in out.schedule[:len(CRITERION_8_SCHEDULE)]]
    report(8, got == CRITERION_8_SCHEDULE, f"expected {CRITERION_8_SCHEDULE}, got {got}")


# 9 -----------------------------------------------------------------------------

def trace(caps):
    """Bytes on the wire for hello, get-config and close-session, both directions."""
    agent = Agent(initial=default_config())
    a, b = loopback_pair()
    up, down = a.record(), b.record()
    t = threading.Thread(target=agent.handle, args=(b, "admin"), daemon=True)
    t.start()
    s = ManagerSession.establish(a, caps, reply_timeout=5)
    s.get_config("running")
    s.close_session()
    t.join(5)
    return b"--- manager to agent\n" + b"".join(up) + b"\n--- agent to manager\n" + b"".join(down) + b"\n"


@pytest.mark.parametrize("name,caps", [("eom", [BASE_1_0]), ("chunked", [BASE_1_0, BASE_1_1])])
def test_criterion_9_golden_traces(report, name, caps):
    runs = [trace(caps) for _ in range(3)]
    golden = (GOLDEN / f"trace-{name}.txt").read_bytes()
    same = all(r == golden for r in runs)
    framed = (b"\n#" in golden) == (name == "chunked")
    report(9, same and framed, f"{name}: 3 runs byte-identical to golden trace ({len(golden)} bytes): {same}")
