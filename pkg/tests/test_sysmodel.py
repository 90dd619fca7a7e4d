import sys
import threading

import pytest
from hypothesis import given, strategies as st

from netkit.agent import Agent
from netkit.channel import loopback_pair
from netkit.clock import FakeClock
from netkit.datastore import Datastores, config_from_string, tree_from_string
from netkit.message import RpcError
from netkit.session import ManagerSession
from netkit.sysmodel import (
    SCHEMA,
    SYS_NS,
    CommandPlatform,
    JournalPlatform,
    SystemModel,
    UnknownPath,
    default_config,
    is_domain_name,
    timezones,
    validate,
)


def make_store(model, initial=None):
    return Datastores(schema=SCHEMA, validator=model.validate, state_provider=model.get_state,
                      on_running_change=model.on_running_change, initial=initial or default_config())


def sys_edit(inner):
    return config_from_string(f'<system xmlns="{SYS_NS}">{inner}</system>', SCHEMA, edit=True)


def recorder(model, prefix):
    seen = []
    model.register_callback(prefix, seen.append)
    return seen


# -- leaf diff oracle -----------------------------------------------------------
#
# Flatten each tree to {path: value} over its leaves; the expected events are
# the paths whose value differs, absent counting as None.

def flatten(node, prefix=""):
    out = {}
    for c in node.children:
        if c.name == "server":
            seg = f"server[name='{c.leaf('name')}']"
        elif c.name == "search":
            seg = f"search[.='{c.value}']"
        else:
            seg = c.name
        path = f"{prefix}/{seg}"
        if c.is_leaf:
            out[path] = c.value
        else:
            out.update(flatten(c, path))
    return out


def oracle_events(old, new):
    a, b = flatten(old), flatten(new)
    return {(p, a.get(p), b.get(p)) for p in a.keys() | b.keys() if a.get(p) != b.get(p)}


TZ = ["UTC", "Europe/Prague", "America/New_York", "Asia/Tokyo"]


@st.composite
def system_xml(draw):
    parts = [f"<hostname>{draw(st.sampled_from(['openwrt', 'gw', 'edge.example']))}</hostname>"]
    if draw(st.booleans()):
        parts.append(f"<location>{draw(st.sampled_from(['attic', 'hall']))}</location>")
    parts.append(f"<clock><timezone-name>{draw(st.sampled_from(TZ))}</timezone-name></clock>")
    names = draw(st.lists(st.sampled_from(["a", "b", "c"]), unique=True, max_size=3))
    search = draw(st.lists(st.sampled_from(["lan", "home.arpa", "example.net"]), unique=True, max_size=2))
    if names or search:
        resolver = "".join(f"<search>{s}</search>" for s in search)
        for n in names:
            addr = draw(st.sampled_from(["192.0.2.1", "192.0.2.2", "2001:db8::53"]))
            resolver += f"<server><name>{n}</name><udp-and-tcp><address>{addr}</address></udp-and-tcp></server>"
        parts.append(f"<dns-resolver>{resolver}</dns-resolver>")
    return f'<system xmlns="{SYS_NS}">{"".join(parts)}</system>'


@given(system_xml(), system_xml())
def test_commit_events_equal_leaf_diff(before_xml, after_xml):
    model = SystemModel()
    before = tree_from_string(before_xml, SCHEMA)
    after = tree_from_string(after_xml, SCHEMA)
    store = make_store(model, before)
    seen = recorder(model, "/system")
    store.copy_config(after, "candidate")
    store.commit(session_id=4)
    got = {(e.path, e.old_value, e.new_value) for e in seen}
    assert got == oracle_events(before, after)
    assert len(seen) == len(got)
    assert all(e.old_value != e.new_value and e.source_session == 4 for e in seen)


def test_timezone_callback_fires_once():
    model = SystemModel()
    store = make_store(model)
    tz = recorder(model, "/system/clock/timezone-name")
    store.edit_config("candidate", sys_edit("<clock><timezone-name>Europe/Prague</timezone-name></clock>"))
    store.commit(session_id=1)
    assert [(e.path, e.old_value, e.new_value) for e in tz] == \
        [("/system/clock/timezone-name", "UTC", "Europe/Prague")]


def test_hostname_commit_skips_timezone_handler():
    model = SystemModel()
    store = make_store(model)
    tz = recorder(model, "/system/clock")
    host = recorder(model, "/system/hostname")
    store.edit_config("candidate", sys_edit("<hostname>gw</hostname>"))
    store.commit()
    assert tz == []
    assert len(host) == 1


def test_two_edits_collapse_into_one_event():
    model = SystemModel()
    store = make_store(model)
    seen = recorder(model, "/system/hostname")
    store.edit_config("candidate", sys_edit("<hostname>first</hostname>"))
    store.edit_config("candidate", sys_edit("<hostname>second</hostname>"))
    store.commit()
    assert [(e.old_value, e.new_value) for e in seen] == [("openwrt", "second")]


def test_direct_running_edit_fires():
    model = SystemModel()
    store = make_store(model)
    seen = recorder(model, "/system")
    store.edit_config("running", sys_edit("<location>hall</location>"), session_id=2)
    assert [(e.path, e.new_value, e.source_session) for e in seen] == [("/system/location", "hall", 2)]


def test_no_events_for_failures():
    model = SystemModel()
    store = make_store(model)
    seen = recorder(model, "/system")
    store.commit()  # clean candidate
    with pytest.raises(RpcError):
        store.edit_config("running", sys_edit('<location>x</location><contact operation="delete"/>'),
                          error_op="rollback-on-error")
    with pytest.raises(RpcError):
        store.edit_config("running", sys_edit("<hostname>not valid!</hostname>"))
    store.edit_config("candidate", sys_edit("<hostname>not valid!</hostname>"))
    with pytest.raises(RpcError):
        store.commit()
    assert seen == []


def test_handlers_in_registration_order_and_cancel():
    model = SystemModel()
    store = make_store(model)
    calls = []
    first = model.register_callback("/system/hostname", lambda e: calls.append("first"))
    model.register_callback("/system", lambda e: calls.append("second"))
    store.edit_config("running", sys_edit("<hostname>a</hostname>"))
    first.cancel()
    store.edit_config("running", sys_edit("<hostname>b</hostname>"))
    assert calls == ["first", "second", "second"]


def test_failing_handler_does_not_abort_commit():
    model = SystemModel()
    store = make_store(model)
    model.register_callback("/system", lambda e: 1 / 0)
    store.edit_config("running", sys_edit("<hostname>a</hostname>"))
    assert store.get_config("running").leaf("system/hostname") == "a"


@pytest.mark.parametrize("path", ["/system/clock/timezone", "/system/bogus", "/system-state/clock", "/other"])
def test_register_outside_schema(path):
    with pytest.raises(UnknownPath):
        SystemModel().register_callback(path, print)


def test_register_list_path():
    SystemModel().register_callback("/system/dns-resolver/server[name='a']/udp-and-tcp", print)


def test_state_on_fake_clock():
    clock = FakeClock(start=1_700_000_000)
    model = SystemModel(clock=clock)
    state = model.get_state()
    assert state.leaf("system-state/clock/uptime") == "0"
    assert state.leaf("system-state/clock/boot-datetime") == "2023-11-14T22:13:20Z"
    clock.advance(90)
    state = model.get_state()
    assert state.leaf("system-state/clock/uptime") == "90"
    assert state.leaf("system-state/clock/current-datetime") == "2023-11-14T22:14:50Z"
    assert state.leaf("system-state/clock/boot-datetime") == "2023-11-14T22:13:20Z"


def test_validation_vectors():
    good = tree_from_string(
        f'<system xmlns="{SYS_NS}"><hostname>edge-1.example.</hostname>'
        '<clock><timezone-name>Europe/Prague</timezone-name></clock>'
        '<dns-resolver><search>lan</search><server><name>v6</name><udp-and-tcp><address>2001:db8::1</address>'
        '<port>53</port></udp-and-tcp></server><options><timeout>5</timeout><attempts>2</attempts></options>'
        '</dns-resolver></system>', SCHEMA)
    validate(good)
    for inner, tag in [
        ("<hostname></hostname>", "invalid-value"),
        (f"<hostname>{'a' * 64}</hostname>", "invalid-value"),
        ("<hostname>a.b</hostname><hostname>c</hostname>", "invalid-value"),
        ("<dns-resolver><server><udp-and-tcp><address>192.0.2.1</address></udp-and-tcp></server></dns-resolver>",
         "missing-element"),
        ("<dns-resolver><server><name>x</name><udp-and-tcp><port>0</port></udp-and-tcp></server></dns-resolver>",
         "invalid-value"),
        ("<dns-resolver><options><timeout>61</timeout></options></dns-resolver>", "invalid-value"),
        ("<dns-resolver><search>-bad</search></dns-resolver>", "invalid-value"),
    ]:
        with pytest.raises(RpcError) as exc:
            validate(tree_from_string(f'<system xmlns="{SYS_NS}">{inner}</system>', SCHEMA))
        assert exc.value.error_tag == tag, inner
    with pytest.raises(RpcError):
        validate(tree_from_string('<system xmlns="urn:example:other"><hostname>x</hostname></system>', SCHEMA))


def test_domain_names():
    assert is_domain_name("a" * 63)
    assert not is_domain_name("a" * 64)
    assert is_domain_name(".".join(["a" * 62] * 4))
    assert not is_domain_name(".".join(["a" * 63] * 4))
    assert not is_domain_name("x..y")


def test_timezone_list():
    zones = timezones()
    assert len(zones) > 400
    assert {"UTC", "Europe/Prague", "America/Argentina/Buenos_Aires"} <= zones


def test_journal_records(tmp_path):
    clock = FakeClock(start=1_700_000_000)
    path = tmp_path / "journal.log"
    model = SystemModel(platform=JournalPlatform(path, clock), clock=clock)
    model.rpc_system_restart()
    clock.advance(5)
    model.rpc_system_shutdown()
    assert path.read_text().splitlines() == ["2023-11-14T22:13:20Z restart", "2023-11-14T22:13:25Z shutdown"]


def test_command_platform(tmp_path):
    ok = f"{sys.executable} -c pass"
    bad = f"{sys.executable} -c 'import sys; sys.stderr.write(\"no power\"); sys.exit(3)'"
    model = SystemModel(platform=CommandPlatform(ok, bad, tmp_path / "j.log"))
    model.rpc_system_restart()
    assert (tmp_path / "j.log").read_text().endswith(" restart\n")
    with pytest.raises(RpcError) as exc:
        model.rpc_system_shutdown()
    assert exc.value.error_tag == "operation-failed"
    assert "no power" in exc.value.error_message
    missing = SystemModel(platform=CommandPlatform("/nonexistent/hook", ok))
    with pytest.raises(RpcError):
        missing.rpc_system_restart()


def rpc_session(agent):
    a, b = loopback_pair()
    threading.Thread(target=agent.handle, args=(b, "admin"), daemon=True).start()
    return ManagerSession.establish(a, reply_timeout=10)


@pytest.mark.parametrize("op", ["system-restart", "system-shutdown"])
def test_platform_rpcs_over_a_session(op):
    platform = JournalPlatform()
    agent = Agent(initial=default_config(), platform=platform)
    s = rpc_session(agent)
    assert s.call(f'<{op} xmlns="{SYS_NS}"/>').kind == "ok"
    assert [r.split()[1] for r in platform.records] == [op.split("-")[1]]
    assert s.get_config().kind == "data"  # still serving
    s.close_session()
    agent.close()


def test_failing_hook_over_a_session():
    agent = Agent(initial=default_config(), platform=CommandPlatform(f"{sys.executable} -c 'exit(1)'", "true"))
    s = rpc_session(agent)
    reply = s.call(f'<system-restart xmlns="{SYS_NS}"/>')
    assert reply.error.error_tag == "operation-failed"
    s.close_session()
    agent.close()
