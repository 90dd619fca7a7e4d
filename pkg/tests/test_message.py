import pytest
from hypothesis import given, strategies as st
from lxml import etree

from netkit.message import (
    AGENT_CAPABILITIES,
    BASE_1_0,
    BASE_1_1,
    BASE_NS,
    CANDIDATE,
    ERROR_TAGS,
    ROLLBACK_ON_ERROR,
    STARTUP,
    VALIDATE_1_1,
    WITH_DEFAULTS,
    WRITABLE_RUNNING,
    CapabilitySet,
    MalformedHello,
    MalformedReply,
    MessageIdCounter,
    RpcError,
    build_data_reply,
    build_error_reply,
    build_hello,
    build_ok_reply,
    build_rpc,
    next_message_id,
    parse_hello,
    parse_rpc_reply,
    parse_xml,
    qn,
    serialize,
)
from netkit.sysmodel import SYS_NS

NETOPEER2_COLUMN = [BASE_1_0, BASE_1_1, WRITABLE_RUNNING, CANDIDATE, ROLLBACK_ON_ERROR,
                    STARTUP, VALIDATE_1_1, WITH_DEFAULTS]


def test_server_hello_structure():
    doc = build_hello([BASE_1_0, BASE_1_1], session_id=1)
    assert doc.tag == qn("hello")
    assert [c.text for c in doc.find(qn("capabilities"))] == [BASE_1_0, BASE_1_1]
    assert doc.find(qn("session-id")).text == "1"


def test_client_hello_has_no_session_id():
    doc = build_hello([BASE_1_0])
    assert doc.find(qn("session-id")) is None
    assert parse_hello(serialize(doc)) == (CapabilitySet([BASE_1_0]), None)


def test_hello_lists_every_uri_given():
    doc = build_hello(NETOPEER2_COLUMN, 7)
    assert len(doc.find(qn("capabilities"))) == 8


def test_agent_advertises_only_what_it_implements():
    assert list(AGENT_CAPABILITIES) == NETOPEER2_COLUMN[:7]


def test_unknown_capability_is_kept():
    caps, sid = parse_hello(serialize(build_hello([BASE_1_0, "urn:example:foo"], 3)))
    assert "urn:example:foo" in caps
    assert sid == 3


@pytest.mark.parametrize("xml", [
    f'<hello xmlns="{BASE_NS}"><capabilities/></hello>',
    f'<hello xmlns="{BASE_NS}"/>',
    '<hello><capabilities><capability>urn:x</capability></capabilities></hello>',
    f'<rpc xmlns="{BASE_NS}"/>',
    f'<hello xmlns="{BASE_NS}"><capabilities><capability>{BASE_1_0}</capability></capabilities>'
    '<session-id>abc</session-id></hello>',
    f'<hello xmlns="{BASE_NS}"><capabilities><capability>{BASE_1_0}</capability></capabilities>'
    '<session-id>0</session-id></hello>',
    '<hello',
])
def test_malformed_hello(xml):
    with pytest.raises(MalformedHello):
        parse_hello(xml)


uris = st.lists(st.from_regex(r"\Aurn:[a-z]{1,8}(:[a-z0-9.-]{1,8}){1,3}\Z"), min_size=1, max_size=10)


@given(uris, st.one_of(st.none(), st.integers(1, 2**31)))
def test_hello_round_trip(caps, sid):
    got_caps, got_sid = parse_hello(serialize(build_hello(caps, sid)))
    assert list(got_caps) == list(dict.fromkeys(caps))
    assert got_sid == sid


def test_capability_set_dedup_and_supports():
    caps = CapabilitySet([BASE_1_0, BASE_1_0, CANDIDATE, VALIDATE_1_1])
    assert len(caps) == 3
    assert caps.supports(":candidate")
    assert caps.supports("validate")
    assert not caps.supports(":startup")


def test_build_rpc_wraps_operation():
    op = parse_xml(f'<get-config xmlns="{BASE_NS}"><source><running/></source></get-config>'.encode())
    doc = build_rpc("1", op)
    assert doc.tag == qn("rpc")
    assert doc.get("message-id") == "1"
    assert list(doc) == [op]


def test_build_rpc_keeps_foreign_namespace():
    op = etree.Element(f"{{{SYS_NS}}}system-restart", nsmap={None: SYS_NS})
    wire = serialize(build_rpc("42", op))
    assert wire == (f'<rpc xmlns="{BASE_NS}" message-id="42">'
                    f'<system-restart xmlns="{SYS_NS}"/></rpc>').encode()


def test_build_rpc_empty_id():
    with pytest.raises(ValueError):
        build_rpc("", etree.Element(qn("get")))


def test_parse_ok_reply():
    reply = parse_rpc_reply(f'<rpc-reply xmlns="{BASE_NS}" message-id="1"><ok/></rpc-reply>')
    assert reply.kind == "ok"
    assert reply.message_id == "1"


def test_parse_lock_denied():
    xml = (f'<rpc-reply xmlns="{BASE_NS}" message-id="5"><rpc-error>'
           '<error-type>protocol</error-type><error-tag>lock-denied</error-tag>'
           '<error-severity>error</error-severity><error-info><session-id>3</session-id></error-info>'
           '</rpc-error></rpc-reply>')
    reply = parse_rpc_reply(xml)
    assert reply.kind == "errors"
    assert reply.error.error_tag == "lock-denied"
    assert reply.error.info("session-id") == "3"


@pytest.mark.parametrize("body", [
    "<ok/><rpc-error><error-type>rpc</error-type><error-tag>in-use</error-tag>"
    "<error-severity>error</error-severity></rpc-error>",
    "<ok/><data/>",
    "",
])
def test_malformed_reply(body):
    with pytest.raises(MalformedReply):
        parse_rpc_reply(f'<rpc-reply xmlns="{BASE_NS}" message-id="1">{body}</rpc-reply>')


def test_unknown_error_tag_rejected():
    with pytest.raises(ValueError):
        RpcError("not-a-tag")
    with pytest.raises(MalformedReply):
        parse_rpc_reply(f'<rpc-reply xmlns="{BASE_NS}" message-id="1"><rpc-error>'
                        '<error-type>rpc</error-type><error-tag>oops</error-tag>'
                        '<error-severity>error</error-severity></rpc-error></rpc-reply>')


def test_reply_echoes_attributes_with_message_id_first():
    wire = serialize(build_ok_reply("7", {"ex": "y", "message-id": "7"}))
    assert wire.startswith(f'<rpc-reply xmlns="{BASE_NS}" message-id="7" ex="y"'.encode())


def test_data_reply_round_trip():
    child = etree.Element(f"{{{SYS_NS}}}system", nsmap={None: SYS_NS})
    reply = parse_rpc_reply(serialize(build_data_reply("9", [child])))
    assert reply.kind == "data"
    assert reply.data[0].tag == f"{{{SYS_NS}}}system"


tags = st.sampled_from(sorted(ERROR_TAGS))
text = st.text(st.characters(min_codepoint=0x21, max_codepoint=0x7E, blacklist_characters="<&>"), min_size=1,
               max_size=30)


@given(tags, st.sampled_from(["transport", "rpc", "protocol", "application"]),
       st.sampled_from(["error", "warning"]), st.one_of(st.none(), text), st.one_of(st.none(), text))
def test_error_reply_round_trip(tag, etype, severity, message, path):
    err = RpcError(tag, etype, severity, message, path, [("bad-element", "x")])
    got = parse_rpc_reply(serialize(build_error_reply("3", [err]))).errors[0]
    assert (got.error_tag, got.error_type, got.severity, got.error_message, got.error_path) == \
        (tag, etype, severity, message, path)
    assert got.info("bad-element") == "x"


def test_message_ids():
    c = MessageIdCounter()
    assert next_message_id(c) == "1"
    next_message_id(c)
    assert next_message_id(c) == "3"
    ids = [next_message_id(c) for _ in range(10000)]
    assert len(set(ids)) == 10000
    assert [int(i) for i in ids] == sorted(int(i) for i in ids)
