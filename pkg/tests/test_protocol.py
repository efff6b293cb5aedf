import json
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdsframe import protocol as proto
from cdsframe.errors import FrameTooLarge, NeedMoreData, ParseError, ProtocolError
from cdsframe.protocol import Envelope, SessionState, decode_frame, encode_frame, step_session

GOOD = {"username": "alice", "password": "pw"}


def sample_payload(mtype):
    filler = {str: "x", int: 1, bool: True, list: []}
    return {name: filler[kind] for name, kind in proto.MESSAGE_TYPES[mtype].items()}


def error_with_body_len(n):
    base = len(proto.encode_body(Envelope("ERROR", "", 0, {"code": "X", "message": ""})))
    return Envelope("ERROR", "", 0, {"code": "X", "message": "a" * (n - base)})


def test_empty_payload_prefix_matches_body():
    env = Envelope("MA2_TAMPER_RESP", "s", 1, {"ok": True})
    frame = encode_frame(env)
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    body = proto.encode_body(Envelope("ERROR", "s", 1, {}))
    assert json.loads(body)["payload"] == {}


envelopes = st.sampled_from(sorted(proto.MESSAGE_TYPES)).flatmap(
    lambda t: st.builds(
        Envelope,
        st.just(t),
        st.text(max_size=20),
        st.integers(0, 2**40),
        st.just(sample_payload(t)).map(lambda p: dict(p, extra="é✓")),
    )
)


@given(envelopes)
def test_frame_roundtrip(env):
    assert decode_frame(encode_frame(env)) == env


def test_frame_size_boundary():
    at_cap = error_with_body_len(proto.MAX_FRAME)
    frame = encode_frame(at_cap)
    assert len(frame) == proto.MAX_FRAME + 4
    assert decode_frame(frame) == at_cap
    with pytest.raises(FrameTooLarge):
        encode_frame(error_with_body_len(proto.MAX_FRAME + 1))
    with pytest.raises(FrameTooLarge):
        decode_frame(struct.pack(">I", proto.MAX_FRAME + 1) + b"{}")


@pytest.mark.parametrize("blob, exc", [
    (b"", NeedMoreData),
    (b"\x00\x00", NeedMoreData),
    (b"\x00\x00\x00\x10{}", NeedMoreData),
    (b"\x00\x00\x00\x02{}", ParseError),
    (b"\x00\x00\x00\x03\xff\xfe\xfd", ParseError),
    (b"\x00\x00\x00\x02[]", ParseError),
])
def test_decode_errors(blob, exc):
    with pytest.raises(exc):
        decode_frame(blob)


def _raw(obj):
    body = json.dumps(obj).encode()
    return struct.pack(">I", len(body)) + body


def test_decode_semantic_errors():
    with pytest.raises(ProtocolError):
        decode_frame(_raw({"type": "NOPE", "session_id": "s", "seq": 1, "payload": {}}))
    with pytest.raises(ParseError):  # missing payload field
        decode_frame(_raw({"type": "AUTH_REQ", "session_id": "s", "seq": 1, "payload": {"username": "a"}}))
    with pytest.raises(ParseError):  # bool is not an integer
        decode_frame(_raw({"type": "MA2_GET", "session_id": "s", "seq": True, "payload": {"file_id": "f"}}))
    with pytest.raises(ParseError):
        decode_frame(_raw({"type": "MA2_GET", "session_id": "s", "seq": 1, "payload": {"file_id": "f"}, "x": 1}))
    with pytest.raises(ParseError):
        decode_frame(encode_frame(Envelope("MA2_GET", "s", 1, {"file_id": "f"})) + b"\x00")
    deep = b"[" * 100_000
    with pytest.raises(ParseError):
        decode_frame(struct.pack(">I", len(deep)) + deep)


@given(st.binary(max_size=64))
def test_decoder_is_total(blob):
    try:
        decode_frame(blob)
    except (NeedMoreData, ParseError, ProtocolError, FrameTooLarge):
        pass


def test_frame_reader_reassembles_stream():
    frames = [encode_frame(Envelope("MA2_GET", "s", i, {"file_id": "f"})) for i in range(1, 4)]
    stream = b"".join(frames)
    reader = proto.FrameReader()
    got = []
    for i in range(0, len(stream), 7):
        got += reader.feed(stream[i:i + 7])
    assert [e.seq for e in got] == [1, 2, 3]


def test_frame_reader_skips_bad_frame():
    reader = proto.FrameReader()
    bad = struct.pack(">I", 3) + b"xyz"
    good = encode_frame(Envelope("MA2_GET", "s", 1, {"file_id": "f"}))
    with pytest.raises(ParseError):
        reader.feed(bad + good)
    assert [e.seq for e in reader.feed(b"")] == [1]


def test_b64_helpers():
    assert proto.b64d(proto.b64e(b"\x00\xff")) == b"\x00\xff"
    with pytest.raises(ParseError):
        proto.b64d("not base64!")


# -- session machines -----------------------------------------------------------

def auth_ok(payload):
    return "cid-1" if payload == GOOD else None


def gateway(phase=proto.UNAUTHENTICATED):
    st_ = SessionState.initial("gateway", "sess")
    if phase != proto.UNAUTHENTICATED:
        st_ = SessionState("gateway", phase, "sess", customer_id="cid-1", last_seq_in=1, next_seq_out=2)
    return st_


def test_unauthenticated_store_is_protocol_error():
    st0 = gateway()
    st1, out = step_session(st0, Envelope("STORE_REQ", "sess", 1, {"file_name": "a", "data": ""}))
    assert [e.type for e in out] == ["ERROR"] and out[0].payload["code"] == "PROTOCOL"
    assert st1.phase == proto.UNAUTHENTICATED


def test_auth_success_and_failure():
    st1, out = step_session(gateway(), Envelope("AUTH_REQ", "sess", 1, GOOD), authenticate=auth_ok)
    assert st1.phase == proto.AUTHENTICATED and out[0].type == "AUTH_RESP" and out[0].payload["ok"]
    st2, out = step_session(gateway(), Envelope("AUTH_REQ", "sess", 1, {"username": "a", "password": "b"}),
                            authenticate=auth_ok)
    assert st2.phase == proto.UNAUTHENTICATED
    assert out[0].payload == {"ok": False, "reason": "rejected"}


def test_check_request_is_forwarded_as_ma1():
    st1, out = step_session(gateway(proto.AUTHENTICATED), Envelope("CHECK_REQ", "sess", 2, {"file_id": "f"}))
    assert st1.phase == proto.IN_REQUEST
    assert out[0].type == "MA1_CHECK" and out[0].payload == {"file_id": "f", "customer_id": "cid-1"}
    resp = Envelope("MA1_CHECK_RESP", out[0].session_id, 1, {"customer_id": "cid-1", "ok": True, "corrupted_indices": []})
    st2, out2 = step_session(st1, resp)
    assert st2.phase == proto.AUTHENTICATED
    assert out2[0].type == "CHECK_RESP" and out2[0].payload == {"ok": True, "corrupted_indices": []}


def test_denied_request_emits_no_ma1():
    st1, out = step_session(gateway(proto.AUTHENTICATED), Envelope("STORE_REQ", "sess", 2, {"file_name": "a", "data": ""}),
                            authorize=lambda cid, env: False)
    assert st1.phase == proto.AUTHENTICATED
    assert [e.type for e in out] == ["ERROR"] and out[0].payload["code"] == "TRUST_DENIED"


def test_in_request_rejects_customer_traffic():
    st1, out = step_session(gateway(proto.AUTHENTICATED), Envelope("CHECK_REQ", "sess", 2, {"file_id": "f"}))
    st2, out2 = step_session(st1, Envelope("CHECK_REQ", "sess", 3, {"file_id": "f"}))
    assert out2[0].payload["code"] == "PROTOCOL" and st2.phase == proto.IN_REQUEST


@pytest.mark.parametrize("seq", [1, 0])
def test_replayed_seq_rejected(seq):
    st1, out = step_session(gateway(proto.AUTHENTICATED), Envelope("CHECK_REQ", "sess", seq, {"file_id": "f"}))
    assert out[0].payload["code"] == "PROTOCOL"
    assert st1.phase == proto.AUTHENTICATED


def test_foreign_session_id_rejected():
    _, out = step_session(gateway(proto.AUTHENTICATED), Envelope("CHECK_REQ", "other", 5, {"file_id": "f"}))
    assert out[0].payload["code"] == "PROTOCOL"


@pytest.mark.parametrize("mtype", sorted(proto.MESSAGE_TYPES))
def test_unauthenticated_guard_is_exhaustive(mtype):
    env = Envelope(mtype, "sess", 1, sample_payload(mtype) if mtype != "AUTH_REQ" else GOOD)
    st1, out = step_session(gateway(), env, authenticate=auth_ok)
    if mtype == "AUTH_REQ":
        assert out[0].type == "AUTH_RESP"
    else:
        assert out[0].type == "ERROR" and out[0].payload["code"] == "PROTOCOL"
        assert st1.phase == proto.UNAUTHENTICATED


def test_provider_role_lifecycle():
    st0 = SessionState.initial("provider")
    st1, out = step_session(st0, Envelope("MA2_GET", "m", 1, {"file_id": "f"}))
    assert out == [] and st1.phase == proto.SERVING
    with pytest.raises(ProtocolError):
        proto.respond(st1, "MA2_MAC_RESP", {"tags": []})
    st2, resp = proto.respond(st1, "MA2_GET_RESP", {"fragments": []})
    assert st2.phase == proto.READY and resp.seq == 1 and resp.session_id == "m"
    _, out = step_session(st2, Envelope("MA1_STORE", "m", 2, sample_payload("MA1_STORE")))
    assert out[0].payload["code"] == "PROTOCOL"


def test_customer_role_tracks_phase():
    st0 = SessionState.initial("customer", "c")
    with pytest.raises(ProtocolError):
        proto.send_request(st0, "STORE_REQ", {})
    st1, env = proto.send_request(st0, "AUTH_REQ", GOOD)
    st2, _ = step_session(st1, Envelope("AUTH_RESP", "c", 1, {"ok": True, "reason": "", "customer_id": "x"}))
    assert st2.phase == proto.AUTHENTICATED and st2.customer_id == "x"
    st3, _ = proto.send_request(st2, "CHECK_REQ", {"file_id": "f"})
    assert st3.phase == proto.IN_REQUEST
    with pytest.raises(ProtocolError):
        step_session(st3, Envelope("CHECK_RESP", "c", 1, {"ok": True, "corrupted_indices": []}))
    st4, _ = step_session(st3, Envelope("CHECK_RESP", "c", 2, {"ok": True, "corrupted_indices": []}))
    assert st4.phase == proto.AUTHENTICATED


def test_every_request_has_one_response_type():
    assert set(proto.RESPONSE_OF.values()) <= set(proto.MESSAGE_TYPES)
    assert len(set(proto.RESPONSE_OF.values())) == len(proto.RESPONSE_OF)
