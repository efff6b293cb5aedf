"""Framed envelopes and per-role session state machines.

A frame is a 4-byte big-endian length followed by a UTF-8 JSON object with
exactly the keys ``type``, ``session_id``, ``seq`` and ``payload``.  Binary
fields travel as base64 strings.

The MA1 family carries customer requests from the gateway to the TTP and the
MA2 family carries TTP requests to the provider; each forwarded request gets
its own short-lived session.
"""
from __future__ import annotations

import base64
import binascii
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

from .errors import FrameTooLarge, NeedMoreData, ParseError, ProtocolError

MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct(">I")

_str, _int, _bool, _list = str, int, bool, list

# required payload fields per message type; extra fields are tolerated
MESSAGE_TYPES: Dict[str, Dict[str, type]] = {
    # customer <-> gateway
    "AUTH_REQ": {"username": _str, "password": _str},
    "AUTH_RESP": {"ok": _bool, "reason": _str},
    "STORE_REQ": {"file_name": _str, "data": _str},
    "STORE_RESP": {"file_id": _str},
    "RETRIEVE_REQ": {"file_id": _str},
    "RETRIEVE_RESP": {"file_name": _str, "data": _str},
    "CHECK_REQ": {"file_id": _str},
    "CHECK_RESP": {"ok": _bool, "corrupted_indices": _list},
    # gateway <-> ttp
    "MA1_STORE": {"customer_id": _str, "file_name": _str, "data": _str},
    "MA1_STORE_RESP": {"customer_id": _str, "file_id": _str},
    "MA1_RETRIEVE": {"customer_id": _str, "file_id": _str},
    "MA1_RETRIEVE_RESP": {"customer_id": _str, "file_name": _str, "data": _str},
    "MA1_CHECK": {"customer_id": _str, "file_id": _str},
    "MA1_CHECK_RESP": {"customer_id": _str, "ok": _bool, "corrupted_indices": _list},
    # ttp <-> provider
    "MA2_PUT": {"file_id": _str, "fragments": _list},
    "MA2_PUT_RESP": {"file_id": _str, "stored": _int},
    "MA2_GET": {"file_id": _str},
    "MA2_GET_RESP": {"fragments": _list},
    "MA2_MAC_CHALLENGE": {"file_id": _str, "key": _str, "key_index": _int},
    "MA2_MAC_RESP": {"tags": _list},
    # test-mode adversary hook
    "MA2_TAMPER": {"file_id": _str, "index": _int, "byte_offset": _int, "xor_value": _int},
    "MA2_TAMPER_RESP": {"ok": _bool},
    "ERROR": {"code": _str, "message": _str},
}

RESPONSE_OF = {
    "AUTH_REQ": "AUTH_RESP",
    "STORE_REQ": "STORE_RESP",
    "RETRIEVE_REQ": "RETRIEVE_RESP",
    "CHECK_REQ": "CHECK_RESP",
    "MA1_STORE": "MA1_STORE_RESP",
    "MA1_RETRIEVE": "MA1_RETRIEVE_RESP",
    "MA1_CHECK": "MA1_CHECK_RESP",
    "MA2_PUT": "MA2_PUT_RESP",
    "MA2_GET": "MA2_GET_RESP",
    "MA2_MAC_CHALLENGE": "MA2_MAC_RESP",
    "MA2_TAMPER": "MA2_TAMPER_RESP",
}

CUSTOMER_TO_MA1 = {"STORE_REQ": "MA1_STORE", "RETRIEVE_REQ": "MA1_RETRIEVE", "CHECK_REQ": "MA1_CHECK"}
MA1_TO_CUSTOMER = {RESPONSE_OF[v]: RESPONSE_OF[k] for k, v in CUSTOMER_TO_MA1.items()}

TTP_REQUESTS = frozenset(CUSTOMER_TO_MA1.values())
PROVIDER_REQUESTS = frozenset({"MA2_PUT", "MA2_GET", "MA2_MAC_CHALLENGE", "MA2_TAMPER"})


@dataclass(frozen=True)
class Envelope:
    type: str
    session_id: str
    seq: int
    payload: Dict[str, Any] = field(default_factory=dict)

    def to_obj(self) -> Dict[str, Any]:
        return {"type": self.type, "session_id": self.session_id, "seq": self.seq, "payload": self.payload}

    @property
    def is_error(self) -> bool:
        return self.type == "ERROR"


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, ValueError, UnicodeEncodeError, AttributeError) as exc:
        raise ParseError(f"invalid base64: {exc}") from exc


def encode_body(env: Envelope) -> bytes:
    return json.dumps(env.to_obj(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_frame(env: Envelope) -> bytes:
    if env.type not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {env.type!r}")
    body = encode_body(env)
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def _check_payload(mtype: str, payload: Dict[str, Any]) -> None:
    for name, kind in MESSAGE_TYPES[mtype].items():
        if name not in payload:
            raise ParseError(f"{mtype} payload is missing {name!r}")
        value = payload[name]
        # bool is an int subclass; keep the two apart
        if kind is _int and (isinstance(value, bool) or not isinstance(value, int)):
            raise ParseError(f"{mtype}.{name} must be an integer")
        if kind is not _int and not isinstance(value, kind):
            raise ParseError(f"{mtype}.{name} must be {kind.__name__}")


def decode_body(body: bytes) -> Envelope:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise ParseError(f"malformed frame body: {type(exc).__name__}") from None
    if not isinstance(obj, dict) or set(obj) != {"type", "session_id", "seq", "payload"}:
        raise ParseError("frame body must be an object with exactly type, session_id, seq, payload")
    mtype, sid, seq, payload = obj["type"], obj["session_id"], obj["seq"], obj["payload"]
    if not isinstance(mtype, str) or not isinstance(sid, str) or not isinstance(payload, dict):
        raise ParseError("type and session_id must be strings and payload an object")
    if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
        raise ParseError("seq must be a non-negative integer")
    if mtype not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {mtype!r}")
    _check_payload(mtype, payload)
    return Envelope(mtype, sid, seq, payload)


def split_frame(buf: bytes) -> Tuple[Envelope, int]:
    """Decode the first frame in ``buf``; return it with the bytes consumed."""
    if len(buf) < HEADER.size:
        raise NeedMoreData("incomplete length prefix")
    (length,) = HEADER.unpack_from(buf)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared frame length {length} exceeds {MAX_FRAME}")
    end = HEADER.size + length
    if len(buf) < end:
        raise NeedMoreData(f"frame needs {end} bytes, have {len(buf)}")
    return decode_body(bytes(buf[HEADER.size:end])), end


def decode_frame(data: bytes) -> Envelope:
    env, used = split_frame(data)
    if used != len(data):
        raise ParseError(f"{len(data) - used} trailing bytes after frame")
    return env


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Envelope]:
        self._buf += data
        out = []
        while True:
            try:
                env, used = split_frame(self._buf)
            except NeedMoreData:
                return out
            except ParseError:
                # drop the bad frame so the stream stays aligned
                (length,) = HEADER.unpack_from(self._buf)
                del self._buf[:HEADER.size + length]
                raise
            del self._buf[:used]
            out.append(env)


def error_payload(code: str, message: str = "") -> Dict[str, str]:
    return {"code": code, "message": message}


# ---------------------------------------------------------------------------
# session state machines
# ---------------------------------------------------------------------------

UNAUTHENTICATED = "UNAUTHENTICATED"
AUTHENTICATED = "AUTHENTICATED"
IN_REQUEST = "IN_REQUEST"
READY = "READY"
SERVING = "SERVING"

ROLES = ("customer", "gateway", "ttp", "provider")

Authenticator = Callable[[Dict[str, Any]], Optional[str]]
Gate = Callable[[str, Envelope], bool]


@dataclass(frozen=True)
class SessionState:
    role: str
    phase: str
    session_id: str = ""
    customer_id: Optional[str] = None
    last_seq_in: int = 0
    next_seq_out: int = 1
    pending: Optional[str] = None
    upstream_session: Optional[str] = None
    upstream_count: int = 0

    @classmethod
    def initial(cls, role: str, session_id: str = "") -> "SessionState":
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        phase = UNAUTHENTICATED if role in ("customer", "gateway") else READY
        return cls(role=role, phase=phase, session_id=session_id)


def emit(state: SessionState, mtype: str, payload: Dict[str, Any]) -> Tuple[SessionState, Envelope]:
    """Stamp an outgoing envelope with this session's id and next seq."""
    env = Envelope(mtype, state.session_id, state.next_seq_out, payload)
    return dataclasses.replace(state, next_seq_out=state.next_seq_out + 1), env


def _reject(state: SessionState, code: str, message: str) -> Tuple[SessionState, List[Envelope]]:
    state, env = emit(state, "ERROR", error_payload(code, message))
    return state, [env]


def _accept_seq(state: SessionState, incoming: Envelope) -> Optional[SessionState]:
    if not state.session_id:
        state = dataclasses.replace(state, session_id=incoming.session_id)
    elif incoming.session_id != state.session_id:
        return None
    if incoming.seq <= state.last_seq_in:
        return None
    return dataclasses.replace(state, last_seq_in=incoming.seq)


def step_session(
    state: SessionState,
    incoming: Envelope,
    *,
    authenticate: Optional[Authenticator] = None,
    authorize: Optional[Gate] = None,
) -> Tuple[SessionState, List[Envelope]]:
    """Advance ``state`` by one incoming envelope.

    Illegal input yields a single ``ERROR{PROTOCOL}`` and leaves the phase
    untouched.  For the gateway role, ``authenticate`` maps an AUTH_REQ
    payload to a customer id (or None) and ``authorize`` decides whether a
    request may be forwarded; a denied request produces
    ``ERROR{TRUST_DENIED}`` and no MA1 envelope.
    """
    if state.role == "gateway":
        return _step_gateway(state, incoming, authenticate, authorize)
    if state.role == "customer":
        return _step_customer(state, incoming)
    legal = TTP_REQUESTS if state.role == "ttp" else PROVIDER_REQUESTS
    if state.phase != READY or incoming.type not in legal:
        return _reject(state, "PROTOCOL", f"{incoming.type} not accepted by {state.role} in {state.phase}")
    accepted = _accept_seq(state, incoming)
    if accepted is None:
        return _reject(state, "PROTOCOL", "bad session id or sequence number")
    return dataclasses.replace(accepted, phase=SERVING, pending=incoming.type), []


def respond(state: SessionState, mtype: str, payload: Dict[str, Any]) -> Tuple[SessionState, Envelope]:
    """Answer the pending request of a ttp/provider session."""
    if state.phase != SERVING:
        raise ProtocolError(f"{state.role} session has no pending request")
    if mtype != "ERROR" and mtype != RESPONSE_OF[state.pending]:
        raise ProtocolError(f"{mtype} does not answer {state.pending}")
    state, env = emit(state, mtype, payload)
    return dataclasses.replace(state, phase=READY, pending=None), env


def _step_gateway(state, incoming, authenticate, authorize):
    mtype = incoming.type
    if state.phase == IN_REQUEST:
        # only the upstream answer to the forwarded request is legal here
        expected = RESPONSE_OF[CUSTOMER_TO_MA1[state.pending]]
        if incoming.session_id != state.upstream_session or mtype not in (expected, "ERROR"):
            return _reject(state, "PROTOCOL", f"{mtype} not accepted while a request is in flight")
        payload = dict(incoming.payload)
        if mtype == "ERROR":
            out_type = "ERROR"
        else:
            out_type = MA1_TO_CUSTOMER[mtype]
            payload.pop("customer_id", None)
        state = dataclasses.replace(state, phase=AUTHENTICATED, pending=None, upstream_session=None)
        state, env = emit(state, out_type, payload)
        return state, [env]

    accepted = _accept_seq(state, incoming)
    if accepted is None:
        return _reject(state, "PROTOCOL", "bad session id or sequence number")

    if state.phase == UNAUTHENTICATED:
        if mtype != "AUTH_REQ":
            return _reject(state, "PROTOCOL", f"{mtype} not allowed before authentication")
        customer_id = authenticate(incoming.payload) if authenticate else None
        if customer_id is None:
            accepted, env = emit(accepted, "AUTH_RESP", {"ok": False, "reason": "rejected"})
            return accepted, [env]
        accepted = dataclasses.replace(accepted, phase=AUTHENTICATED, customer_id=customer_id)
        accepted, env = emit(accepted, "AUTH_RESP", {"ok": True, "reason": "", "customer_id": customer_id})
        return accepted, [env]

    # AUTHENTICATED
    if mtype not in CUSTOMER_TO_MA1:
        return _reject(state, "PROTOCOL", f"{mtype} not allowed in {state.phase}")
    if authorize is not None and not authorize(state.customer_id, incoming):
        accepted, env = emit(accepted, "ERROR", error_payload("TRUST_DENIED", "request removed: trust below threshold"))
        return accepted, [env]
    count = accepted.upstream_count + 1
    upstream = f"{accepted.session_id}/ma1-{count}"
    payload = dict(incoming.payload, customer_id=state.customer_id)
    forward = Envelope(CUSTOMER_TO_MA1[mtype], upstream, 1, payload)
    accepted = dataclasses.replace(
        accepted, phase=IN_REQUEST, pending=mtype, upstream_session=upstream, upstream_count=count
    )
    return accepted, [forward]


def send_request(state: SessionState, mtype: str, payload: Dict[str, Any]) -> Tuple[SessionState, Envelope]:
    """Client side: stamp a request and move to the waiting phase."""
    if state.role != "customer":
        raise ProtocolError("send_request is for customer sessions")
    if state.pending is not None:
        raise ProtocolError("a request is already in flight")
    if state.phase == UNAUTHENTICATED and mtype != "AUTH_REQ":
        raise ProtocolError(f"{mtype} requires authentication")
    state, env = emit(state, mtype, payload)
    phase = IN_REQUEST if mtype in CUSTOMER_TO_MA1 else state.phase
    return dataclasses.replace(state, phase=phase, pending=mtype), env


def _step_customer(state, incoming):
    if state.pending is None:
        return state, []
    expected = RESPONSE_OF.get(state.pending)
    if incoming.type not in (expected, "ERROR"):
        raise ProtocolError(f"expected {expected}, got {incoming.type}")
    if incoming.seq <= state.last_seq_in:
        raise ProtocolError("replayed or reordered response")
    phase = state.phase
    if state.pending == "AUTH_REQ":
        phase = AUTHENTICATED if incoming.type == "AUTH_RESP" and incoming.payload["ok"] else UNAUTHENTICATED
    elif phase == IN_REQUEST:
        phase = AUTHENTICATED
    customer_id = incoming.payload.get("customer_id", state.customer_id) if incoming.type == "AUTH_RESP" else state.customer_id
    return dataclasses.replace(
        state, phase=phase, pending=None, last_seq_in=incoming.seq, customer_id=customer_id
    ), []
