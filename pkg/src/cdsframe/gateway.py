"""Customer gateway: credential checks, trust gating and MA1 forwarding.

The gateway authenticates customers against a salted PBKDF2 credential
store, asks the trust book whether the customer may still talk to the TTP,
forwards admitted requests as MA1 sessions and scores the outcome of every
request that reached evaluation.
"""
from __future__ import annotations

import dataclasses
import hashlib
import hmac
import itertools
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

from . import crypto
from .config import Address, load_kv, parse_address
from .errors import CDSError, Conflict, FrameTooLarge, InvalidArgument, TransportError
from .protocol import (
    AUTHENTICATED,
    UNAUTHENTICATED,
    Envelope,
    SessionState,
    b64d,
    b64e,
    decode_frame,
    emit,
    encode_frame,
    error_payload,
    step_session,
)
from .storage import KeyedLocks, atomic_write
from .transport import ClientConnection
from .trust import ActionClass, ActionRecord, Category, TrustConfig, TrustState, authorize_connection, record_action

log = logging.getLogger(__name__)

MIN_HASH_ITERATIONS = 10_000

# outcome code -> action class; codes absent here are system faults and not scored
DEFAULT_ACTION_TABLE: Dict[str, ActionClass] = {
    "OK": ActionClass.POSITIVE,
    "NOT_FOUND": ActionClass.WRONG,
    "FORBIDDEN": ActionClass.WRONG,
    "BAD_REQUEST": ActionClass.WRONG,
    "TOO_LARGE": ActionClass.WRONG,
    "KEY_EXHAUSTED": ActionClass.WRONG,
    "PROTOCOL": ActionClass.MALICIOUS,
    "MALFORMED": ActionClass.MALICIOUS,
    "TAMPER": ActionClass.MALICIOUS,
}


@dataclass
class GatewayConfig:
    state_dir: Path
    listen: Address = ("127.0.0.1", 7101)
    ttp: Address = ("127.0.0.1", 7102)
    trust: TrustConfig = field(default_factory=TrustConfig)
    hash_iterations: int = 100_000
    action_table: Dict[str, ActionClass] = field(default_factory=lambda: dict(DEFAULT_ACTION_TABLE))
    tls_cert: Optional[str] = None
    tls_key: Optional[str] = None
    ttp_ca: Optional[str] = None

    def __post_init__(self):
        if self.hash_iterations < MIN_HASH_ITERATIONS:
            raise InvalidArgument(f"hash_iterations must be >= {MIN_HASH_ITERATIONS}")

    @classmethod
    def from_file(cls, path) -> "GatewayConfig":
        kv = load_kv(path)
        table = dict(DEFAULT_ACTION_TABLE)
        for key, value in kv.items():
            if key.startswith("action."):
                code = key[len("action."):]
                if value.lower() == "none":
                    table.pop(code, None)
                else:
                    table[code] = ActionClass(value.capitalize())
        return cls(
            state_dir=Path(kv.get("state_dir", "gateway-state")),
            listen=parse_address(kv.get("listen", "127.0.0.1:7101")),
            ttp=parse_address(kv.get("ttp", "127.0.0.1:7102")),
            trust=TrustConfig.from_mapping(kv),
            hash_iterations=int(kv.get("hash_iterations", 100_000)),
            action_table=table,
            tls_cert=kv.get("tls_cert"),
            tls_key=kv.get("tls_key"),
            ttp_ca=kv.get("ttp_ca"),
        )


def _line(*fields) -> str:
    return "\t".join(b64e(f if isinstance(f, bytes) else f.encode("utf-8")) for f in fields) + "\n"


def _fields(line: str):
    return [b64d(part) for part in line.rstrip("\n").split("\t")]


@dataclass(frozen=True)
class CredentialRecord:
    username: str
    salt: bytes
    iterated_hash: bytes
    customer_id: str
    iterations: int


class CredentialStore:
    """``credentials`` file: one tab-separated base64 record per customer."""

    def __init__(self, path: Path, iterations: int, rng: crypto.RandomSource):
        self.path = Path(path)
        self.iterations = iterations
        self.rng = rng
        self._lock = threading.Lock()
        self._records: Dict[str, CredentialRecord] = {}
        self._dummy_salt = hashlib.sha256(b"cds-dummy-salt").digest()[:16]
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                user, salt, digest, cid, iters = _fields(line)
                user, cid = user.decode(), cid.decode()
                self._records[user] = CredentialRecord(user, salt, digest, cid, int(iters))

    def _hash(self, password: str, salt: bytes, iterations: int) -> bytes:
        return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)

    def _persist(self) -> None:
        text = "".join(
            _line(r.username, r.salt, r.iterated_hash, r.customer_id, str(r.iterations))
            for r in self._records.values()
        )
        atomic_write(self.path, text.encode())

    def register(self, username: str, password: str) -> str:
        if not username or not password:
            raise InvalidArgument("username and password must be non-empty")
        with self._lock:
            if username in self._records:
                raise Conflict("username already registered")
            used_salts = {r.salt for r in self._records.values()}
            salt = self.rng.randbytes(16)
            while salt in used_salts:
                salt = self.rng.randbytes(16)
            cid = self.rng.randbytes(8).hex()
            rec = CredentialRecord(username, salt, self._hash(password, salt, self.iterations), cid, self.iterations)
            self._records[username] = rec
            self._persist()
            return cid

    def authenticate(self, username: str, password: str) -> Optional[str]:
        rec = self._records.get(username)
        if rec is None:
            # same work as a real check so timing does not reveal unknown users
            self._hash(password, self._dummy_salt, self.iterations)
            return None
        candidate = self._hash(password, rec.salt, rec.iterations)
        return rec.customer_id if hmac.compare_digest(candidate, rec.iterated_hash) else None


class TrustBook:
    """Persisted trust states plus an append-only action log."""

    def __init__(self, state_dir: Path, cfg: TrustConfig):
        self.cfg = cfg
        self.path = Path(state_dir) / "trust"
        self.log_path = Path(state_dir) / "actions"
        self._states: Dict[str, TrustState] = {}
        self._locks = KeyedLocks()
        self._write_lock = threading.Lock()
        self._tick = itertools.count(1)
        self.history: list = []
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                cid, total, neg, t, pa, cat = (f.decode() for f in _fields(line))
                self._states[cid] = TrustState(cid, int(total), int(neg), float(t), float(pa), Category(cat))

    def _persist(self) -> None:
        text = "".join(
            _line(s.customer_id, str(s.total_actions), str(s.negative_actions),
                  repr(s.trust_degree), repr(s.last_pa), s.category.value)
            for s in self._states.values()
        )
        atomic_write(self.path, text.encode())

    def ensure(self, customer_id: str) -> TrustState:
        with self._locks.hold(customer_id):
            if customer_id not in self._states:
                self._states[customer_id] = TrustState.fresh(customer_id, self.cfg)
                with self._write_lock:
                    self._persist()
            return self._states[customer_id]

    def get(self, customer_id: str) -> TrustState:
        return self._states.get(customer_id) or TrustState.fresh(customer_id, self.cfg)

    def authorize(self, customer_id: str) -> bool:
        return authorize_connection(self.get(customer_id), self.cfg)

    def record(self, customer_id: str, action: ActionClass, note: str = "") -> TrustState:
        with self._locks.hold(customer_id):
            new = record_action(self.get(customer_id), action, self.cfg)
            self._states[customer_id] = new
            rec = ActionRecord(customer_id, action, next(self._tick), note)
            self.history.append(rec)
            with self._write_lock:
                self._persist()
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(_line(customer_id, action.value, str(rec.timestamp), note, repr(new.trust_degree)))
            return new


class GatewayService:
    def __init__(self, config: GatewayConfig, ttp: Callable[[], ClientConnection],
                 rng: Optional[crypto.RandomSource] = None):
        self.config = config
        self.ttp = ttp
        self.rng = rng or crypto.system_random()
        state_dir = Path(config.state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        self.credentials = CredentialStore(state_dir / "credentials", config.hash_iterations, self.rng)
        self.trust = TrustBook(state_dir, config.trust)

    def connect(self) -> "GatewayConnection":
        return GatewayConnection(self)

    # -- identity --------------------------------------------------------------

    def register(self, username: str, password: str) -> str:
        cid = self.credentials.register(username, password)
        self.trust.ensure(cid)
        return cid

    def authenticate(self, username: str, password: str) -> Optional[str]:
        return self.credentials.authenticate(username, password)

    def _auth_payload(self, payload: dict) -> Optional[str]:
        username, password = payload["username"], payload["password"]
        if payload.get("register") is True:
            try:
                self.register(username, password)
            except (Conflict, InvalidArgument):
                return None
        return self.authenticate(username, password)

    def _authorize(self, customer_id: str, request: Envelope) -> bool:
        return self.trust.authorize(customer_id)

    # -- request path ----------------------------------------------------------

    def score(self, customer_id: Optional[str], outcome: str, note: str = "") -> None:
        action = self.config.action_table.get(outcome)
        if customer_id is not None and action is not None:
            self.trust.record(customer_id, action, note or outcome)

    def _forward(self, ma1: Envelope) -> Envelope:
        try:
            with self.ttp() as conn:
                return conn.request(ma1)
        except FrameTooLarge as exc:
            return Envelope("ERROR", ma1.session_id, 1, error_payload("TOO_LARGE", str(exc)))
        except (TransportError, OSError) as exc:
            log.warning("TTP unreachable: %s", exc)
            return Envelope("ERROR", ma1.session_id, 1, error_payload("UPSTREAM", "trusted third party unreachable"))
        except CDSError as exc:
            return Envelope("ERROR", ma1.session_id, 1, error_payload(exc.code, str(exc)))

    def process(self, state: SessionState, incoming: Envelope) -> Tuple[SessionState, Envelope]:
        """Run one customer envelope through the FSM, the trust gate and the TTP."""
        authed = state.phase != UNAUTHENTICATED
        new, out = step_session(state, incoming, authenticate=self._auth_payload, authorize=self._authorize)
        reply = out[0]
        if reply.is_error:
            if authed and reply.payload["code"] == "PROTOCOL":
                self.score(state.customer_id, "PROTOCOL", f"{incoming.type} rejected by session FSM")
            return new, reply
        if reply.type.startswith("MA1_"):
            upstream = self._forward(reply)
            if upstream.session_id != reply.session_id:
                upstream = Envelope("ERROR", reply.session_id, 1, error_payload("UPSTREAM", "mismatched MA1 session"))
            new, out = step_session(new, upstream)
            reply = out[0]
            outcome = reply.payload["code"] if reply.is_error else "OK"
            self.score(new.customer_id, outcome, incoming.type)
        return new, reply

    def gate_and_forward(self, customer_id: str, request: Envelope) -> Envelope:
        """Serve one request for an already authenticated customer."""
        state = SessionState.initial("gateway", request.session_id)
        state = dataclasses.replace(state, phase=AUTHENTICATED, customer_id=customer_id,
                                    last_seq_in=request.seq - 1)
        return self.process(state, request)[1]


class GatewayConnection:
    def __init__(self, service: GatewayService):
        self.service = service
        self.state = SessionState.initial("gateway")

    def handle_frame(self, frame: bytes) -> bytes:
        try:
            env = decode_frame(frame)
        except CDSError as exc:
            if self.state.phase != UNAUTHENTICATED:
                self.service.score(self.state.customer_id, "MALFORMED", f"undecodable frame: {exc.code}")
            self.state, reply = _error(self.state, exc.code, str(exc))
            return encode_frame(reply)
        self.state, reply = self.service.process(self.state, env)
        try:
            return encode_frame(reply)
        except FrameTooLarge as exc:
            self.state, reply = _error(self.state, exc.code, str(exc))
            return encode_frame(reply)


def _error(state: SessionState, code: str, message: str):
    return emit(state, "ERROR", error_payload(code, message))
