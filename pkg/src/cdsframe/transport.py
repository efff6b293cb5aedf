"""Byte channels carrying framed envelopes: in-memory for the simulator,
TCP (optionally TLS) for service mode.

Services expose ``connect()`` returning a per-connection object with
``handle_frame(frame: bytes) -> bytes``; both transports drive that same
method, so protocol code does not know which one it runs over.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import ssl
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol, Tuple

from .errors import FrameTooLarge, RemoteError, TransportError
from .protocol import HEADER, MAX_FRAME, Envelope, decode_frame, encode_frame, error_payload

log = logging.getLogger(__name__)


class ServerConnection(Protocol):
    def handle_frame(self, frame: bytes) -> bytes: ...


class Service(Protocol):
    def connect(self) -> ServerConnection: ...


@dataclass
class Transcript:
    """Every frame crossing every in-memory link, in delivery order."""

    records: List[Tuple[str, str, bytes]] = field(default_factory=list)

    def add(self, link: str, direction: str, frame: bytes) -> None:
        self.records.append((link, direction, frame))

    def envelopes(self, link: Optional[str] = None):
        for name, direction, frame in self.records:
            if link is None or name == link:
                try:
                    yield name, direction, decode_frame(frame)
                except Exception:  # noqa: BLE001 - injected garbage stays in the log
                    continue

    def dump(self) -> bytes:
        out = bytearray()
        for link, direction, frame in self.records:
            out += f"{link} {direction} {len(frame)}\n".encode()
            out += frame + b"\n"
        return bytes(out)


class ClientConnection:
    """Common request helpers on top of ``send_frame``."""

    def send_frame(self, frame: bytes) -> bytes:
        raise NotImplementedError

    def request(self, env: Envelope) -> Envelope:
        return decode_frame(self.send_frame(encode_frame(env)))

    def call(self, env: Envelope) -> Envelope:
        """Like ``request`` but raises ``RemoteError`` on an ERROR reply."""
        resp = self.request(env)
        if resp.is_error:
            raise RemoteError(resp.payload["message"], code=resp.payload["code"])
        return resp

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# in-memory
# ---------------------------------------------------------------------------

class MemoryConnection(ClientConnection):
    def __init__(self, link: "MemoryLink"):
        self._link = link
        self._server = link.service.connect()

    def send_frame(self, frame: bytes) -> bytes:
        link = self._link
        if link.down:
            raise TransportError(f"{link.name}: peer unreachable")
        link.transcript.add(link.name, "->", frame)
        reply = self._server.handle_frame(frame)
        if link.drop_replies:
            raise TransportError(f"{link.name}: timed out waiting for reply")
        link.transcript.add(link.name, "<-", reply)
        return reply


@dataclass
class MemoryLink:
    """A named, synchronous, FIFO link to a service with fault switches."""

    name: str
    service: Service
    transcript: Transcript
    down: bool = False
    drop_replies: bool = False

    def __call__(self) -> MemoryConnection:
        if self.down:
            raise TransportError(f"{self.name}: peer unreachable")
        return MemoryConnection(self)


# ---------------------------------------------------------------------------
# TCP / TLS
# ---------------------------------------------------------------------------

def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> bytes:
    header = _recv_exact(sock, HEADER.size)
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared frame length {length} exceeds {MAX_FRAME}")
    return header + _recv_exact(sock, length)


def server_ssl_context(certfile: str, keyfile: str) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(certfile, keyfile)
    return ctx


def client_ssl_context(cafile: Optional[str]) -> ssl.SSLContext:
    ctx = ssl.create_default_context(cafile=cafile)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    return ctx


class TcpConnection(ClientConnection):
    def __init__(self, address, ssl_context: Optional[ssl.SSLContext] = None,
                 timeout: float = 30.0, server_hostname: Optional[str] = None):
        host, port = address
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            if ssl_context is not None:
                sock = ssl_context.wrap_socket(sock, server_hostname=server_hostname or host)
        except (OSError, ssl.SSLError) as exc:
            raise TransportError(f"cannot reach {host}:{port}: {exc}") from exc
        self._sock = sock
        self._lock = threading.Lock()

    def send_frame(self, frame: bytes) -> bytes:
        with self._lock:
            try:
                self._sock.sendall(frame)
                return read_frame(self._sock)
            except (OSError, EOFError) as exc:
                raise TransportError(f"transport failure: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def tcp_connector(address, ssl_context: Optional[ssl.SSLContext] = None,
                  timeout: float = 30.0) -> Callable[[], TcpConnection]:
    return lambda: TcpConnection(address, ssl_context, timeout)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        if isinstance(self.request, ssl.SSLSocket):
            try:
                self.request.do_handshake()
            except (ssl.SSLError, OSError) as exc:
                log.warning("TLS handshake failed: %s", exc)
                return
        conn = self.server.service.connect()
        while True:
            try:
                frame = read_frame(self.request)
            except EOFError:
                return
            except FrameTooLarge as exc:
                self._reply_error("TOO_LARGE", str(exc))
                return
            except OSError as exc:
                log.debug("connection dropped: %s", exc)
                return
            try:
                self.request.sendall(conn.handle_frame(frame))
            except OSError:
                return

    def _reply_error(self, code, message):
        try:
            self.request.sendall(encode_frame(Envelope("ERROR", "", 1, error_payload(code, message))))
        except OSError:
            pass


class FrameServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server; one handler thread per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, service: Service, ssl_context: Optional[ssl.SSLContext] = None):
        self.service = service
        self.ssl_context = ssl_context
        super().__init__(address, _Handler)

    def get_request(self):
        sock, addr = super().get_request()
        if self.ssl_context is not None:
            # handshake runs on the handler thread, not the accept loop
            sock = self.ssl_context.wrap_socket(sock, server_side=True, do_handshake_on_connect=False)
        return sock, addr

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


class RequestConnection:
    """Server-side connection for request/response roles (ttp, provider).

    Tracks one session state per session id and hands each legal request to
    ``dispatch(env) -> (type, payload)``.
    """

    def __init__(self, role: str, dispatch: Callable[[Envelope], Tuple[str, dict]]):
        self.role = role
        self.dispatch = dispatch
        self.sessions = {}

    def handle_frame(self, frame: bytes) -> bytes:
        from .errors import CDSError
        from .protocol import SessionState, respond, step_session

        try:
            env = decode_frame(frame)
        except CDSError as exc:
            return encode_frame(Envelope("ERROR", "", 1, error_payload(exc.code, str(exc))))
        state = self.sessions.get(env.session_id) or SessionState.initial(self.role, env.session_id)
        state, out = step_session(state, env)
        if out:
            self.sessions[env.session_id] = state
            return encode_frame(out[0])
        try:
            mtype, payload = self.dispatch(env)
        except CDSError as exc:
            mtype, payload = "ERROR", error_payload(exc.code, str(exc))
        except Exception as exc:  # noqa: BLE001 - never let a handler kill the connection
            log.exception("%s: unhandled error serving %s", self.role, env.type)
            mtype, payload = "ERROR", error_payload("INTERNAL", type(exc).__name__)
        state, resp = respond(state, mtype, payload)
        self.sessions[env.session_id] = state
        try:
            return encode_frame(resp)
        except FrameTooLarge as exc:
            return encode_frame(Envelope("ERROR", resp.session_id, resp.seq, error_payload(exc.code, str(exc))))
