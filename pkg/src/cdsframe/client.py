"""Customer-side client: a session object plus the ``cds-client`` command.

Exit codes are a scripting contract: 0 success, 1 authentication or trust
denial, 2 integrity failure, 3 transport error, 4 any other request error.
"""
from __future__ import annotations

import argparse
import getpass
import os
import secrets
import sys
from pathlib import Path
from typing import Callable, List, Optional, Tuple

from .config import parse_address
from .errors import AuthRejected, CDSError, RemoteError, TransportError
from .protocol import Envelope, SessionState, b64d, b64e, send_request, step_session
from .transport import ClientConnection, client_ssl_context, tcp_connector

EXIT_OK, EXIT_DENIED, EXIT_INTEGRITY, EXIT_TRANSPORT, EXIT_REQUEST = 0, 1, 2, 3, 4

_DENIAL_CODES = {"AUTH_REJECTED", "TRUST_DENIED"}
_INTEGRITY_CODES = {"INTEGRITY_ALARM", "CORRUPT_STORE"}
_TRANSPORT_CODES = {"UPSTREAM"}


class ClientSession:
    def __init__(self, connection: ClientConnection, session_id: Optional[str] = None):
        self.connection = connection
        self.state = SessionState.initial("customer", session_id or secrets.token_hex(8))

    @property
    def authenticated(self) -> bool:
        return self.state.phase != "UNAUTHENTICATED"

    def _exchange(self, mtype: str, payload: dict) -> Envelope:
        self.state, env = send_request(self.state, mtype, payload)
        resp = self.connection.request(env)
        self.state, _ = step_session(self.state, resp)
        if resp.is_error:
            raise RemoteError(resp.payload["message"], code=resp.payload["code"])
        return resp

    def _auth(self, username: str, password: str, register: bool) -> str:
        payload = {"username": username, "password": password}
        if register:
            payload["register"] = True
        resp = self._exchange("AUTH_REQ", payload)
        if not resp.payload["ok"]:
            raise AuthRejected(resp.payload["reason"])
        return resp.payload.get("customer_id", "")

    def register(self, username: str, password: str) -> str:
        return self._auth(username, password, register=True)

    def login(self, username: str, password: str) -> str:
        return self._auth(username, password, register=False)

    def put(self, file_name: str, data: bytes) -> str:
        return self._exchange("STORE_REQ", {"file_name": file_name, "data": b64e(data)}).payload["file_id"]

    def get(self, file_id: str) -> Tuple[str, bytes]:
        p = self._exchange("RETRIEVE_REQ", {"file_id": file_id}).payload
        return p["file_name"], b64d(p["data"])

    def check(self, file_id: str) -> Tuple[bool, List[int]]:
        p = self._exchange("CHECK_REQ", {"file_id": file_id}).payload
        return p["ok"], list(p["corrupted_indices"])


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, TransportError):
        return EXIT_TRANSPORT
    code = getattr(exc, "code", "")
    if code in _DENIAL_CODES:
        return EXIT_DENIED
    if code in _INTEGRITY_CODES:
        return EXIT_INTEGRITY
    if code in _TRANSPORT_CODES:
        return EXIT_TRANSPORT
    return EXIT_REQUEST


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cds-client", description="Customer client for the CDS gateway.")
    ap.add_argument("--gateway", default="127.0.0.1:7101", help="gateway host:port")
    ap.add_argument("--user", required=True)
    ap.add_argument("--ca", help="CA bundle to verify the gateway's TLS certificate")
    ap.add_argument("--insecure-plaintext", action="store_true", help="connect without TLS (testing only)")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("register")
    sub.add_parser("login")
    sub.add_parser("status")
    p = sub.add_parser("put")
    p.add_argument("path", type=Path)
    p = sub.add_parser("get")
    p.add_argument("file_id")
    p.add_argument("--out", type=Path, required=True)
    p = sub.add_parser("check")
    p.add_argument("file_id")
    return ap


def _password() -> str:
    pw = os.environ.get("CDS_PASSWORD")
    return pw if pw is not None else getpass.getpass("password: ")


def main(argv=None, connector: Optional[Callable[[], ClientConnection]] = None,
         out=sys.stdout, err=sys.stderr) -> int:
    args = build_parser().parse_args(argv)
    if connector is None:
        ctx = None if args.insecure_plaintext else client_ssl_context(args.ca)
        connector = tcp_connector(parse_address(args.gateway), ctx)
    try:
        with connector() as conn:
            session = ClientSession(conn)
            password = _password()
            if args.command == "register":
                cid = session.register(args.user, password)
                print(f"registered {args.user} as {cid}", file=out)
                return EXIT_OK
            cid = session.login(args.user, password)
            if args.command == "login":
                print(f"login ok: {args.user} ({cid})", file=out)
            elif args.command == "status":
                print(f"gateway {args.gateway}: reachable, authenticated as {args.user} ({cid})", file=out)
            elif args.command == "put":
                print(session.put(args.path.name, args.path.read_bytes()), file=out)
            elif args.command == "get":
                name, data = session.get(args.file_id)
                args.out.write_bytes(data)
                print(f"wrote {len(data)} bytes of {name} to {args.out}", file=out)
            elif args.command == "check":
                ok, bad = session.check(args.file_id)
                if not ok:
                    print(f"CORRUPTED fragments: {bad}", file=out)
                    return EXIT_INTEGRITY
                print("OK", file=out)
            return EXIT_OK
    except CDSError as exc:
        print(f"error [{exc.code}]: {exc}", file=err)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_REQUEST


if __name__ == "__main__":
    sys.exit(main())
