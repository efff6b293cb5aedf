"""Service entry points: ``cds-gateway``, ``cds-ttp`` and ``cds-provider``.

All links run over TLS unless ``--insecure-plaintext`` is given.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from .config import parse_address
from .gateway import GatewayConfig, GatewayService
from .provider import ProviderConfig, ProviderService
from .transport import FrameServer, client_ssl_context, server_ssl_context, tcp_connector
from .ttp import TtpConfig, TtpService

log = logging.getLogger("cdsframe")


def _server_ctx(cert: Optional[str], key: Optional[str], insecure: bool):
    if cert and key:
        return server_ssl_context(cert, key)
    if not insecure:
        sys.exit("no tls_cert/tls_key configured; pass --insecure-plaintext to run without TLS")
    log.warning("serving WITHOUT TLS")
    return None


def _client_ctx(ca: Optional[str], insecure: bool):
    return None if insecure else client_ssl_context(ca)


def _common(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--listen", help="host:port to listen on (overrides config)")
    ap.add_argument("--insecure-plaintext", action="store_true", help="disable TLS on every link")
    ap.add_argument("-v", "--verbose", action="store_true")


def _run(server: FrameServer, name: str) -> int:
    host, port = server.server_address[:2]
    log.info("%s listening on %s:%s", name, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def gateway_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cds-gateway")
    ap.add_argument("--config", type=Path, required=True)
    _common(ap)
    args = ap.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = GatewayConfig.from_file(args.config)
    if args.listen:
        cfg.listen = parse_address(args.listen)
    svc = GatewayService(cfg, tcp_connector(cfg.ttp, _client_ctx(cfg.ttp_ca, args.insecure_plaintext)))
    server = FrameServer(cfg.listen, svc, _server_ctx(cfg.tls_cert, cfg.tls_key, args.insecure_plaintext))
    return _run(server, "gateway")


def ttp_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cds-ttp")
    ap.add_argument("--config", type=Path, required=True)
    _common(ap)
    args = ap.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = TtpConfig.from_file(args.config)
    if args.listen:
        cfg.listen = parse_address(args.listen)
    svc = TtpService(cfg, tcp_connector(cfg.provider, _client_ctx(cfg.provider_ca, args.insecure_plaintext)))
    server = FrameServer(cfg.listen, svc, _server_ctx(cfg.tls_cert, cfg.tls_key, args.insecure_plaintext))
    return _run(server, "ttp")


def provider_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cds-provider")
    ap.add_argument("--config", type=Path)
    ap.add_argument("--root", type=Path)
    ap.add_argument("--test-mode", action="store_true", help="enable the tamper hook")
    ap.add_argument("--tls-cert")
    ap.add_argument("--tls-key")
    _common(ap)
    args = ap.parse_args(argv)
    _setup_logging(args.verbose)
    cfg = ProviderConfig.from_file(args.config) if args.config else ProviderConfig(root=Path("provider-store"))
    if args.root:
        cfg.root = args.root
    if args.listen:
        cfg.listen = parse_address(args.listen)
    cfg.test_mode = cfg.test_mode or args.test_mode
    cfg.tls_cert = args.tls_cert or cfg.tls_cert
    cfg.tls_key = args.tls_key or cfg.tls_key
    if cfg.test_mode:
        log.warning("provider running in TEST MODE: tamper endpoint enabled")
    server = FrameServer(cfg.listen, ProviderService(cfg), _server_ctx(cfg.tls_cert, cfg.tls_key, args.insecure_plaintext))
    return _run(server, "provider")
