import datetime
import io
import ipaddress

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from cdsframe.client import EXIT_DENIED, EXIT_INTEGRITY, EXIT_OK, EXIT_REQUEST, EXIT_TRANSPORT, main
from cdsframe.errors import AuthRejected, RemoteError
from cdsframe.gateway import GatewayConfig, GatewayService
from cdsframe.provider import ProviderConfig, ProviderService
from cdsframe.transport import FrameServer, client_ssl_context, server_ssl_context, tcp_connector
from cdsframe.ttp import TtpConfig, TtpService


def run(harness, *argv, password="wonderland", connector=None):
    out, err = io.StringIO(), io.StringIO()
    code = main(["--user", "alice", *argv], connector=connector or harness.client_link, out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def cli(harness, monkeypatch):
    monkeypatch.setenv("CDS_PASSWORD", "wonderland")
    assert run(harness, "register")[0] == EXIT_OK
    return harness


def test_session_api(alice):
    fid = alice.put("notes.txt", b"some bytes")
    assert alice.get(fid) == ("notes.txt", b"some bytes")
    assert alice.check(fid) == (True, [])


def test_login_rejection_raises(harness):
    harness.new_client().register("alice", "wonderland")
    with pytest.raises(AuthRejected):
        harness.new_client().login("alice", "bad")


def test_put_get_check_roundtrip(cli, tmp_path):
    src = tmp_path / "in.bin"
    payload = cli.data_rng.randbytes(1000)
    src.write_bytes(payload)
    code, out, _ = run(cli, "put", str(src))
    assert code == EXIT_OK
    fid = out.strip()
    dst = tmp_path / "out.bin"
    assert run(cli, "get", fid, "--out", str(dst))[0] == EXIT_OK
    assert dst.read_bytes() == payload
    assert run(cli, "check", fid)[:2] == (EXIT_OK, "OK\n")

    cli.tamper(fid, 3, 10, 0x40)
    code, out, _ = run(cli, "check", fid)
    assert (code, out) == (EXIT_INTEGRITY, "CORRUPTED fragments: [3]\n")
    code, _, err = run(cli, "get", fid, "--out", str(dst))
    assert code == EXIT_INTEGRITY and "INTEGRITY_ALARM" in err


def test_login_and_status(cli):
    assert run(cli, "login")[0] == EXIT_OK
    code, out, _ = run(cli, "status")
    assert code == EXIT_OK and "authenticated as alice" in out


def test_exit_codes(cli, monkeypatch):
    monkeypatch.setenv("CDS_PASSWORD", "nope")
    assert run(cli, "login")[0] == EXIT_DENIED
    monkeypatch.setenv("CDS_PASSWORD", "wonderland")
    cli.ttp_link.down = True
    assert run(cli, "check", "0" * 32)[0] == EXIT_TRANSPORT
    cli.ttp_link.down = False
    code, _, err = run(cli, "check", "0" * 32)
    assert code == EXIT_REQUEST and "NOT_FOUND" in err
    cli.client_link.down = True
    assert run(cli, "login")[0] == EXIT_TRANSPORT


def test_trust_denial_exit_code(cli):
    cid = cli.gateway.authenticate("alice", "wonderland")
    from cdsframe.trust import ActionClass
    for _ in range(2):
        cli.gateway.trust.record(cid, ActionClass.MALICIOUS)
    code, _, err = run(cli, "check", "0" * 32)
    assert code == EXIT_DENIED and "TRUST_DENIED" in err


def _self_signed(tmp_path):
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "localhost")])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name).issuer_name(name).public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(x509.SubjectAlternativeName(
            [x509.DNSName("localhost"), x509.IPAddress(ipaddress.ip_address("127.0.0.1"))]), critical=False)
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .sign(key, hashes.SHA256())
    )
    cert_path, key_path = tmp_path / "cert.pem", tmp_path / "key.pem"
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                           serialization.NoEncryption()))
    return str(cert_path), str(key_path)


def test_tcp_tls_end_to_end(tmp_path, monkeypatch):
    cert, key = _self_signed(tmp_path)
    sctx, cctx = server_ssl_context(cert, key), client_ssl_context(cert)
    servers = []

    def serve(service):
        srv = FrameServer(("127.0.0.1", 0), service, sctx)
        srv.start_background()
        servers.append(srv)
        return srv.server_address[:2]

    try:
        prov = serve(ProviderService(ProviderConfig(root=tmp_path / "p", test_mode=True)))
        ttp = serve(TtpService(TtpConfig(root=tmp_path / "t"), tcp_connector(prov, cctx, timeout=10)))
        gw = serve(GatewayService(GatewayConfig(state_dir=tmp_path / "g", hash_iterations=10_000),
                                  tcp_connector(ttp, cctx, timeout=10)))
        monkeypatch.setenv("CDS_PASSWORD", "pw")
        base = ["--gateway", f"127.0.0.1:{gw[1]}", "--ca", cert, "--user", "erin"]
        out = io.StringIO()
        assert main(base + ["register"], out=out) == EXIT_OK
        src, dst = tmp_path / "doc", tmp_path / "doc.out"
        src.write_bytes(b"over the wire " * 40)
        out = io.StringIO()
        assert main(base + ["put", str(src)], out=out) == EXIT_OK
        fid = out.getvalue().strip()
        assert main(base + ["get", fid, "--out", str(dst)], out=io.StringIO()) == EXIT_OK
        assert dst.read_bytes() == src.read_bytes()
        out = io.StringIO()
        assert main(base + ["check", fid], out=out) == EXIT_OK and out.getvalue() == "OK\n"
        # a client that does not trust the certificate cannot connect
        err = io.StringIO()
        code = main(["--gateway", f"127.0.0.1:{gw[1]}", "--user", "erin", "login"], out=io.StringIO(), err=err)
        assert code == EXIT_TRANSPORT
        # plaintext client against a TLS server gets nothing useful back
        code = main(["--gateway", f"127.0.0.1:{gw[1]}", "--insecure-plaintext", "--user", "erin", "login"],
                    connector=tcp_connector(gw, None, timeout=5), out=io.StringIO(), err=io.StringIO())
        assert code != EXIT_OK
    finally:
        for srv in servers:
            srv.shutdown()
            srv.server_close()
