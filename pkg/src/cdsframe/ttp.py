"""Trusted third party: encodes customer files, keeps manifests, audits the provider.

Store pipeline: fragment, fresh RSA keypair per file, OAEP-encrypt every
fragment, draw K MAC keys, tag every (key, fragment) pair over the
ciphertext, push the fragments to the provider and keep only the manifest.

An audit reveals one unused MAC key to the provider, which must answer with
the tags of what it actually holds.  Keys are burned on reveal.
"""
from __future__ import annotations

import hmac
import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from . import crypto
from .config import Address, load_kv, parse_address
from .crypto import AsymKeyPair, EncryptedFragment, MacKeySet
from .errors import (
    AuditInconclusive,
    CDSError,
    CorruptManifest,
    DecryptionFailure,
    Forbidden,
    IntegrityAlarm,
    InvalidArgument,
    KeyExhausted,
    NotFound,
    ParseError,
    RemoteError,
    StoreFailed,
    TransportError,
)
from .protocol import Envelope, b64d, b64e
from .storage import KeyedLocks, atomic_write, check_file_id
from .transport import ClientConnection, RequestConnection

log = logging.getLogger(__name__)


@dataclass
class TtpConfig:
    root: Path
    listen: Address = ("127.0.0.1", 7102)
    provider: Address = ("127.0.0.1", 7103)
    fragment_size: int = crypto.DEFAULT_FRAGMENT_SIZE
    key_bits: int = crypto.DEFAULT_KEY_BITS
    mac_keys: int = 16
    tls_cert: Optional[str] = None
    tls_key: Optional[str] = None
    provider_ca: Optional[str] = None

    def __post_init__(self):
        if self.key_bits < 2048:
            raise InvalidArgument("service keypairs must be at least 2048 bits")
        capacity = crypto.oaep_capacity(self.key_bits // 8)
        if not 1 <= self.fragment_size <= capacity:
            raise InvalidArgument(f"fragment_size must lie in [1, {capacity}] for {self.key_bits}-bit keys")
        if self.mac_keys < 1:
            raise InvalidArgument("mac_keys must be >= 1")

    @classmethod
    def from_file(cls, path) -> "TtpConfig":
        kv = load_kv(path)
        return cls(
            root=Path(kv.get("root", "ttp-store")),
            listen=parse_address(kv.get("listen", "127.0.0.1:7102")),
            provider=parse_address(kv.get("provider", "127.0.0.1:7103")),
            fragment_size=int(kv.get("fragment_size", crypto.DEFAULT_FRAGMENT_SIZE)),
            key_bits=int(kv.get("key_bits", crypto.DEFAULT_KEY_BITS)),
            mac_keys=int(kv.get("mac_keys", 16)),
            tls_cert=kv.get("tls_cert"),
            tls_key=kv.get("tls_key"),
            provider_ca=kv.get("provider_ca"),
        )


@dataclass
class FileManifest:
    file_id: str
    customer_id: str
    file_name: str
    original_length: int
    fragment_size: int
    fragment_count: int
    keypair: AsymKeyPair
    mac_keys: MacKeySet
    stored_macs: List[List[bytes]]  # [key_index][fragment_index]

    def __post_init__(self):
        rows = len(self.stored_macs)
        if rows != len(self.mac_keys.keys) or any(len(r) != self.fragment_count for r in self.stored_macs):
            raise CorruptManifest("stored MAC matrix does not match K x fragment_count")

    def record(self) -> dict:
        kp = self.keypair
        return {
            "file_id": self.file_id,
            "customer_id": self.customer_id,
            "file_name": self.file_name,
            "original_length": self.original_length,
            "fragment_size": self.fragment_size,
            "fragment_count": self.fragment_count,
            "keypair": {k: format(getattr(kp, k), "x") for k in ("n", "e", "d", "p", "q")},
            "stored_macs": [[b64e(t) for t in row] for row in self.stored_macs],
        }


class ManifestStore:
    """``<root>/<file_id>/manifest`` (JSON) and ``<root>/<file_id>/keys``
    (one ``base64-key<TAB>used-flag`` line per MAC key)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, file_id: str) -> Path:
        return self.root / check_file_id(file_id)

    def exists(self, file_id: str) -> bool:
        return self._dir(file_id).is_dir()

    @staticmethod
    def _keys_text(keys: MacKeySet) -> bytes:
        return "".join(f"{b64e(k)}\t{int(u)}\n" for k, u in zip(keys.keys, keys.used)).encode()

    def stage(self, manifest: FileManifest) -> Path:
        """Write the manifest into a hidden staging directory."""
        staging = self.root / f".staging-{manifest.file_id}"
        staging.mkdir()
        atomic_write(staging / "manifest", json.dumps(manifest.record(), sort_keys=True, indent=1).encode())
        atomic_write(staging / "keys", self._keys_text(manifest.mac_keys))
        return staging

    def commit(self, staging: Path, file_id: str) -> None:
        os.replace(staging, self._dir(file_id))

    @staticmethod
    def discard(staging: Path) -> None:
        shutil.rmtree(staging, ignore_errors=True)

    def load(self, file_id: str) -> FileManifest:
        d = self._dir(file_id)
        if not d.is_dir():
            raise NotFound(f"unknown file {file_id}")
        try:
            rec = json.loads((d / "manifest").read_text())
            keys, used = [], []
            for line in (d / "keys").read_text().splitlines():
                k, flag = line.split("\t")
                keys.append(b64d(k))
                used.append(flag == "1")
            kp = AsymKeyPair(**{k: int(v, 16) for k, v in rec["keypair"].items()})
            return FileManifest(
                file_id=rec["file_id"],
                customer_id=rec["customer_id"],
                file_name=rec["file_name"],
                original_length=rec["original_length"],
                fragment_size=rec["fragment_size"],
                fragment_count=rec["fragment_count"],
                keypair=kp,
                mac_keys=MacKeySet(file_id, keys, used),
                stored_macs=[[b64d(t) for t in row] for row in rec["stored_macs"]],
            )
        except (OSError, ValueError, KeyError, TypeError, ParseError) as exc:
            raise CorruptManifest(f"manifest for {file_id} unreadable: {exc}") from exc

    def save_key_flags(self, manifest: FileManifest) -> None:
        atomic_write(self._dir(manifest.file_id) / "keys", self._keys_text(manifest.mac_keys))


@dataclass
class CheckResult:
    ok: bool
    corrupted_indices: List[int]
    key_index: int


class TtpService:
    def __init__(self, config: TtpConfig, provider: Callable[[], ClientConnection],
                 rng: Optional[crypto.RandomSource] = None):
        self.config = config
        self.provider = provider
        self.rng = rng or crypto.system_random()
        self.manifests = ManifestStore(config.root)
        self._locks = KeyedLocks()

    def connect(self) -> RequestConnection:
        return RequestConnection("ttp", self.dispatch)

    # -- MA2 -----------------------------------------------------------------

    def _ma2(self, mtype: str, payload: dict) -> Envelope:
        sid = f"ma2-{self.rng.randbytes(8).hex()}"
        try:
            with self.provider() as conn:
                return conn.call(Envelope(mtype, sid, 1, payload))
        except CDSError:
            raise
        except (OSError, ValueError) as exc:
            raise TransportError(f"provider link failed: {exc}") from exc

    # -- operations ----------------------------------------------------------

    def handle_store(self, customer_id: str, file_name: str, data: bytes) -> str:
        cfg = self.config
        file_id = self.rng.randbytes(16).hex()
        frags = crypto.fragment(data, cfg.fragment_size, modulus_bits=cfg.key_bits)
        keypair = crypto.generate_keypair(cfg.key_bits, self.rng)
        encrypted = [crypto.encrypt_fragment(f, keypair.public, self.rng) for f in frags]
        del frags
        keyset = crypto.generate_mac_keyset(file_id, cfg.mac_keys, self.rng)
        macs = [[crypto.compute_mac(k, file_id, ef.index, ef.ciphertext) for ef in encrypted] for k in keyset.keys]
        manifest = FileManifest(file_id, customer_id, file_name, len(data), cfg.fragment_size,
                                len(encrypted), keypair, keyset, macs)
        with self._locks.hold(file_id):
            staging = self.manifests.stage(manifest)
            try:
                resp = self._ma2("MA2_PUT", {
                    "file_id": file_id,
                    "fragments": [{"index": ef.index, "ciphertext": b64e(ef.ciphertext)} for ef in encrypted],
                })
                if resp.payload["stored"] != len(encrypted):
                    raise StoreFailed(f"provider acknowledged {resp.payload['stored']} of {len(encrypted)} fragments")
            except (RemoteError, TransportError) as exc:
                self.manifests.discard(staging)
                raise StoreFailed(f"provider did not accept the fragments: {exc}") from exc
            except BaseException:
                self.manifests.discard(staging)
                raise
            self.manifests.commit(staging, file_id)
        # only the manifest outlives this call; drop the ciphertext buffers
        encrypted.clear()
        return file_id

    def _owned(self, customer_id: str, file_id: str) -> FileManifest:
        manifest = self.manifests.load(file_id)
        if manifest.customer_id != customer_id:
            raise Forbidden(f"file {file_id} belongs to another customer")
        return manifest

    def handle_retrieve(self, customer_id: str, file_id: str) -> Tuple[str, bytes]:
        check_file_id(file_id)
        with self._locks.hold(file_id):
            manifest = self._owned(customer_id, file_id)
            try:
                resp = self._ma2("MA2_GET", {"file_id": file_id})
            except RemoteError as exc:
                raise IntegrityAlarm(f"provider could not return {file_id}: {exc.code} {exc}") from exc
            try:
                encrypted = [EncryptedFragment(item["index"], b64d(item["ciphertext"]))
                             for item in resp.payload["fragments"]]
                count = crypto.check_indices(ef.index for ef in encrypted)
            except (CorruptManifest, ParseError, KeyError, TypeError) as exc:
                log.error("integrity alarm on %s: malformed fragment list (%s)", file_id, exc)
                raise IntegrityAlarm(f"provider returned a malformed fragment list: {exc}") from exc
            if count != manifest.fragment_count:
                log.error("integrity alarm on %s: %d fragments, expected %d", file_id, count, manifest.fragment_count)
                raise IntegrityAlarm(f"provider returned {count} fragments, expected {manifest.fragment_count}")
            try:
                frags = [crypto.decrypt_fragment(ef, manifest.keypair) for ef in encrypted]
            except DecryptionFailure as exc:
                log.error("integrity alarm on %s: fragment failed to decrypt", file_id)
                raise IntegrityAlarm(f"a fragment of {file_id} failed to decrypt") from exc
            data = crypto.reassemble(frags)
            if len(data) != manifest.original_length:
                raise IntegrityAlarm(f"reassembled {len(data)} bytes, expected {manifest.original_length}")
            return manifest.file_name, data

    def handle_check(self, customer_id: str, file_id: str) -> CheckResult:
        check_file_id(file_id)
        with self._locks.hold(file_id):
            manifest = self._owned(customer_id, file_id)
            keys = manifest.mac_keys
            j = keys.next_unused()
            if j is None:
                raise KeyExhausted(
                    f"all {len(keys.keys)} audit keys of {file_id} are spent; re-store the file to provision new keys"
                )
            # burn before reveal so a crash can never lead to reuse
            keys.burn(j)
            self.manifests.save_key_flags(manifest)
            try:
                resp = self._ma2("MA2_MAC_CHALLENGE", {"file_id": file_id, "key": b64e(keys.keys[j]), "key_index": j})
            except TransportError as exc:
                raise AuditInconclusive(f"provider did not answer the challenge: {exc}") from exc
            except RemoteError as exc:
                if exc.code == "NOT_FOUND":
                    return CheckResult(False, list(range(manifest.fragment_count)), j)
                raise AuditInconclusive(f"provider failed the challenge: {exc.code} {exc}") from exc
            expected = manifest.stored_macs[j]
            returned: Dict[int, bytes] = {}
            stray = False
            for item in resp.payload["tags"]:
                try:
                    idx, tag = item["index"], b64d(item["tag"])
                except (KeyError, TypeError, ParseError):
                    stray = True
                    continue
                if isinstance(idx, int) and 0 <= idx < manifest.fragment_count and idx not in returned:
                    returned[idx] = tag
                else:
                    stray = True
            corrupted = [
                i for i, want in enumerate(expected)
                if not hmac.compare_digest(returned.get(i, b""), want)
            ]
            return CheckResult(not corrupted and not stray, corrupted, j)

    # -- wire dispatch -------------------------------------------------------

    def dispatch(self, env: Envelope):
        p = env.payload
        cid = p["customer_id"]
        if env.type == "MA1_STORE":
            file_id = self.handle_store(cid, p["file_name"], b64d(p["data"]))
            return "MA1_STORE_RESP", {"customer_id": cid, "file_id": file_id}
        if env.type == "MA1_RETRIEVE":
            name, data = self.handle_retrieve(cid, p["file_id"])
            return "MA1_RETRIEVE_RESP", {"customer_id": cid, "file_name": name, "data": b64e(data)}
        if env.type == "MA1_CHECK":
            result = self.handle_check(cid, p["file_id"])
            return "MA1_CHECK_RESP", {"customer_id": cid, "ok": result.ok,
                                      "corrupted_indices": result.corrupted_indices}
        raise InvalidArgument(f"ttp cannot serve {env.type}")
