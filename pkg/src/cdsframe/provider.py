"""Storage provider: receives encrypted fragments over MA2, hands them back,
and recomputes fragment MACs when the TTP reveals a challenge key.

The provider never sees plaintext or the decryption key; it is modelled as
honest-but-curious, with a test-mode ``tamper`` hook playing the adversary.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from . import crypto
from .config import Address, as_bool, load_kv, parse_address
from .crypto import EncryptedFragment
from .errors import CorruptStore, Conflict, Forbidden, InvalidArgument, NotFound, ParseError, StoreFailed
from .protocol import Envelope, b64d, b64e
from .storage import KeyedRWLocks, atomic_write, check_file_id
from .transport import RequestConnection

log = logging.getLogger(__name__)

COUNT_FILE = ".count"


@dataclass
class ProviderConfig:
    root: Path
    listen: Address = ("127.0.0.1", 7103)
    test_mode: bool = False
    tls_cert: Optional[str] = None
    tls_key: Optional[str] = None

    @classmethod
    def from_file(cls, path) -> "ProviderConfig":
        kv = load_kv(path)
        return cls(
            root=Path(kv.get("root", "provider-store")),
            listen=parse_address(kv.get("listen", "127.0.0.1:7103")),
            test_mode=as_bool(kv.get("test_mode", "false")),
            tls_cert=kv.get("tls_cert"),
            tls_key=kv.get("tls_key"),
        )


class FragmentStore:
    """One file per encrypted fragment at ``<root>/<file_id>/<index>``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks = KeyedRWLocks()

    def _dir(self, file_id: str) -> Path:
        return self.root / check_file_id(file_id)

    def put(self, file_id: str, fragments: List[EncryptedFragment]) -> int:
        crypto.check_indices(f.index for f in fragments)
        d = self._dir(file_id)
        with self._locks.write(file_id):
            if d.exists():
                raise Conflict(f"file {file_id} already stored")
            try:
                d.mkdir()
                for f in fragments:
                    atomic_write(d / str(f.index), f.ciphertext)
                atomic_write(d / COUNT_FILE, str(len(fragments)).encode())
            except OSError as exc:
                shutil.rmtree(d, ignore_errors=True)
                raise StoreFailed(f"could not persist fragments: {exc}") from exc
        return len(fragments)

    def get(self, file_id: str) -> List[EncryptedFragment]:
        d = self._dir(file_id)
        with self._locks.read(file_id):
            if not d.is_dir():
                raise NotFound(f"unknown file {file_id}")
            try:
                count = int((d / COUNT_FILE).read_text())
                return [EncryptedFragment(i, (d / str(i)).read_bytes()) for i in range(count)]
            except (OSError, ValueError) as exc:
                raise CorruptStore(f"fragment store for {file_id} is damaged: {exc}") from exc

    def tamper(self, file_id: str, index: int, byte_offset: int, xor_value: int) -> None:
        path = self._dir(file_id) / str(index)
        with self._locks.write(file_id):
            if not path.is_file():
                raise NotFound(f"no fragment {index} for {file_id}")
            data = bytearray(path.read_bytes())
            if not 0 <= byte_offset < len(data) or not 0 <= xor_value <= 255:
                raise InvalidArgument("tamper offset or xor value out of range")
            data[byte_offset] ^= xor_value
            atomic_write(path, bytes(data))


class ProviderService:
    def __init__(self, config: ProviderConfig):
        self.config = config
        self.store = FragmentStore(config.root)

    def connect(self) -> RequestConnection:
        return RequestConnection("provider", self.dispatch)

    # executor operations

    def store_fragments(self, file_id: str, fragments: List[EncryptedFragment]) -> int:
        return self.store.put(file_id, fragments)

    def retrieve_fragments(self, file_id: str) -> List[EncryptedFragment]:
        return self.store.get(file_id)

    def recompute_macs(self, file_id: str, key: bytes, key_index: int) -> List[bytes]:
        secret = bytearray(key)
        try:
            return [
                crypto.compute_mac(bytes(secret), file_id, f.index, f.ciphertext)
                for f in self.store.get(file_id)
            ]
        finally:
            # best effort: Python may still hold copies of the key elsewhere
            for i in range(len(secret)):
                secret[i] = 0

    def tamper(self, file_id: str, index: int, byte_offset: int, xor_value: int) -> None:
        if not self.config.test_mode:
            raise Forbidden("tamper is only available in test mode")
        self.store.tamper(file_id, index, byte_offset, xor_value)

    # wire dispatch

    def dispatch(self, env: Envelope):
        p = env.payload
        if env.type == "MA2_PUT":
            frags = []
            for item in p["fragments"]:
                if not isinstance(item, dict) or not isinstance(item.get("index"), int) \
                        or not isinstance(item.get("ciphertext"), str):
                    raise ParseError("fragment entries need an integer index and base64 ciphertext")
                frags.append(EncryptedFragment(item["index"], b64d(item["ciphertext"])))
            return "MA2_PUT_RESP", {"file_id": p["file_id"], "stored": self.store_fragments(p["file_id"], frags)}
        if env.type == "MA2_GET":
            frags = self.retrieve_fragments(p["file_id"])
            return "MA2_GET_RESP", {"fragments": [{"index": f.index, "ciphertext": b64e(f.ciphertext)} for f in frags]}
        if env.type == "MA2_MAC_CHALLENGE":
            tags = self.recompute_macs(p["file_id"], b64d(p["key"]), p["key_index"])
            return "MA2_MAC_RESP", {"tags": [{"index": i, "tag": b64e(t)} for i, t in enumerate(tags)]}
        if env.type == "MA2_TAMPER":
            self.tamper(p["file_id"], p["index"], p["byte_offset"], p["xor_value"])
            return "MA2_TAMPER_RESP", {"ok": True}
        raise InvalidArgument(f"provider cannot serve {env.type}")
