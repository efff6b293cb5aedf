"""Fragmentation, per-fragment RSA-OAEP encryption and fragment MACs.

Randomness is always drawn from an injected source with a ``randbytes(n)``
method.  Services pass ``secrets.SystemRandom()``; the simulator passes a
seeded ``random.Random`` so whole runs replay bit for bit.
"""
from __future__ import annotations

import hashlib
import hmac
import math
import secrets
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Protocol, Sequence

import gmpy2

from .errors import CorruptManifest, DecryptionFailure, EntropyFailure, InvalidArgument

HASH_LEN = 32
OAEP_OVERHEAD = 2 * HASH_LEN + 2  # 66 bytes
MAC_KEY_LEN = 32
DEFAULT_KEY_BITS = 2048
DEFAULT_FRAGMENT_SIZE = 190
PUBLIC_EXPONENT = 65537

_EMPTY_LABEL_HASH = hashlib.sha256(b"").digest()


class RandomSource(Protocol):
    def randbytes(self, n: int) -> bytes: ...


def system_random() -> RandomSource:
    return secrets.SystemRandom()


def _draw(rng: RandomSource, n: int) -> bytes:
    try:
        out = rng.randbytes(n)
    except Exception as exc:  # noqa: BLE001 - any entropy failure is fatal
        raise EntropyFailure(f"randomness source failed: {exc}") from exc
    if len(out) != n:
        raise EntropyFailure(f"randomness source returned {len(out)} bytes, wanted {n}")
    return out


# ---------------------------------------------------------------------------
# fragments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fragment:
    index: int
    payload: bytes


@dataclass(frozen=True)
class EncryptedFragment:
    index: int
    ciphertext: bytes


def oaep_capacity(modulus_bytes: int) -> int:
    """Largest plaintext that fits one OAEP block for the given modulus size."""
    return modulus_bytes - OAEP_OVERHEAD


def fragment(data: bytes, fragment_size: int, *, modulus_bits: int = DEFAULT_KEY_BITS) -> List[Fragment]:
    """Split ``data`` into ``fragment_size`` slices; empty data gives one empty fragment."""
    capacity = oaep_capacity(_byte_len(modulus_bits))
    if fragment_size < 1:
        raise InvalidArgument("fragment_size must be >= 1")
    if fragment_size > capacity:
        raise InvalidArgument(
            f"fragment_size {fragment_size} exceeds OAEP capacity {capacity} for a {modulus_bits}-bit modulus"
        )
    data = bytes(data)
    if not data:
        return [Fragment(0, b"")]
    return [
        Fragment(i, data[off:off + fragment_size])
        for i, off in enumerate(range(0, len(data), fragment_size))
    ]


def check_indices(indices: Iterable[int]) -> int:
    """Verify ``indices`` is a permutation of 0..n-1 and return n."""
    seen = sorted(indices)
    if not seen or seen != list(range(len(seen))):
        raise CorruptManifest(f"fragment indices are not a contiguous 0..n-1 run: {seen[:10]}")
    return len(seen)


def reassemble(fragments: Sequence[Fragment]) -> bytes:
    check_indices(f.index for f in fragments)
    return b"".join(f.payload for f in sorted(fragments, key=lambda f: f.index))


# ---------------------------------------------------------------------------
# RSA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PublicKey:
    n: int
    e: int

    @property
    def size_bytes(self) -> int:
        return _byte_len(self.n.bit_length())


@dataclass(frozen=True, repr=False)
class AsymKeyPair:
    n: int
    e: int
    d: int
    p: int
    q: int

    def __repr__(self):
        return f"AsymKeyPair(bits={self.bits}, e={self.e})"

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def size_bytes(self) -> int:
        return _byte_len(self.bits)

    @property
    def public(self) -> PublicKey:
        return PublicKey(self.n, self.e)


def _byte_len(bits: int) -> int:
    return (bits + 7) // 8


def keypair_from_primes(p: int, q: int, e: int = PUBLIC_EXPONENT) -> AsymKeyPair:
    """Textbook construction with d = e^-1 mod phi(n)."""
    if p == q:
        raise InvalidArgument("p and q must differ")
    phi = (p - 1) * (q - 1)
    if math.gcd(e, phi) != 1:
        raise InvalidArgument("e is not invertible modulo phi(n)")
    return AsymKeyPair(n=p * q, e=e, d=pow(e, -1, phi), p=p, q=q)


def _random_prime(bits: int, e: int, rng: RandomSource) -> int:
    nbytes = _byte_len(bits)
    excess = nbytes * 8 - bits
    while True:
        cand = int.from_bytes(_draw(rng, nbytes), "big") >> excess
        # top two bits set so the product has exactly 2*bits bits
        cand |= (3 << (bits - 2)) | 1
        if gmpy2.is_prime(cand, 40) and math.gcd(e, cand - 1) == 1:
            return cand


def generate_keypair(bits: int = DEFAULT_KEY_BITS, rng: Optional[RandomSource] = None,
                     e: int = PUBLIC_EXPONENT) -> AsymKeyPair:
    if bits < 16 or bits % 2:
        raise InvalidArgument("bits must be an even number >= 16")
    rng = rng or system_random()
    while True:
        p = _random_prime(bits // 2, e, rng)
        q = _random_prime(bits // 2, e, rng)
        if p == q:
            continue
        kp = keypair_from_primes(p, q, e)
        if kp.bits == bits:
            return kp


def rsa_encrypt_int(m: int, n: int, e: int) -> int:
    if not 0 <= m < n:
        raise InvalidArgument("message representative out of range")
    return int(gmpy2.powmod(m, e, n))


def rsa_decrypt_int(c: int, key: AsymKeyPair) -> int:
    if not 0 <= c < key.n:
        raise DecryptionFailure("ciphertext representative out of range")
    p, q = key.p, key.q
    mp = gmpy2.powmod(c, key.d % (p - 1), p)
    mq = gmpy2.powmod(c, key.d % (q - 1), q)
    h = (gmpy2.invert(q, p) * (mp - mq)) % p
    return int(mq + h * q)


# ---------------------------------------------------------------------------
# OAEP (SHA-256, MGF1-SHA-256, empty label)
# ---------------------------------------------------------------------------

def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    for counter in range(-(-length // HASH_LEN)):
        out += hashlib.sha256(seed + counter.to_bytes(4, "big")).digest()
    return bytes(out[:length])


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def oaep_encode(message: bytes, k: int, seed: bytes) -> bytes:
    mlen = len(message)
    if mlen > k - OAEP_OVERHEAD:
        raise InvalidArgument(f"message of {mlen} bytes exceeds OAEP capacity {k - OAEP_OVERHEAD}")
    db = _EMPTY_LABEL_HASH + bytes(k - mlen - OAEP_OVERHEAD) + b"\x01" + message
    masked_db = _xor(db, _mgf1(seed, k - HASH_LEN - 1))
    masked_seed = _xor(seed, _mgf1(masked_db, HASH_LEN))
    return b"\x00" + masked_seed + masked_db


def oaep_decode(em: bytes, k: int) -> bytes:
    if len(em) != k or k < OAEP_OVERHEAD:
        raise DecryptionFailure("decryption error")
    masked_seed, masked_db = em[1:1 + HASH_LEN], em[1 + HASH_LEN:]
    seed = _xor(masked_seed, _mgf1(masked_db, HASH_LEN))
    db = _xor(masked_db, _mgf1(seed, k - HASH_LEN - 1))
    rest = db[HASH_LEN:]
    sep = rest.find(b"\x01")
    bad = em[0] != 0
    bad |= not hmac.compare_digest(db[:HASH_LEN], _EMPTY_LABEL_HASH)
    bad |= sep < 0 or any(rest[:max(sep, 0)])
    if bad:
        # one message for every failure mode
        raise DecryptionFailure("decryption error")
    return rest[sep + 1:]


def encrypt_fragment(frag: Fragment, pub: PublicKey, rng: Optional[RandomSource] = None) -> EncryptedFragment:
    rng = rng or system_random()
    k = pub.size_bytes
    em = oaep_encode(frag.payload, k, _draw(rng, HASH_LEN))
    c = rsa_encrypt_int(int.from_bytes(em, "big"), pub.n, pub.e)
    return EncryptedFragment(frag.index, c.to_bytes(k, "big"))


def decrypt_fragment(ef: EncryptedFragment, key: AsymKeyPair) -> Fragment:
    k = key.size_bytes
    if len(ef.ciphertext) != k:
        raise DecryptionFailure("decryption error")
    m = rsa_decrypt_int(int.from_bytes(ef.ciphertext, "big"), key)
    return Fragment(ef.index, oaep_decode(m.to_bytes(k, "big"), k))


# ---------------------------------------------------------------------------
# MACs
# ---------------------------------------------------------------------------

def mac_message(file_id: str, index: int, ciphertext: bytes) -> bytes:
    """Canonical MAC input: file_id || 0x00 || u64be(index) || ciphertext."""
    return file_id.encode("utf-8") + b"\x00" + index.to_bytes(8, "big") + ciphertext


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    return hmac.new(key, message, hashlib.sha256).digest()


def compute_mac(key: bytes, file_id: str, index: int, ciphertext: bytes) -> bytes:
    return hmac_sha256(key, mac_message(file_id, index, ciphertext))


@dataclass
class MacKeySet:
    file_id: str
    keys: List[bytes]
    used: List[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.used:
            self.used = [False] * len(self.keys)
        if not self.keys or len(self.keys) != len(self.used):
            raise InvalidArgument("a MAC keyset needs K >= 1 keys and one used flag per key")
        if len(set(self.keys)) != len(self.keys):
            raise InvalidArgument("MAC keys must be pairwise distinct")

    def __repr__(self):
        return f"MacKeySet(file_id={self.file_id!r}, k={len(self.keys)}, unused={self.remaining})"

    @property
    def remaining(self) -> int:
        return self.used.count(False)

    def next_unused(self) -> Optional[int]:
        for j, flag in enumerate(self.used):
            if not flag:
                return j
        return None

    def burn(self, j: int) -> None:
        self.used[j] = True


def generate_mac_keyset(file_id: str, k: int, rng: Optional[RandomSource] = None) -> MacKeySet:
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    rng = rng or system_random()
    keys: List[bytes] = []
    seen = set()
    while len(keys) < k:
        key = _draw(rng, MAC_KEY_LEN)
        if key not in seen:
            seen.add(key)
            keys.append(key)
    return MacKeySet(file_id, keys)
