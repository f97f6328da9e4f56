"""Crypto capability bundle: hashing, key generation, signing, randomness.

Two interchangeable providers implement the same interface:

* :class:`HashProvider` -- the default for simulations. Keys are derived
  from seeds, the "signature" is a hash MAC keyed on the public half (which
  is itself a one-way derivation of the secret), and randomness is a
  counter-mode DRBG over the hash. Everything is deterministic under a
  fixed seed, so golden values and traces are stable.
* :class:`Ed25519Provider` -- a real signature scheme (via ``cryptography``)
  behind the identical interface; ed25519 signing is deterministic, so this
  provider is seed-stable too.

Adversaries in the model never forge signatures computationally; they
tamper with bytes, replay stale evidence, or sign with the wrong key. Both
providers make those manipulations detectable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

DIGEST_LEN = 32


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    """Public/secret halves. Secret bytes must never land in reports or traces."""

    public: bytes
    secret: bytes


def _seed_bytes(seed) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        return seed.to_bytes(16, "big", signed=False)
    if isinstance(seed, str):
        return seed.encode()
    raise TypeError(f"unsupported seed type {type(seed)!r}")


class _Drbg:
    """Counter-mode deterministic byte generator over SHA-256."""

    def __init__(self, seed):
        self._key = sha256(b"drbg" + _seed_bytes(seed))
        self._counter = 0

    def take(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += sha256(self._key + self._counter.to_bytes(8, "big"))
            self._counter += 1
        return bytes(out[:n])


class HashProvider:
    """Deterministic keyed-hash provider; see the module docstring."""

    name = "hash"

    def __init__(self, seed=0):
        self._drbg = _Drbg(seed)

    def hash(self, data: bytes) -> bytes:
        return sha256(data)

    def keygen(self, seed) -> KeyPair:
        secret = sha256(b"seckey" + _seed_bytes(seed))
        return KeyPair(public=self._public_of(secret), secret=secret)

    @staticmethod
    def _public_of(secret: bytes) -> bytes:
        return sha256(b"pubkey" + secret)

    def sign(self, secret: bytes, message: bytes) -> bytes:
        public = self._public_of(secret)
        return sha256(b"sig" + public + sha256(message))

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        return signature == sha256(b"sig" + public + sha256(message))

    def random(self, n: int) -> bytes:
        return self._drbg.take(n)


class Ed25519Provider:
    """Real-signature provider with seed-derived keys."""

    name = "ed25519"

    def __init__(self, seed=0):
        from cryptography.hazmat.primitives.asymmetric import ed25519
        self._ed25519 = ed25519
        self._drbg = _Drbg(seed)

    def hash(self, data: bytes) -> bytes:
        return sha256(data)

    def keygen(self, seed) -> KeyPair:
        raw = sha256(b"ed25519" + _seed_bytes(seed))
        key = self._ed25519.Ed25519PrivateKey.from_private_bytes(raw)
        public = key.public_key().public_bytes_raw()
        return KeyPair(public=public, secret=raw)

    def sign(self, secret: bytes, message: bytes) -> bytes:
        key = self._ed25519.Ed25519PrivateKey.from_private_bytes(secret)
        return key.sign(message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        try:
            pk = self._ed25519.Ed25519PublicKey.from_public_bytes(public)
            pk.verify(signature, message)
            return True
        except Exception:
            return False

    def random(self, n: int) -> bytes:
        return self._drbg.take(n)
