"""
Keys, signatures and digests.

Ed25519 through libnacl (libsodium); SHA-256 from hashlib. Keys are derived
from 32-byte seeds so topologies and tests are reproducible.
"""

from __future__ import annotations
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import libnacl

from .core import MalformedKey


PUBLIC_KEY_SIZE = libnacl.crypto_sign_PUBLICKEYBYTES
SIGNATURE_SIZE = libnacl.crypto_sign_BYTES
SEED_SIZE = libnacl.crypto_sign_SEEDBYTES
ZERO_HASH = bytes(32)


def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


def seed_from(label: str) -> bytes:
    """Deterministic 32-byte seed for a label (topology bootstrap, tests)."""
    return digest(b"green-bond-engine/seed/" + label.encode("utf-8"))


@dataclass(frozen=True)
class KeyPair:
    """
    An Ed25519 signing key and its public half.

    Examples:
        >>> pair = KeyPair.from_seed(seed_from("issuer"))
        >>> sig = pair.sign(b"hello")
        >>> verify(pair.public_key, b"hello", sig)
        True
    """

    public_key: bytes
    secret_key: bytes = field(repr=False)

    @classmethod
    def from_seed(cls, seed: bytes) -> KeyPair:
        if len(seed) != SEED_SIZE:
            raise MalformedKey(f"seed must be {SEED_SIZE} bytes")
        public, secret = libnacl.crypto_sign_seed_keypair(seed)
        return cls(public_key=public, secret_key=secret)

    @classmethod
    def generate(cls) -> KeyPair:
        public, secret = libnacl.crypto_sign_keypair()
        return cls(public_key=public, secret_key=secret)

    def sign(self, message: bytes) -> bytes:
        return libnacl.crypto_sign_detached(message, self.secret_key)


def check_public_key(public_key: bytes) -> bytes:
    """Return ``public_key`` if well-formed, else raise MalformedKey."""
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_SIZE:
        raise MalformedKey(f"public key must be {PUBLIC_KEY_SIZE} bytes")
    return bytes(public_key)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid Ed25519 signature of ``message``."""
    if len(signature) != SIGNATURE_SIZE or len(public_key) != PUBLIC_KEY_SIZE:
        return False
    try:
        libnacl.crypto_sign_verify_detached(signature, message, public_key)
    except ValueError:
        return False
    return True


# =========================================================================
# Batch signing
# =========================================================================


def batch_digest(messages: Iterable[bytes]) -> bytes:
    """Digest over the ordered digests of a batch of messages."""
    h = hashlib.sha256(b"batch")
    for message in messages:
        h.update(digest(message))
    return h.digest()


def sign_batch(pair: KeyPair, messages: Sequence[bytes]) -> bytes:
    """One signature covering every message of the batch, in order."""
    return pair.sign(batch_digest(messages))


def verify_batch(public_key: bytes, messages: Sequence[bytes], signature: bytes) -> bool:
    return verify(public_key, batch_digest(messages), signature)


@dataclass(frozen=True)
class Signer:
    """A party id bound to the key pair it currently signs with (node operators, clients)."""

    party_id: str
    keypair: KeyPair

    @classmethod
    def from_label(cls, party_id: str, label: str = "") -> Signer:
        return cls(party_id, KeyPair.from_seed(seed_from(label or party_id)))

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key

    def sign(self, message: bytes) -> bytes:
        return self.keypair.sign(message)

    def rotated(self, keypair: KeyPair) -> Signer:
        return Signer(self.party_id, keypair)
