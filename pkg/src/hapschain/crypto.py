"""Signatures, key derivation and hybrid public-key sealing.

Two signature schemes share one API:

* ``ed25519`` - real Ed25519 from the ``cryptography`` package (default).
* ``sim`` - a keyed SHA3 digest, for large simulations only.  Its
  verification needs nothing but the public key, so anyone can forge it; it
  exists because simulated nodes never forge and Ed25519 is too slow to sign
  every sensor packet of a desk-scale run in pure Python.

Public keys carry their scheme: Ed25519 keys are the raw 32 bytes, ``sim``
keys are 36 bytes starting with ``SIM1``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Dict, Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .core import NodeId, Signature, canonical_encode, register

_SIM_PREFIX = b"SIM1"
_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class Scheme(str, Enum):
    ED25519 = "ed25519"
    SIM = "sim"


class DecryptionFailure(Exception):
    """Ciphertext could not be opened with the given key."""


def _derive(label: bytes, seed: bytes, owner: NodeId) -> bytes:
    return hashlib.sha3_256(b"hapschain/" + label + b"/" + seed + canonical_encode(owner)).digest()


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes
    owner: NodeId
    scheme: Scheme = Scheme.ED25519
    box_seed: bytes = field(default=b"", repr=False)

    @cached_property
    def _ed_private(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.secret_key)

    @cached_property
    def _box_private(self) -> X25519PrivateKey:
        return X25519PrivateKey.from_private_bytes(self.box_seed)

    @cached_property
    def box_public_key(self) -> bytes:
        """X25519 public key used as the sealing address of this node."""
        return self._box_private.public_key().public_bytes(_RAW, _RAW_PUB)


def keygen(seed: bytes, owner: NodeId, scheme: Scheme | str = Scheme.ED25519) -> KeyPair:
    """Deterministic key pair; the owner is mixed into the derivation."""
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    scheme = Scheme(scheme)
    secret = _derive(b"sign", seed, owner)
    box_seed = _derive(b"box", seed, owner)
    if scheme is Scheme.ED25519:
        public = Ed25519PrivateKey.from_private_bytes(secret).public_key().public_bytes(_RAW, _RAW_PUB)
    else:
        public = _SIM_PREFIX + hashlib.sha3_256(b"sim-pk" + secret).digest()
    return KeyPair(public, secret, owner, scheme, box_seed)


def _sim_tag(public_key: bytes, message: bytes) -> bytes:
    return hashlib.sha3_256(public_key + message).digest()


def sign(message: bytes, key: KeyPair) -> Signature:
    if key.scheme is Scheme.ED25519:
        return Signature(key._ed_private.sign(message), key.owner)
    return Signature(_sim_tag(key.public_key, message), key.owner)


def verify(message: bytes, sig: Signature, public_key: bytes) -> bool:
    """True iff ``sig`` was made over ``message`` by the holder of ``public_key``.

    Malformed signatures or keys yield ``False`` rather than an exception.
    """
    data = sig.data
    if len(public_key) == 36 and public_key[:4] == _SIM_PREFIX:
        return len(data) == 32 and _sim_tag(public_key, message) == data
    if len(public_key) != 32 or len(data) != 64:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(data, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# ---------------------------------------------------------------------------
# Sealing: ephemeral X25519 + HKDF-SHA3 + ChaCha20-Poly1305


@register(20)
@dataclass(frozen=True)
class Ciphertext:
    ephemeral_public: bytes
    nonce: bytes
    body: bytes

    @property
    def size(self) -> int:
        return len(self.ephemeral_public) + len(self.nonce) + len(self.body)


def _seal_key(shared: bytes, ephemeral_public: bytes, recipient_public: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA3_256(),
        length=32,
        salt=None,
        info=b"hapschain/seal" + ephemeral_public + recipient_public,
    ).derive(shared)


def seal(message: bytes, recipient_public_key: bytes, randbytes: Optional[Callable[[int], bytes]] = None) -> Ciphertext:
    """Encrypt for the holder of the X25519 ``recipient_public_key``.

    ``randbytes`` supplies the ephemeral key and nonce; pass a seeded source
    for reproducible simulations, or leave it to use the OS generator.
    """
    rnd = randbytes or os.urandom
    ephemeral = X25519PrivateKey.from_private_bytes(rnd(32))
    ephemeral_public = ephemeral.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(recipient_public_key))
    key = _seal_key(shared, ephemeral_public, recipient_public_key)
    nonce = rnd(12)
    body = ChaCha20Poly1305(key).encrypt(nonce, message, ephemeral_public)
    return Ciphertext(ephemeral_public, nonce, body)


def unseal(ct: Ciphertext, recipient: KeyPair) -> bytes:
    """Open a :class:`Ciphertext`; raises :class:`DecryptionFailure` on any mismatch."""
    try:
        shared = recipient._box_private.exchange(X25519PublicKey.from_public_bytes(ct.ephemeral_public))
        key = _seal_key(shared, ct.ephemeral_public, recipient.box_public_key)
        return ChaCha20Poly1305(key).decrypt(ct.nonce, ct.body, ct.ephemeral_public)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionFailure("ciphertext does not open under this key") from exc


# ---------------------------------------------------------------------------


class KeyRegistry:
    """Static in-scenario PKI: every node's key pair derived from one seed."""

    def __init__(self, seed: bytes, scheme: Scheme | str = Scheme.ED25519) -> None:
        if len(seed) != 32:
            raise ValueError("registry seed must be 32 bytes")
        self.seed = seed
        self.scheme = Scheme(scheme)
        self._pairs: Dict[NodeId, KeyPair] = {}

    @classmethod
    def from_int(cls, seed: int, scheme: Scheme | str = Scheme.ED25519) -> "KeyRegistry":
        return cls(hashlib.sha3_256(b"hapschain/registry/" + str(seed).encode()).digest(), scheme)

    def keypair(self, node: NodeId) -> KeyPair:
        pair = self._pairs.get(node)
        if pair is None:
            pair = keygen(self.seed, node, self.scheme)
            self._pairs[node] = pair
        return pair

    def public_key(self, node: NodeId) -> bytes:
        return self.keypair(node).public_key

    def box_public_key(self, node: NodeId) -> bytes:
        return self.keypair(node).box_public_key

    def verify(self, message: bytes, sig: Signature, signer: Optional[NodeId] = None) -> bool:
        """Verify against the registered key of ``signer`` (defaults to ``sig.signer``)."""
        who = sig.signer if signer is None else signer
        if who != sig.signer:
            return False
        return verify(message, sig, self.public_key(who))

    def sign(self, message: bytes, node: NodeId) -> Signature:
        return sign(message, self.keypair(node))
