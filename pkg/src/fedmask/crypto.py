"""Cryptographic primitive layer at the 128-bit security level.

Concrete instantiation:

* key agreement      X25519 (32-byte public elements)
* signatures         Ed25519 (64-byte signatures)
* MAC                HMAC-SHA256 truncated to 16 bytes, 16-byte keys
* PRF                HMAC-SHA256 with length-framed label for domain separation
* PRG                SHAKE-128 treated as an XOF (prefix-stable byte stream)

Also houses the emulated operator PKI: a single in-process authority that
binds 30-byte NF hostnames to Ed25519 verification keys. All primitives are
pure after construction; the PKI serializes issuance behind a lock.
"""

from __future__ import annotations

import hmac as _hmac
import hashlib
import json
import os
import re
import struct
import threading
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)

HOSTNAME_BYTES = 30
DH_PUBLIC_BYTES = 32
DH_SECRET_BYTES = 32
SIGNATURE_BYTES = 64
MAC_KEY_BYTES = 16
MAC_TAG_BYTES = 16
PRF_OUTPUT_BYTES = 32

# gNB-XXXXXXXX token (12 bytes) followed by a dot and an operator domain.
_HOSTNAME_RE = re.compile(r"^gNB-[0-9A-F]{8}\.[a-z0-9][a-z0-9.-]*$")

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class PkiError(Exception):
    """Issuance or lookup rejected by the operator PKI."""


class DhError(Exception):
    """Peer public value is not a valid group element."""


def validate_hostname(hostname: str) -> None:
    """Reject hostnames that are not exactly 30 ASCII bytes of the NF form."""
    try:
        raw = hostname.encode("ascii")
    except UnicodeEncodeError as exc:
        raise PkiError(f"hostname is not ASCII: {hostname!r}") from exc
    if len(raw) != HOSTNAME_BYTES:
        raise PkiError(
            f"hostname must be exactly {HOSTNAME_BYTES} bytes, got {len(raw)}: {hostname!r}"
        )
    if not _HOSTNAME_RE.match(hostname):
        raise PkiError(f"hostname does not match gNB-XXXXXXXX.<domain>: {hostname!r}")


def make_hostname(index: int, domain: str = "myran.example.com") -> str:
    """Build a well-formed 30-byte hostname from a small integer."""
    name = f"gNB-{index:08X}.{domain}"
    validate_hostname(name)
    return name


@dataclass(frozen=True)
class Certificate:
    """Hostname/public-key binding signed by the PKI root."""

    hostname: str
    public_key: bytes  # 32-byte Ed25519 verification key
    signature: bytes   # 64-byte root signature over the binding

    def signed_payload(self) -> bytes:
        return b"nf-cert:" + self.hostname.encode("ascii") + self.public_key


@dataclass(frozen=True)
class Identity:
    """An enrolled NF: its hostname, signing keypair, and certificate."""

    hostname: str
    signing_key: Ed25519PrivateKey
    certificate: Certificate


@dataclass(frozen=True)
class DhKeyPair:
    private: X25519PrivateKey
    public: bytes  # 32-byte encoding of the group element

    @property
    def public_bytes(self) -> bytes:
        return self.public


def dh_generate(seed: Optional[bytes] = None) -> DhKeyPair:
    """Fresh ephemeral keypair; pass a 32-byte seed for deterministic runs."""
    raw = seed if seed is not None else os.urandom(32)
    if len(raw) != 32:
        raise DhError(f"DH seed must be 32 bytes, got {len(raw)}")
    private = X25519PrivateKey.from_private_bytes(raw)
    public = private.public_key().public_bytes(_RAW, _RAW_PUB)
    return DhKeyPair(private=private, public=public)


def dh_shared(private: X25519PrivateKey, peer_public: bytes) -> bytes:
    """Shared 32-byte secret; rejects malformed or low-order peer elements."""
    if len(peer_public) != DH_PUBLIC_BYTES:
        raise DhError(f"peer element must be {DH_PUBLIC_BYTES} bytes, got {len(peer_public)}")
    try:
        peer = X25519PublicKey.from_public_bytes(peer_public)
        return private.exchange(peer)
    except ValueError as exc:
        raise DhError(f"invalid peer group element: {exc}") from exc


def sign(signing_key: Ed25519PrivateKey, message: bytes) -> bytes:
    return signing_key.sign(message)


def verify(certificate: Certificate, message: bytes, signature: bytes) -> bool:
    """True iff signature is valid under the certificate's key. Never raises."""
    if len(signature) != SIGNATURE_BYTES:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(certificate.public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def mac(key: bytes, message: bytes) -> bytes:
    if len(key) != MAC_KEY_BYTES:
        raise ValueError(f"MAC key must be {MAC_KEY_BYTES} bytes, got {len(key)}")
    return _hmac.new(key, message, hashlib.sha256).digest()[:MAC_TAG_BYTES]


def mac_verify(key: bytes, message: bytes, tag: bytes) -> bool:
    if len(tag) != MAC_TAG_BYTES:
        return False
    return _hmac.compare_digest(mac(key, message), tag)


def prf(secret: bytes, label: bytes, context: bytes = b"") -> bytes:
    """Deterministic 32-byte PRF output, domain-separated by (label, context).

    The label is length-framed so that distinct (label, context) pairs can
    never collide by concatenation.
    """
    if len(secret) != 32:
        raise ValueError(f"PRF secret must be 32 bytes, got {len(secret)}")
    data = struct.pack(">I", len(label)) + label + context
    return _hmac.new(secret, data, hashlib.sha256).digest()


def prg(seed: bytes, length: int) -> bytes:
    """Expand a 32-byte seed into `length` pseudo-random bytes.

    Prefix-stable: prg(s, a) == prg(s, b)[:a] for a <= b.
    """
    if len(seed) != 32:
        raise ValueError(f"PRG seed must be 32 bytes, got {len(seed)}")
    if length < 0:
        raise ValueError("PRG length must be non-negative")
    if length == 0:
        return b""
    return hashlib.shake_128(seed).digest(length)


class OperatorPki:
    """In-process certificate authority for one operator's NF fleet.

    Issuance is serialized; lookups are read-only and may run concurrently.
    Revocation and expiry are out of scope.
    """

    def __init__(self, root_seed: Optional[bytes] = None):
        raw = root_seed if root_seed is not None else os.urandom(32)
        self._root_key = Ed25519PrivateKey.from_private_bytes(raw)
        self.root_public = self._root_key.public_key().public_bytes(_RAW, _RAW_PUB)
        self._certs: dict[str, Certificate] = {}
        self._lock = threading.Lock()

    def issue(self, hostname: str, key_seed: Optional[bytes] = None) -> Identity:
        """Enroll an NF: generate its signing keypair and certify the binding."""
        validate_hostname(hostname)
        token = hostname[:12]
        with self._lock:
            if any(h.startswith(token) for h in self._certs):
                raise PkiError(f"identifier token already enrolled: {token}")
            raw = key_seed if key_seed is not None else os.urandom(32)
            signing_key = Ed25519PrivateKey.from_private_bytes(raw)
            public = signing_key.public_key().public_bytes(_RAW, _RAW_PUB)
            unsigned = Certificate(hostname=hostname, public_key=public, signature=b"")
            signature = self._root_key.sign(unsigned.signed_payload())
            cert = Certificate(hostname=hostname, public_key=public, signature=signature)
            self._certs[hostname] = cert
        return Identity(hostname=hostname, signing_key=signing_key, certificate=cert)

    def lookup(self, hostname: str) -> Certificate:
        try:
            return self._certs[hostname]
        except KeyError:
            raise PkiError(f"unknown hostname: {hostname!r}") from None

    def verify_certificate(self, cert: Certificate) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(self.root_public).verify(
                cert.signature, cert.signed_payload()
            )
            return True
        except (InvalidSignature, ValueError):
            return False

    def export_certificates(self, path: str) -> None:
        rows = [
            {
                "hostname": c.hostname,
                "public_key_hex": c.public_key.hex(),
                "signature_hex": c.signature.hex(),
            }
            for c in self._certs.values()
        ]
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=2)

    def import_certificates(self, path: str) -> int:
        """Load a store written by export_certificates; returns count loaded."""
        with open(path) as fh:
            rows = json.load(fh)
        count = 0
        with self._lock:
            for row in rows:
                cert = Certificate(
                    hostname=row["hostname"],
                    public_key=bytes.fromhex(row["public_key_hex"]),
                    signature=bytes.fromhex(row["signature_hex"]),
                )
                if not self.verify_certificate(cert):
                    raise PkiError(f"imported certificate fails verification: {cert.hostname}")
                self._certs[cert.hostname] = cert
                count += 1
        return count

    def hostnames(self) -> list[str]:
        return sorted(self._certs)
