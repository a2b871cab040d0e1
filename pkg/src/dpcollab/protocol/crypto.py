"""Authenticated encryption for assets at rest and messages in transit.

Sealed asset blobs: [1-byte version][12-byte nonce][ciphertext][16-byte tag].
Envelopes: little-endian length-prefixed fields in declared order (sender,
recipient, sequence, kind, nonce, ciphertext+tag); the header fields are
bound into the AEAD as associated data, so altering any of them breaks
authentication even though they travel in the clear.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import ConfigurationError, FormatError, TamperError

SEAL_VERSION = 1
NONCE_LEN = 12
TAG_LEN = 16
KEY_LEN = 32


def _check_key(key: bytes) -> bytes:
    key = bytes(key)
    if len(key) != KEY_LEN:
        raise ConfigurationError(f"keys must be {KEY_LEN} bytes, got {len(key)}")
    return key


def seal_asset(plaintext: bytes, key: bytes) -> bytes:
    """Encrypt an asset for untrusted storage."""
    key = _check_key(key)
    nonce = os.urandom(NONCE_LEN)
    ciphertext = AESGCM(key).encrypt(nonce, bytes(plaintext), None)
    return bytes([SEAL_VERSION]) + nonce + ciphertext


def open_asset(blob: bytes, key: bytes) -> bytes:
    """Decrypt a sealed blob; any bit flip or wrong key raises TamperError."""
    key = _check_key(key)
    if len(blob) < 1 + NONCE_LEN + TAG_LEN:
        raise FormatError(f"sealed blob too short ({len(blob)} bytes)")
    if blob[0] != SEAL_VERSION:
        raise FormatError(f"unknown sealed blob version {blob[0]}")
    nonce = blob[1 : 1 + NONCE_LEN]
    try:
        return AESGCM(key).decrypt(nonce, bytes(blob[1 + NONCE_LEN :]), None)
    except InvalidTag as exc:
        raise TamperError("sealed asset failed authentication") from exc


def _encode_fields(fields) -> bytes:
    out = bytearray()
    for value in fields:
        out += struct.pack("<I", len(value))
        out += value
    return bytes(out)


def _decode_fields(raw: bytes, count: int):
    fields, offset = [], 0
    for _ in range(count):
        if offset + 4 > len(raw):
            raise FormatError(f"envelope truncated at byte offset {offset}")
        (length,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if offset + length > len(raw):
            raise FormatError(f"envelope field overruns buffer at byte offset {offset}")
        fields.append(raw[offset : offset + length])
        offset += length
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after envelope")
    return fields


@dataclass(frozen=True)
class Envelope:
    """One authenticated message between two components."""

    sender: str
    recipient: str
    sequence: int
    kind: str
    nonce: bytes
    ciphertext: bytes  # includes the 16-byte tag

    def header_bytes(self) -> bytes:
        return _encode_fields(
            [
                self.sender.encode(),
                self.recipient.encode(),
                struct.pack("<Q", self.sequence),
                self.kind.encode(),
                self.nonce,
            ]
        )

    def encode(self) -> bytes:
        return _encode_fields(
            [
                self.sender.encode(),
                self.recipient.encode(),
                struct.pack("<Q", self.sequence),
                self.kind.encode(),
                self.nonce,
                self.ciphertext,
            ]
        )


def decode_envelope(raw: bytes) -> Envelope:
    sender, recipient, seq_bytes, kind, nonce, ciphertext = _decode_fields(bytes(raw), 6)
    if len(seq_bytes) != 8:
        raise FormatError("envelope sequence field must be 8 bytes")
    if len(nonce) != NONCE_LEN:
        raise FormatError(f"envelope nonce must be {NONCE_LEN} bytes")
    if len(ciphertext) < TAG_LEN:
        raise FormatError("envelope ciphertext shorter than the authentication tag")
    return Envelope(
        sender=sender.decode(),
        recipient=recipient.decode(),
        sequence=struct.unpack("<Q", seq_bytes)[0],
        kind=kind.decode(),
        nonce=bytes(nonce),
        ciphertext=bytes(ciphertext),
    )


def encrypt_envelope(key: bytes, sender: str, recipient: str, sequence: int, kind: str, nonce: bytes, payload: bytes) -> Envelope:
    key = _check_key(key)
    if len(nonce) != NONCE_LEN:
        raise ConfigurationError(f"nonce must be {NONCE_LEN} bytes")
    env = Envelope(sender, recipient, sequence, kind, bytes(nonce), b"")
    ciphertext = AESGCM(key).encrypt(nonce, payload, env.header_bytes())
    return Envelope(sender, recipient, sequence, kind, bytes(nonce), ciphertext)


def decrypt_envelope(key: bytes, envelope: Envelope) -> bytes:
    key = _check_key(key)
    try:
        return AESGCM(key).decrypt(envelope.nonce, envelope.ciphertext, envelope.header_bytes())
    except InvalidTag as exc:
        raise TamperError(
            f"envelope {envelope.sender}->{envelope.recipient} seq {envelope.sequence} failed authentication"
        ) from exc
