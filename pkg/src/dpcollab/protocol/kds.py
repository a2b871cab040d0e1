"""Key distribution with simulated attestation.

Components are "attested" by hashing (component kind, code version, canonical
session config); the KDS releases a key only to a requester presenting the
measurement the key was registered under, exactly once, and erases its stored
copy on release. This mirrors a hardware attestation flow closely enough to
test the key-lifecycle guarantees without any TEE.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from ..errors import ProtocolError
from .crypto import KEY_LEN

# Version string measured alongside the config; bumping it invalidates any
# key registrations made against older service code.
CODE_VERSION = "dpcollab/0.1.0"

DENY_UNKNOWN_KEY = "unknown_key"
DENY_MEASUREMENT_MISMATCH = "measurement_mismatch"
DENY_ALREADY_RELEASED = "already_released"


@dataclass(frozen=True)
class Measurement:
    """32-byte digest identifying (component kind, code version, config)."""

    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ProtocolError("measurement digest must be 32 bytes")

    def hex(self) -> str:
        return self.digest.hex()


def attest(kind: str, code_version: str, config) -> Measurement:
    """Measurement over length-prefixed (kind, code_version, canonical config).

    `config` is either a SessionConfig (canonicalized here) or raw canonical
    bytes; any single-byte change to any part changes the digest.
    """
    if isinstance(config, (bytes, bytearray)):
        config_bytes = bytes(config)
    else:
        config_bytes = config.canonical_bytes()
    h = hashlib.sha256()
    for part in (kind.encode(), code_version.encode(), config_bytes):
        h.update(struct.pack("<I", len(part)))
        h.update(part)
    return Measurement(h.digest())


@dataclass
class KeyRecord:
    """A registered key bound to the measurement allowed to receive it."""

    key_id: str
    key: bytearray | None
    expected_measurement: Measurement
    session_id: str
    released: bool = False

    def __post_init__(self):
        if self.key is not None:
            if len(self.key) != KEY_LEN:
                raise ProtocolError(f"key must be {KEY_LEN} bytes")
            self.key = bytearray(self.key)


@dataclass(frozen=True)
class KdsResponse:
    granted: bool
    key: bytes | None = None
    reason: str | None = None


@dataclass
class KeyDistributionService:
    """Stores keys until their single attested release, then forgets them."""

    records: dict = field(default_factory=dict)

    def register(self, record: KeyRecord) -> str:
        if record.key_id in self.records:
            raise ProtocolError(f"key id {record.key_id!r} already registered")
        if record.released or record.key is None:
            raise ProtocolError("cannot register an already-released record")
        self.records[record.key_id] = record
        return record.key_id

    def request(self, key_id: str, presented: Measurement) -> KdsResponse:
        record = self.records.get(key_id)
        if record is None:
            return KdsResponse(granted=False, reason=DENY_UNKNOWN_KEY)
        if record.released:
            return KdsResponse(granted=False, reason=DENY_ALREADY_RELEASED)
        if record.expected_measurement.digest != presented.digest:
            return KdsResponse(granted=False, reason=DENY_MEASUREMENT_MISMATCH)
        key = bytes(record.key)
        # Discard after sharing: zero the buffer, then drop it.
        record.key[:] = bytes(KEY_LEN)
        record.key = None
        record.released = True
        return KdsResponse(granted=True, key=key)
