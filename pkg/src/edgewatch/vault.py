"""Incident encryption, the binary envelope format, and the on-device store.

Envelope layout (big-endian, 41-byte header followed by the payload)::

    offset  size  field
    0       4     magic            b"SMR1"
    4       1     version          0x01
    5       1     key_id
    6       16    session_id
    22      8     timestamp_ms     u64, ms since epoch
    30      1     class            0 Driver, 1 Passenger, 2 Violation
    31      2     confidence_x1e4  u16, 0..10000
    33      4     plaintext_crc32  CRC-32 (IEEE) of the unencrypted payload
    37      4     payload_len      u32
    41      n     payload          XOR-encrypted bytes

The XOR cipher offers no real confidentiality; it is the on-device
obfuscation scheme and the format reserves ``version`` and ``key_id`` for a
stronger cipher. Header fields travel in cleartext.
"""
from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import DetectionClass
from .errors import (
    BadMagic,
    DuplicateIncident,
    IntegrityFailure,
    KeyMismatch,
    MalformedEnvelope,
    StorageFull,
    UnsupportedVersion,
)

MAGIC = b"SMR1"
VERSION = 1
HEADER = struct.Struct(">4sBB16sQBHII")
HEADER_LEN = HEADER.size  # 41
assert HEADER_LEN == 41

STORE_DIRNAME = ".smr_incidents"
SUFFIX = ".smri"


@dataclass(frozen=True)
class EncryptionKey:
    key_bytes: bytes
    key_id: int = 0

    def __post_init__(self):
        if len(self.key_bytes) < 1:
            raise ValueError("encryption key must be at least one byte")
        if not 0 <= self.key_id <= 255:
            raise ValueError("key_id must fit in one byte")
        object.__setattr__(self, "key_bytes", bytes(self.key_bytes))

    @classmethod
    def from_hex(cls, hex_key: str, key_id: int = 0) -> "EncryptionKey":
        return cls(bytes.fromhex(hex_key), key_id)


@dataclass(frozen=True)
class IncidentMeta:
    """Cleartext envelope metadata.

    ``confidence`` is carried on the wire with 1e-4 resolution, so a value
    read back from an envelope is ``confidence_x1e4 / 10000``.
    """

    session_id: bytes
    timestamp_ms: int
    cls: DetectionClass
    confidence: float

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise ValueError("session_id must be 16 bytes")
        if not 0 <= self.timestamp_ms < 1 << 64:
            raise ValueError("timestamp_ms must fit in an unsigned 64-bit field")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")
        object.__setattr__(self, "cls", DetectionClass.parse(self.cls))

    @property
    def confidence_x1e4(self) -> int:
        # Python's round() is half-to-even
        return round(self.confidence * 10_000)


def xor_transform(data: bytes, key: EncryptionKey) -> bytes:
    """XOR every byte with the key, repeating the key as needed.

    Applying it twice with the same key returns the input.
    """
    if not data:
        return b""
    buf = np.frombuffer(data, dtype=np.uint8)
    k = np.frombuffer(key.key_bytes, dtype=np.uint8)
    stream = np.resize(k, buf.size)
    return (buf ^ stream).tobytes()


def seal_incident(payload: bytes, meta: IncidentMeta, key: EncryptionKey) -> bytes:
    payload = bytes(payload)
    header = HEADER.pack(
        MAGIC,
        VERSION,
        key.key_id,
        meta.session_id,
        meta.timestamp_ms,
        int(meta.cls),
        meta.confidence_x1e4,
        zlib.crc32(payload),
        len(payload),
    )
    return header + xor_transform(payload, key)


@dataclass(frozen=True)
class EnvelopeHeader:
    key_id: int
    meta: IncidentMeta
    plaintext_crc32: int
    payload_len: int

    @property
    def total_len(self) -> int:
        return HEADER_LEN + self.payload_len


def read_header(envelope: bytes) -> EnvelopeHeader:
    """Parse and validate the cleartext header without decrypting."""
    if len(envelope) < HEADER_LEN:
        raise MalformedEnvelope(f"envelope is {len(envelope)} bytes, header needs {HEADER_LEN}")
    magic, version, key_id, sid, ts, cls, conf, crc, n = HEADER.unpack_from(envelope)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"envelope version {version} is not supported")
    if conf > 10_000:
        raise MalformedEnvelope(f"confidence field {conf} exceeds 10000")
    try:
        cls = DetectionClass(cls)
    except ValueError:
        raise MalformedEnvelope(f"unknown class byte {cls}") from None
    meta = IncidentMeta(sid, ts, cls, conf / 10_000)
    return EnvelopeHeader(key_id, meta, crc, n)


def open_incident(envelope: bytes, key: EncryptionKey) -> tuple[IncidentMeta, bytes]:
    envelope = bytes(envelope)
    header = read_header(envelope)
    if header.key_id != key.key_id:
        raise KeyMismatch(f"envelope sealed with key {header.key_id}, got key {key.key_id}")
    if len(envelope) != header.total_len:
        raise MalformedEnvelope(
            f"payload_len says {header.payload_len}, envelope carries {len(envelope) - HEADER_LEN}"
        )
    payload = xor_transform(envelope[HEADER_LEN:], key)
    if zlib.crc32(payload) != header.plaintext_crc32:
        raise IntegrityFailure("payload CRC-32 mismatch (wrong key or corrupted envelope)")
    return header.meta, payload


def incident_filename(timestamp_ms: int, frame_id: int) -> str:
    # zero padding keeps lexicographic order chronological
    return f"{timestamp_ms:020d}_{frame_id:010d}{SUFFIX}"


class IncidentStore:
    """Write-once envelope store under a hidden ``.smr_incidents`` folder.

    Files appear atomically: the envelope is written to a temporary file and
    hard-linked into place, so readers never see a partial file and a name
    collision is detected without overwriting.
    """

    def __init__(self, root, max_bytes: int | None = None):
        self.root = Path(root)
        self.directory = self.root / STORE_DIRNAME
        self.directory.mkdir(parents=True, exist_ok=True)
        self.max_bytes = max_bytes
        self._lock = threading.Lock()

    def used_bytes(self) -> int:
        return sum(p.stat().st_size for p in self.directory.glob(f"*{SUFFIX}"))

    def store_incident(self, envelope: bytes, frame_id: int) -> Path:
        header = read_header(envelope)
        name = incident_filename(header.meta.timestamp_ms, frame_id)
        target = self.directory / name
        with self._lock:
            if target.exists():
                raise DuplicateIncident(f"incident {name} already stored")
            if self.max_bytes is not None and self.used_bytes() + len(envelope) > self.max_bytes:
                raise StorageFull(f"store limit of {self.max_bytes} bytes reached")
            tmp = self.directory / f".{name}.{os.getpid()}.{threading.get_ident()}.part"
            with open(tmp, "wb") as fh:
                fh.write(envelope)
                fh.flush()
                os.fsync(fh.fileno())
            try:
                os.link(tmp, target)
            except FileExistsError:
                raise DuplicateIncident(f"incident {name} already stored") from None
            finally:
                tmp.unlink()
        return target

    def list_incidents(self) -> list[str]:
        return sorted(p.name for p in self.directory.glob(f"*{SUFFIX}"))

    def read(self, name: str) -> bytes:
        return (self.directory / name).read_bytes()
