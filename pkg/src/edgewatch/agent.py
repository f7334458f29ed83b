"""Ridesharing-agent service: envelope ingest, incident log, vehicle registry.

Incidents are persisted to an append-only log whose records are the raw
envelope bytes prefixed by the 8-byte big-endian ``received_at_ms``. The
envelope header carries its own payload length, so records are
self-delimiting and the in-memory index can be rebuilt by replaying the log.

The HTTP surface (see :func:`dispatch` and :func:`make_server`)::

    POST /incidents               body = envelope bytes -> {"incident_id": n}
    GET  /incidents?session=<hex> incident metadata, payloads excluded
    GET  /incidents/<id>/payload  decrypted payload bytes
    PUT  /vehicles/<id>           JSON vehicle record
    GET  /vehicles/<id>
"""
from __future__ import annotations

import json
import logging
import struct
import threading
import time
import urllib.request
import zlib
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

from . import vault
from .errors import (
    DuplicateIncident,
    IntegrityFailure,
    InvalidRecord,
    MalformedEnvelope,
    UnknownIncident,
    UnknownKeyId,
    UnknownVehicle,
)

log = logging.getLogger(__name__)

_RECEIVED_AT = struct.Struct(">Q")
CONDITIONS = ("proper", "improper")


@dataclass(frozen=True)
class VehicleRecord:
    vehicle_id: str
    title_valid: bool
    insurance_valid: bool
    condition: str
    driver_id: str

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise InvalidRecord(f"condition must be one of {CONDITIONS}")


@dataclass(frozen=True)
class StoredIncident:
    incident_id: int
    session_id: bytes
    vehicle_id: str | None
    received_at_ms: int
    meta: vault.IncidentMeta
    payload: bytes = field(repr=False)

    def summary(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "session_id": self.session_id.hex(),
            "vehicle_id": self.vehicle_id,
            "received_at_ms": self.received_at_ms,
            "timestamp_ms": self.meta.timestamp_ms,
            "class": self.meta.cls.label,
            "confidence_x1e4": self.meta.confidence_x1e4,
            "payload_len": len(self.payload),
        }


class AgentService:
    """Holds the shared keys, the incident index and the vehicle registry.

    ``ingest`` is safe to call from many threads; incident ids are assigned
    under a lock in arrival order and readers see a consistent prefix.
    """

    def __init__(self, keys=(), log_path=None):
        if isinstance(keys, dict):
            keys = keys.values()
        self.keys = {k.key_id: k for k in keys}
        self.log_path = Path(log_path) if log_path is not None else None
        self._lock = threading.Lock()
        self._incidents: list[StoredIncident] = []
        self._seen: set[tuple[bytes, int, int]] = set()
        self._vehicles: dict[str, VehicleRecord] = {}
        self._session_vehicle: dict[bytes, str] = {}
        if self.log_path is not None and self.log_path.exists():
            self._replay_log()

    # incidents

    def bind_session(self, session_id: bytes, vehicle_id: str) -> None:
        with self._lock:
            self._session_vehicle[bytes(session_id)] = vehicle_id

    def _open(self, envelope: bytes):
        header = vault.read_header(envelope)
        key = self.keys.get(header.key_id)
        if key is None:
            raise UnknownKeyId(f"no key with id {header.key_id}")
        meta, payload = vault.open_incident(envelope, key)
        return header, meta, payload

    def ingest(self, envelope_bytes: bytes, received_at_ms: int | None = None,
               vehicle_id: str | None = None) -> int:
        envelope = bytes(envelope_bytes)
        header, meta, payload = self._open(envelope)
        if received_at_ms is None:
            received_at_ms = int(time.time() * 1000)
        dedup = (meta.session_id, meta.timestamp_ms, header.plaintext_crc32)
        with self._lock:
            if dedup in self._seen:
                raise DuplicateIncident(
                    f"incident {meta.session_id.hex()}@{meta.timestamp_ms} already ingested"
                )
            if self.log_path is not None:
                with open(self.log_path, "ab") as fh:
                    fh.write(_RECEIVED_AT.pack(received_at_ms) + envelope)
                    fh.flush()
            incident_id = len(self._incidents) + 1
            vid = vehicle_id or self._session_vehicle.get(meta.session_id)
            self._incidents.append(
                StoredIncident(incident_id, meta.session_id, vid, received_at_ms, meta, payload)
            )
            self._seen.add(dedup)
        log.debug("ingested incident %d for session %s", incident_id, meta.session_id.hex())
        return incident_id

    def _replay_log(self) -> None:
        data = self.log_path.read_bytes()
        pos = 0
        while pos < len(data):
            head_end = pos + _RECEIVED_AT.size + vault.HEADER_LEN
            if head_end > len(data):
                break
            (received_at,) = _RECEIVED_AT.unpack_from(data, pos)
            header = vault.read_header(data[pos + _RECEIVED_AT.size:head_end])
            end = pos + _RECEIVED_AT.size + header.total_len
            if end > len(data):
                break
            envelope = data[pos + _RECEIVED_AT.size:end]
            _, meta, payload = self._open(envelope)
            incident_id = len(self._incidents) + 1
            self._incidents.append(
                StoredIncident(incident_id, meta.session_id, None, received_at, meta, payload)
            )
            self._seen.add((meta.session_id, meta.timestamp_ms, zlib.crc32(payload)))
            pos = end
        if pos < len(data):
            log.warning("dropping %d trailing bytes of a partial log record", len(data) - pos)
            with open(self.log_path, "r+b") as fh:
                fh.truncate(pos)

    def query_incidents(self, session_id: bytes | None = None) -> list[dict]:
        with self._lock:
            snapshot = list(self._incidents)
        return [i.summary() for i in snapshot if session_id is None or i.session_id == session_id]

    def get_incident(self, incident_id: int) -> StoredIncident:
        with self._lock:
            if not 1 <= incident_id <= len(self._incidents):
                raise UnknownIncident(f"no incident {incident_id}")
            return self._incidents[incident_id - 1]

    def fetch_payload(self, incident_id: int) -> bytes:
        return self.get_incident(incident_id).payload

    def __len__(self):
        with self._lock:
            return len(self._incidents)

    # vehicles

    def register_vehicle(self, record: VehicleRecord) -> None:
        if not record.title_valid:
            raise InvalidRecord(f"vehicle {record.vehicle_id} has no valid title")
        with self._lock:
            self._vehicles[record.vehicle_id] = record

    def lookup_vehicle(self, vehicle_id: str) -> VehicleRecord:
        with self._lock:
            try:
                return self._vehicles[vehicle_id]
            except KeyError:
                raise UnknownVehicle(f"unknown vehicle {vehicle_id!r}") from None


# request/response layer

_STATUS = [
    (DuplicateIncident, HTTPStatus.CONFLICT),
    (MalformedEnvelope, HTTPStatus.BAD_REQUEST),
    (UnknownKeyId, HTTPStatus.UNPROCESSABLE_ENTITY),
    (IntegrityFailure, HTTPStatus.UNPROCESSABLE_ENTITY),
    (InvalidRecord, HTTPStatus.UNPROCESSABLE_ENTITY),
    (UnknownVehicle, HTTPStatus.NOT_FOUND),
    (UnknownIncident, HTTPStatus.NOT_FOUND),
]

JSON = "application/json"
OCTETS = "application/octet-stream"


def _json(status, obj):
    return int(status), JSON, json.dumps(obj).encode()


def _error(status, exc):
    return _json(status, {"error": type(exc).__name__, "detail": str(exc)})


def dispatch(service: AgentService, method: str, path: str, body: bytes = b"",
             headers=None) -> tuple[int, str, bytes]:
    """Route one request to ``service``; returns ``(status, content_type, body)``."""
    headers = {k.lower(): v for k, v in (headers or {}).items()}
    url = urlsplit(path)
    parts = [p for p in url.path.split("/") if p]
    try:
        if parts == ["incidents"] and method == "POST":
            received = headers.get("x-received-at")
            incident_id = service.ingest(
                body,
                received_at_ms=int(received) if received is not None else None,
                vehicle_id=headers.get("x-vehicle-id"),
            )
            return _json(HTTPStatus.CREATED, {"incident_id": incident_id})
        if parts == ["incidents"] and method == "GET":
            session = parse_qs(url.query).get("session", [None])[0]
            sid = bytes.fromhex(session) if session else None
            return _json(HTTPStatus.OK, service.query_incidents(sid))
        if len(parts) == 3 and parts[0] == "incidents" and parts[2] == "payload" and method == "GET":
            payload = service.fetch_payload(int(parts[1]))
            return int(HTTPStatus.OK), OCTETS, payload
        if len(parts) == 2 and parts[0] == "vehicles":
            if method == "PUT":
                fields = json.loads(body or b"{}")
                fields["vehicle_id"] = parts[1]
                try:
                    record = VehicleRecord(**fields)
                except TypeError as exc:
                    raise InvalidRecord(str(exc)) from None
                service.register_vehicle(record)
                return _json(HTTPStatus.OK, asdict(record))
            if method == "GET":
                return _json(HTTPStatus.OK, asdict(service.lookup_vehicle(parts[1])))
        if parts and parts[0] in ("incidents", "vehicles"):
            return _json(HTTPStatus.METHOD_NOT_ALLOWED, {"error": "MethodNotAllowed"})
        return _json(HTTPStatus.NOT_FOUND, {"error": "NotFound"})
    except Exception as exc:
        for exc_type, status in _STATUS:
            if isinstance(exc, exc_type):
                return _error(status, exc)
        if isinstance(exc, ValueError):  # bad ids, hex, JSON
            return _error(HTTPStatus.BAD_REQUEST, exc)
        raise


class _Handler(BaseHTTPRequestHandler):
    service: AgentService

    def _handle(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        status, ctype, payload = dispatch(self.service, self.command, self.path, body,
                                          dict(self.headers))
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    do_GET = do_POST = do_PUT = _handle

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


def make_server(service: AgentService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("AgentHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


class HttpAgentSink:
    """Transport sink that POSTs envelopes to a running agent server."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def __call__(self, envelope: bytes) -> int:
        req = urllib.request.Request(
            f"{self.base_url}/incidents", data=envelope, method="POST",
            headers={"Content-Type": OCTETS},
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read())["incident_id"]
