"""License issuance and delegation.

The authority holds the expanded master key and turns license requests
(an area plus a time span) into key bundles.  Area licensing derives one
record per (cell, epoch).  Delegation issues a sub-authority the same kind
of bundle for its region; derived keys delegate fine-grained authority
without the master key ever leaving the root.

A small TCP service fronts the authority: length-prefixed binary frames,
static bearer tokens, optional TLS.  Every issuance and delegation appends
one line to an audit log.
"""

from __future__ import annotations

import hmac
import socket
import socketserver
import ssl
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import geocell
from .kdf import KeyDeriver, epochs_for
from .keystore import (LICENSEE_ID_BYTES, KeyRecord, bundle_size,
                       encode_bundle)

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024

OP_ISSUE = 0x01
OP_FETCH = 0x02
OP_DELEGATE = 0x03

STATUS_OK = 0
STATUS_DENIED = 1
STATUS_NOT_FOUND = 2
STATUS_BAD_REQUEST = 3
STATUS_UNAVAILABLE = 4

_STATUS_NAMES = {
    STATUS_OK: "ok",
    STATUS_DENIED: "denied",
    STATUS_NOT_FOUND: "not-found",
    STATUS_BAD_REQUEST: "bad-request",
    STATUS_UNAVAILABLE: "service-unavailable",
}


class MasterKeyUnavailable(Exception):
    """The authority has no master key loaded (quorum not yet combined)."""


class AuthorityError(Exception):
    """Client-side error carrying the service status."""

    def __init__(self, status: int, message: str) -> None:
        super().__init__(
            f"{_STATUS_NAMES.get(status, status)}: {message}")
        self.status = status


@dataclass(frozen=True)
class LicenseRequest:
    """An area (explicit cells or a polygon, not both) over a day span."""

    licensee_id: bytes
    start_day: int
    end_day: int
    cells: tuple[geocell.Geocode, ...] | None = None
    polygon: tuple[geocell.GeoPoint, ...] | None = None
    purpose: str = ""

    def __post_init__(self) -> None:
        if len(self.licensee_id) != LICENSEE_ID_BYTES:
            raise ValueError(
                f"licensee id must be {LICENSEE_ID_BYTES} bytes")
        if (self.cells is None) == (self.polygon is None):
            raise ValueError("give exactly one of cells or polygon")


@dataclass(frozen=True)
class Delegation:
    """Grant of a fixed cell set to a sub-authority over a day span."""

    subauthority_id: bytes
    cells: tuple[geocell.Geocode, ...]
    start_day: int
    end_day: int

    def __post_init__(self) -> None:
        if len(self.subauthority_id) != LICENSEE_ID_BYTES:
            raise ValueError(
                f"subauthority id must be {LICENSEE_ID_BYTES} bytes")
        if not self.cells:
            raise ValueError("empty delegation")


class Authority:
    """Issues bundles from the master key and audit-logs every grant."""

    def __init__(self, deriver: KeyDeriver | None = None,
                 data_dir: str | Path | None = None) -> None:
        self._deriver = deriver
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.audit_lines: list[str] = []
        self._bundles: dict[bytes, bytes] = {}
        self._lock = threading.Lock()
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)

    def activate(self, deriver: KeyDeriver) -> None:
        """Load the master key, typically right after share combination."""
        self._deriver = deriver

    @property
    def ready(self) -> bool:
        return self._deriver is not None

    def _audit(self, event: str, detail: str) -> None:
        stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        line = f"{stamp} {event} {detail}"
        with self._lock:
            self.audit_lines.append(line)
            if self.data_dir is not None:
                with open(self.data_dir / "audit.log", "a",
                          encoding="utf-8") as f:
                    f.write(line + "\n")

    def _resolve_cells(self, req: LicenseRequest) -> list[geocell.Geocode]:
        if req.cells is not None:
            for c in req.cells:
                geocell.validate_geocode(c)
            cells = sorted(set(req.cells))
        else:
            cells = sorted(geocell.cover_area(req.polygon))
        if not cells:
            raise ValueError("request covers no cells")
        return cells

    def _derive_records(self, cells: Sequence[geocell.Geocode],
                        start_day: int, end_day: int) -> list[KeyRecord]:
        if self._deriver is None:
            raise MasterKeyUnavailable("no master key loaded")
        epochs = epochs_for(start_day, end_day)
        records = []
        for code in cells:
            for iv in epochs:
                gk = self._deriver.derive(code, iv)
                records.append(KeyRecord(code, iv.start_day, iv.end_day,
                                         gk.tub_key))
        return records

    def _store(self, owner_id: bytes, bundle: bytes) -> None:
        with self._lock:
            self._bundles[owner_id] = bundle
        if self.data_dir is not None:
            bundles = self.data_dir / "bundles"
            bundles.mkdir(exist_ok=True)
            (bundles / f"{owner_id.hex()}.bundle").write_bytes(bundle)

    def issue(self, req: LicenseRequest) -> bytes:
        """Derive and bundle keys for every (cell, epoch) in the request."""
        cells = self._resolve_cells(req)
        records = self._derive_records(cells, req.start_day, req.end_day)
        bundle = encode_bundle(req.licensee_id, records)
        self._store(req.licensee_id, bundle)
        epochs = len(records) // len(cells)
        self._audit(
            "issue",
            f"licensee={req.licensee_id.hex()} cells={len(cells)} "
            f"epochs={epochs} records={len(records)} "
            f"span=[{req.start_day},{req.end_day}) "
            f"bytes={bundle_size(len(records))} purpose={req.purpose!r}")
        return bundle

    def delegate(self, grant: Delegation) -> bytes:
        """Bundle a sub-authority's region keys; the master key stays here."""
        for c in grant.cells:
            geocell.validate_geocode(c)
        cells = sorted(set(grant.cells))
        records = self._derive_records(cells, grant.start_day, grant.end_day)
        bundle = encode_bundle(grant.subauthority_id, records)
        self._store(grant.subauthority_id, bundle)
        self._audit(
            "delegate",
            f"subauthority={grant.subauthority_id.hex()} cells={len(cells)} "
            f"records={len(records)} "
            f"span=[{grant.start_day},{grant.end_day})")
        return bundle

    def fetch_bundle(self, owner_id: bytes) -> bytes | None:
        """Most recent bundle issued to `owner_id`, if any."""
        with self._lock:
            bundle = self._bundles.get(owner_id)
        if bundle is None and self.data_dir is not None:
            path = self.data_dir / "bundles" / f"{owner_id.hex()}.bundle"
            if path.exists():
                bundle = path.read_bytes()
        return bundle


# ---- wire protocol ----


@dataclass(frozen=True)
class ClientCredential:
    """Static bearer token; admin tokens may act for any licensee."""

    token: str
    licensee_id: bytes
    admin: bool = False


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0
    credentials: Sequence[ClientCredential] = field(default_factory=tuple)
    tls_cert: str | Path | None = None
    tls_key: str | Path | None = None


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes | None:
    """One length-prefixed frame, or None at orderly EOF."""
    try:
        head = sock.recv(4)
    except (ConnectionError, ssl.SSLError, OSError):
        return None
    if not head:
        return None
    while len(head) < 4:
        chunk = sock.recv(4 - len(head))
        if not chunk:
            return None
        head += chunk
    (length,) = struct.unpack(">I", head)
    if length > MAX_FRAME_BYTES:
        raise ValueError(f"frame of {length} bytes exceeds limit")
    return _recv_exact(sock, length)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    if len(payload) > MAX_FRAME_BYTES:
        raise ValueError("frame too large")
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def encode_request(opcode: int, token: str, body: bytes) -> bytes:
    raw = token.encode("utf-8")
    return (bytes([PROTOCOL_VERSION, opcode])
            + struct.pack(">H", len(raw)) + raw + body)


def decode_request(payload: bytes) -> tuple[int, str, bytes]:
    if len(payload) < 4:
        raise ValueError("request too short")
    if payload[0] != PROTOCOL_VERSION:
        raise ValueError(f"unsupported protocol version {payload[0]}")
    opcode = payload[1]
    (tlen,) = struct.unpack_from(">H", payload, 2)
    if len(payload) < 4 + tlen:
        raise ValueError("request truncated in token")
    token = payload[4:4 + tlen].decode("utf-8")
    return opcode, token, payload[4 + tlen:]


def encode_response(status: int, body: bytes) -> bytes:
    return bytes([PROTOCOL_VERSION, status]) + body


def decode_response(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < 2:
        raise ValueError("response too short")
    if payload[0] != PROTOCOL_VERSION:
        raise ValueError(f"unsupported protocol version {payload[0]}")
    return payload[1], payload[2:]


def encode_issue_body(licensee_id: bytes, start_day: int, end_day: int,
                      cells: Sequence[str] | None,
                      polygon: Sequence[geocell.GeoPoint] | None,
                      purpose: str = "") -> bytes:
    out = bytearray()
    out += licensee_id
    out += struct.pack(">II", start_day, end_day)
    if cells is not None:
        out.append(0)
        out += struct.pack(">I", len(cells))
        for c in cells:
            out += c.encode("ascii")
    else:
        out.append(1)
        out += struct.pack(">I", len(polygon))
        for p in polygon:
            out += struct.pack(">dd", p.lat, p.lng)
    raw = purpose.encode("utf-8")
    out += struct.pack(">H", len(raw)) + raw
    return bytes(out)


def decode_issue_body(body: bytes) -> LicenseRequest:
    if len(body) < LICENSEE_ID_BYTES + 13:
        raise ValueError("issue body too short")
    licensee = body[:16]
    start, end = struct.unpack_from(">II", body, 16)
    kind = body[24]
    (count,) = struct.unpack_from(">I", body, 25)
    off = 29
    cells = polygon = None
    if kind == 0:
        if count > (len(body) - off) // 6:
            raise ValueError("cell list truncated")
        cells = tuple(body[off + 6 * i:off + 6 * (i + 1)].decode("ascii")
                      for i in range(count))
        off += 6 * count
    elif kind == 1:
        if count > (len(body) - off) // 16:
            raise ValueError("polygon truncated")
        polygon = tuple(
            geocell.GeoPoint(*struct.unpack_from(">dd", body, off + 16 * i))
            for i in range(count))
        off += 16 * count
    else:
        raise ValueError(f"unknown area kind {kind}")
    (plen,) = struct.unpack_from(">H", body, off)
    purpose = body[off + 2:off + 2 + plen].decode("utf-8")
    return LicenseRequest(licensee, start, end, cells=cells,
                          polygon=polygon, purpose=purpose)


def encode_delegate_body(subauthority_id: bytes, start_day: int,
                         end_day: int, cells: Sequence[str]) -> bytes:
    out = bytearray()
    out += subauthority_id
    out += struct.pack(">III", start_day, end_day, len(cells))
    for c in cells:
        out += c.encode("ascii")
    return bytes(out)


def decode_delegate_body(body: bytes) -> Delegation:
    if len(body) < LICENSEE_ID_BYTES + 12:
        raise ValueError("delegate body too short")
    sub = body[:16]
    start, end, count = struct.unpack_from(">III", body, 16)
    off = 28
    if count > (len(body) - off) // 6:
        raise ValueError("cell list truncated")
    cells = tuple(body[off + 6 * i:off + 6 * (i + 1)].decode("ascii")
                  for i in range(count))
    return Delegation(sub, cells, start, end)


# ---- service ----


class AuthorityServer:
    """Threaded TCP front end; one frame in, one frame out, repeated per
    connection until the client closes."""

    def __init__(self, authority: Authority, config: ServiceConfig) -> None:
        self.authority = authority
        self.config = config
        self._creds = list(config.credentials)
        outer = self

        tls_context = None
        if config.tls_cert is not None:
            tls_context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            tls_context.load_cert_chain(str(config.tls_cert),
                                        str(config.tls_key))

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

            def get_request(self):
                sock, addr = self.socket.accept()
                if tls_context is not None:
                    sock = tls_context.wrap_socket(sock, server_side=True)
                return sock, addr

            def handle_error(self, request, client_address):
                # a failed TLS handshake or torn connection is routine
                pass

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                while True:
                    try:
                        frame = recv_frame(self.request)
                    except (ValueError, ConnectionError):
                        return
                    if frame is None:
                        return
                    reply = outer._dispatch(frame)
                    try:
                        send_frame(self.request, reply)
                    except OSError:
                        return

        self._server = _Server((config.host, config.port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def _authenticate(self, token: str) -> ClientCredential | None:
        found = None
        for cred in self._creds:
            # compare every credential to keep timing flat
            if hmac.compare_digest(cred.token.encode(), token.encode()):
                found = cred
        return found

    def _dispatch(self, frame: bytes) -> bytes:
        try:
            opcode, token, body = decode_request(frame)
        except (ValueError, UnicodeDecodeError) as e:
            return encode_response(STATUS_BAD_REQUEST, str(e).encode())
        cred = self._authenticate(token)
        if cred is None:
            return encode_response(STATUS_DENIED, b"bad token")
        try:
            if opcode == OP_ISSUE:
                req = decode_issue_body(body)
                if not cred.admin and cred.licensee_id != req.licensee_id:
                    return encode_response(STATUS_DENIED,
                                           b"token not valid for licensee")
                return encode_response(STATUS_OK, self.authority.issue(req))
            if opcode == OP_FETCH:
                if len(body) != LICENSEE_ID_BYTES:
                    return encode_response(STATUS_BAD_REQUEST,
                                           b"fetch body must be 16 bytes")
                if not cred.admin and cred.licensee_id != body:
                    return encode_response(STATUS_DENIED,
                                           b"token not valid for licensee")
                bundle = self.authority.fetch_bundle(body)
                if bundle is None:
                    return encode_response(STATUS_NOT_FOUND,
                                           b"no bundle issued")
                return encode_response(STATUS_OK, bundle)
            if opcode == OP_DELEGATE:
                if not cred.admin:
                    return encode_response(STATUS_DENIED,
                                           b"delegation requires admin")
                grant = decode_delegate_body(body)
                return encode_response(STATUS_OK,
                                       self.authority.delegate(grant))
            return encode_response(STATUS_BAD_REQUEST,
                                   f"unknown opcode {opcode}".encode())
        except MasterKeyUnavailable as e:
            return encode_response(STATUS_UNAVAILABLE, str(e).encode())
        except (ValueError, UnicodeDecodeError) as e:
            return encode_response(STATUS_BAD_REQUEST, str(e).encode())

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class AuthorityClient:
    """Blocking client for the authority service."""

    def __init__(self, host: str, port: int, token: str,
                 tls_ca: str | Path | None = None,
                 server_hostname: str | None = None,
                 timeout: float = 10.0) -> None:
        self.host = host
        self.port = port
        self.token = token
        self.timeout = timeout
        self._context = None
        self._server_hostname = server_hostname or host
        if tls_ca is not None:
            self._context = ssl.create_default_context(
                cafile=str(tls_ca))

    def _roundtrip(self, opcode: int, body: bytes) -> bytes:
        with socket.create_connection((self.host, self.port),
                                      timeout=self.timeout) as raw:
            sock = raw
            if self._context is not None:
                sock = self._context.wrap_socket(
                    raw, server_hostname=self._server_hostname)
            send_frame(sock, encode_request(opcode, self.token, body))
            reply = recv_frame(sock)
        if reply is None:
            raise ConnectionError("server closed without replying")
        status, payload = decode_response(reply)
        if status != STATUS_OK:
            raise AuthorityError(status, payload.decode("utf-8", "replace"))
        return payload

    def request_license(self, licensee_id: bytes, start_day: int,
                        end_day: int, cells: Sequence[str] | None = None,
                        polygon: Sequence[geocell.GeoPoint] | None = None,
                        purpose: str = "") -> bytes:
        body = encode_issue_body(licensee_id, start_day, end_day,
                                 cells, polygon, purpose)
        return self._roundtrip(OP_ISSUE, body)

    def fetch_bundle(self, licensee_id: bytes) -> bytes:
        return self._roundtrip(OP_FETCH, licensee_id)

    def delegate(self, subauthority_id: bytes, cells: Sequence[str],
                 start_day: int, end_day: int) -> bytes:
        body = encode_delegate_body(subauthority_id, start_day, end_day,
                                    cells)
        return self._roundtrip(OP_DELEGATE, body)
