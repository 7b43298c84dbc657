"""Device-side storage for licensed cell keys.

Keys move as bundles: a small binary format holding the licensee id and a
list of fixed-width records (geocode, validity window, 32-byte key).  The
store itself keeps records indexed by cell for day-based lookup, and can
persist itself as a canonical bundle file, rewritten atomically on every
mutation so a torn write can never half-apply.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import geocell
from .kdf import GeoKey, TimeInterval

BUNDLE_MAGIC = b"GEOK"
BUNDLE_VERSION = 1
RECORD_BYTES = 46
HEADER_BYTES = 4 + 1 + 16 + 8
CHECKSUM_BYTES = 4
LICENSEE_ID_BYTES = 16
KEY_BYTES = 32

_RECORD = struct.Struct(">6sII32s")
_COUNT = struct.Struct(">Q")


class BundleFormatError(Exception):
    """Bundle bytes are malformed; nothing from them was applied."""


def bundle_size(record_count: int) -> int:
    """Serialized size in bytes: 33-byte envelope plus 46 per record."""
    if record_count < 0:
        raise ValueError("record_count must be non-negative")
    return HEADER_BYTES + CHECKSUM_BYTES + RECORD_BYTES * record_count


@dataclass(frozen=True)
class KeyRecord:
    """One licensed key: cell, validity window, 32-byte key."""

    geocode: geocell.Geocode
    start_day: int
    end_day: int
    key: bytes = field(repr=False)

    def __post_init__(self) -> None:
        geocell.validate_geocode(self.geocode)
        # reuse the interval validation: range, order, 60-day cap
        TimeInterval(self.start_day, self.end_day)
        if len(self.key) != KEY_BYTES:
            raise ValueError(f"record key must be {KEY_BYTES} bytes")

    def to_geokey(self) -> GeoKey:
        return GeoKey(self.key, self.geocode,
                      TimeInterval(self.start_day, self.end_day))


def encode_record(rec: KeyRecord) -> bytes:
    return _RECORD.pack(rec.geocode.encode("ascii"), rec.start_day,
                        rec.end_day, rec.key)


def decode_record(data: bytes) -> KeyRecord:
    if len(data) != RECORD_BYTES:
        raise BundleFormatError(f"record must be {RECORD_BYTES} bytes")
    raw_code, start, end, key = _RECORD.unpack(data)
    try:
        return KeyRecord(raw_code.decode("ascii"), start, end, key)
    except (UnicodeDecodeError, ValueError) as e:
        raise BundleFormatError(f"invalid record: {e}") from e


def encode_bundle(licensee_id: bytes,
                  records: Sequence[KeyRecord]) -> bytes:
    """Serialize records in canonical (geocode, start_day) order."""
    if len(licensee_id) != LICENSEE_ID_BYTES:
        raise ValueError(f"licensee id must be {LICENSEE_ID_BYTES} bytes")
    ordered = sorted(records, key=lambda r: (r.geocode, r.start_day))
    body = bytearray()
    body += BUNDLE_MAGIC
    body.append(BUNDLE_VERSION)
    body += licensee_id
    body += _COUNT.pack(len(ordered))
    for rec in ordered:
        body += encode_record(rec)
    body += struct.pack(">I", zlib.crc32(bytes(body)))
    return bytes(body)


def decode_bundle(data: bytes) -> tuple[bytes, list[KeyRecord]]:
    """Parse and fully validate a bundle; returns (licensee_id, records)."""
    if len(data) < HEADER_BYTES + CHECKSUM_BYTES:
        raise BundleFormatError("bundle truncated")
    if data[:4] != BUNDLE_MAGIC:
        raise BundleFormatError("bad magic")
    if data[4] != BUNDLE_VERSION:
        raise BundleFormatError(f"unsupported bundle version {data[4]}")
    licensee_id = data[5:5 + LICENSEE_ID_BYTES]
    (count,) = _COUNT.unpack_from(data, 5 + LICENSEE_ID_BYTES)
    expected = bundle_size(count) if count < 2 ** 40 else -1
    if expected != len(data):
        raise BundleFormatError(
            f"length {len(data)} does not match record count {count}")
    (crc,) = struct.unpack_from(">I", data, len(data) - CHECKSUM_BYTES)
    if zlib.crc32(data[:-CHECKSUM_BYTES]) != crc:
        raise BundleFormatError("checksum mismatch")
    records = []
    off = HEADER_BYTES
    for i in range(count):
        try:
            records.append(decode_record(data[off:off + RECORD_BYTES]))
        except BundleFormatError as e:
            raise BundleFormatError(f"record {i}: {e}") from e
        off += RECORD_BYTES
    return licensee_id, records


class Keystore:
    """In-memory key index with optional atomic file persistence.

    Mutations build a fresh index and swap it in under a lock; lookups read
    whatever snapshot is current, so a failed import can never leave the
    store half-updated.  With a `path`, every successful mutation rewrites
    the file via rename, and construction reloads it.
    """

    def __init__(self, path: str | Path | None = None,
                 device_id: bytes = bytes(LICENSEE_ID_BYTES)) -> None:
        if len(device_id) != LICENSEE_ID_BYTES:
            raise ValueError(f"device id must be {LICENSEE_ID_BYTES} bytes")
        self.path = Path(path) if path is not None else None
        self.device_id = device_id
        self._lock = threading.Lock()
        self._cells: dict[str, tuple[KeyRecord, ...]] = {}
        if self.path is not None and self.path.exists():
            licensee, records = decode_bundle(self.path.read_bytes())
            self.device_id = licensee
            self._cells = self._merge({}, records)

    @staticmethod
    def _merge(cells: dict[str, tuple[KeyRecord, ...]],
               records: Sequence[KeyRecord]) -> dict:
        new = dict(cells)
        for rec in records:
            existing = [r for r in new.get(rec.geocode, ())
                        if (r.start_day, r.end_day) != (rec.start_day,
                                                        rec.end_day)]
            existing.append(rec)
            existing.sort(key=lambda r: r.start_day)
            new[rec.geocode] = tuple(existing)
        return new

    def _persist(self) -> None:
        if self.path is None:
            return
        data = encode_bundle(self.device_id, self.records())
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, self.path)

    def import_bundle(self, data: bytes) -> int:
        """Decode, validate, and merge a bundle; all-or-nothing.

        A record matching an existing (cell, window) replaces it, so a
        re-issued license refreshes keys in place.  Returns the number of
        records merged.
        """
        _, records = decode_bundle(data)
        with self._lock:
            self._cells = self._merge(self._cells, records)
            self._persist()
        return len(records)

    def export_bundle(self, licensee_id: bytes | None = None) -> bytes:
        return encode_bundle(
            licensee_id if licensee_id is not None else self.device_id,
            self.records())

    def lookup(self, geocode: geocell.Geocode, day: int) -> GeoKey | None:
        """Key for `geocode` valid on `day`, or None.

        If overlapping windows both contain the day, the latest-starting
        (freshest) record wins.
        """
        geocell.validate_geocode(geocode)
        if day < 0:
            raise ValueError("day must be non-negative")
        best = None
        for rec in self._cells.get(geocode, ()):
            if rec.start_day <= day < rec.end_day:
                best = rec
        return best.to_geokey() if best is not None else None

    def prune_expired(self, now_day: int) -> int:
        """Drop every record whose window ended on or before `now_day`."""
        with self._lock:
            new = {}
            dropped = 0
            for code, recs in self._cells.items():
                keep = tuple(r for r in recs if r.end_day > now_day)
                dropped += len(recs) - len(keep)
                if keep:
                    new[code] = keep
            self._cells = new
            self._persist()
        return dropped

    def records(self) -> list[KeyRecord]:
        out = [r for recs in self._cells.values() for r in recs]
        out.sort(key=lambda r: (r.geocode, r.start_day))
        return out

    def __len__(self) -> int:
        return sum(len(v) for v in self._cells.values())

    def size_bytes(self) -> int:
        """Serialized size of the current contents as one bundle."""
        return bundle_size(len(self))
