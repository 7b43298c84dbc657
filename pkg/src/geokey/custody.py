"""Master-key ceremony and (k, n) threshold custody.

The 255-byte master key is assembled from 11 independent 23-byte
contributions (plus a 2-byte version/pad tail) and immediately split into
11 shares with threshold 6, byte-wise over GF(2^8).  Any 6 shareholders can
reconstruct; 5 or fewer learn nothing, in the information-theoretic sense.
Shares travel as small self-checking binary files.
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

CONTRIBUTION_BYTES = 23
PARTICIPANTS = 11
THRESHOLD = 6
MASTER_KEY_BYTES = 255
CEREMONY_ID_BYTES = 16

# version byte then zero pad, bringing 11 * 23 contributed bytes to 255
_KEY_TAIL = b"\x01\x00"

SHARE_MAGIC = b"GKSH"
SHARE_VERSION = 1
SHARE_FILE_BYTES = 4 + 1 + CEREMONY_ID_BYTES + 1 + MASTER_KEY_BYTES + 4


class ThresholdError(Exception):
    """Too few shares to reconstruct."""


class ShareIntegrityError(Exception):
    """Shares are mutually inconsistent or from different ceremonies."""


class ShareFormatError(Exception):
    """Share file is malformed."""


# ---- GF(2^8), reduction polynomial 0x11B ----

_EXP = [0] * 510
_LOG = [0] * 256


def _build_tables() -> None:
    x = 1
    for i in range(255):
        _EXP[i] = x
        _EXP[i + 255] = x
        _LOG[x] = i
        # multiply by the generator 0x03
        x ^= ((x << 1) ^ (0x1B if x & 0x80 else 0)) & 0xFF


_build_tables()


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return _EXP[_LOG[a] + _LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(2^8)")
    return _EXP[255 - _LOG[a]]


def _poly_eval(coeffs: Sequence[int], x: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = gf_mul(acc, x) ^ c
    return acc


def _lagrange_at(points: Sequence[tuple[int, int]], x0: int) -> int:
    total = 0
    for i, (xi, yi) in enumerate(points):
        if xi == x0:
            return yi
        num = 1
        den = 1
        for j, (xj, _) in enumerate(points):
            if j != i:
                num = gf_mul(num, x0 ^ xj)
                den = gf_mul(den, xi ^ xj)
        total ^= gf_mul(gf_mul(yi, num), gf_inv(den))
    return total


# ---- ceremony ----


@dataclass(frozen=True)
class Contribution:
    """One participant's key material and their own entropy declaration."""

    participant_id: int
    material: bytes = field(repr=False)
    declared_entropy_bits: int

    def __post_init__(self) -> None:
        if not 1 <= self.participant_id <= 255:
            raise ValueError("participant_id must be in [1, 255]")
        if len(self.material) != CONTRIBUTION_BYTES:
            raise ValueError(
                f"contribution must be {CONTRIBUTION_BYTES} bytes")
        if self.declared_entropy_bits < 0:
            raise ValueError("declared entropy must be non-negative")


@dataclass(frozen=True)
class MasterKey:
    """The assembled 255-byte master key.

    repr never shows key bytes; anything printing a MasterKey gets the
    ceremony id only.
    """

    key: bytes = field(repr=False)
    ceremony_id: bytes
    declared_entropy_bits: int | None = None

    def __post_init__(self) -> None:
        if len(self.key) != MASTER_KEY_BYTES:
            raise ValueError(f"master key must be {MASTER_KEY_BYTES} bytes")
        if len(self.ceremony_id) != CEREMONY_ID_BYTES:
            raise ValueError(f"ceremony id must be {CEREMONY_ID_BYTES} bytes")


def assemble_master_key(contributions: Sequence[Contribution],
                        nonce: bytes | None = None) -> MasterKey:
    """Deterministically assemble the master key from all 11 contributions.

    Contributions are concatenated in participant-id order, so the result
    does not depend on submission order.  `nonce`, if given, is folded into
    the ceremony id only, never into key material.
    """
    if len(contributions) != PARTICIPANTS:
        raise ValueError(
            f"need exactly {PARTICIPANTS} contributions, "
            f"got {len(contributions)}")
    ids = [c.participant_id for c in contributions]
    if len(set(ids)) != PARTICIPANTS:
        raise ValueError("duplicate participant ids")
    ordered = sorted(contributions, key=lambda c: c.participant_id)
    key = b"".join(c.material for c in ordered) + _KEY_TAIL
    assert len(key) == MASTER_KEY_BYTES
    h = hashlib.sha256()
    h.update(b"geokey-ceremony-v1")
    h.update(key)
    if nonce:
        h.update(nonce)
    return MasterKey(
        key=key,
        ceremony_id=h.digest()[:CEREMONY_ID_BYTES],
        declared_entropy_bits=sum(c.declared_entropy_bits
                                  for c in ordered),
    )


# ---- threshold sharing ----


@dataclass(frozen=True)
class Share:
    """One custody share: the byte-wise polynomial evaluations at `x`."""

    ceremony_id: bytes
    x: int
    y: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.ceremony_id) != CEREMONY_ID_BYTES:
            raise ValueError(f"ceremony id must be {CEREMONY_ID_BYTES} bytes")
        if not 1 <= self.x <= 255:
            raise ValueError("share x must be in [1, 255]")
        if len(self.y) != MASTER_KEY_BYTES:
            raise ValueError(f"share payload must be {MASTER_KEY_BYTES} bytes")


def split_master_key(master: MasterKey, k: int = THRESHOLD,
                     n: int = PARTICIPANTS,
                     rng_bytes=os.urandom) -> list[Share]:
    """Split into `n` shares, any `k` of which reconstruct.

    For each secret byte an independent random polynomial of degree k-1 is
    drawn with the secret as constant term; share i holds the evaluations
    at x = i.  `rng_bytes` exists for deterministic tests; real ceremonies
    keep the default.
    """
    if not 2 <= k <= n <= 255:
        raise ValueError("need 2 <= k <= n <= 255")
    coeff_rows = [rng_bytes(len(master.key)) for _ in range(k - 1)]
    shares = []
    for x in range(1, n + 1):
        y = bytes(
            _poly_eval([master.key[b]] + [row[b] for row in coeff_rows], x)
            for b in range(len(master.key))
        )
        shares.append(Share(master.ceremony_id, x, y))
    return shares


def combine_shares(shares: Sequence[Share],
                   threshold: int = THRESHOLD) -> MasterKey:
    """Reconstruct the master key from at least `threshold` shares.

    The first `threshold` shares (by x) do the interpolation; any further
    shares are checked against the interpolated polynomial and a mismatch
    fails the whole reconstruction rather than silently picking a winner.
    """
    distinct = {}
    for s in shares:
        if s.x in distinct and distinct[s.x].y != s.y:
            raise ShareIntegrityError(f"conflicting shares for x={s.x}")
        distinct.setdefault(s.x, s)
    if len(distinct) < threshold:
        raise ThresholdError(
            f"have {len(distinct)} distinct shares, need {threshold}")
    ordered = sorted(distinct.values(), key=lambda s: s.x)
    cid = ordered[0].ceremony_id
    for s in ordered[1:]:
        if s.ceremony_id != cid:
            raise ShareIntegrityError("shares are from different ceremonies")
    base, extra = ordered[:threshold], ordered[threshold:]
    key = bytearray(MASTER_KEY_BYTES)
    for b in range(MASTER_KEY_BYTES):
        points = [(s.x, s.y[b]) for s in base]
        key[b] = _lagrange_at(points, 0)
        for s in extra:
            if _lagrange_at(points, s.x) != s.y[b]:
                raise ShareIntegrityError(
                    f"share x={s.x} inconsistent at byte {b}")
    return MasterKey(bytes(key), cid)


# ---- share files ----


def encode_share(share: Share) -> bytes:
    """Share file: magic, version, ceremony id, x, payload, CRC32."""
    body = (SHARE_MAGIC + bytes([SHARE_VERSION]) + share.ceremony_id
            + bytes([share.x]) + share.y)
    return body + struct.pack(">I", zlib.crc32(body))


def decode_share(data: bytes) -> Share:
    if len(data) != SHARE_FILE_BYTES:
        raise ShareFormatError(
            f"share file must be {SHARE_FILE_BYTES} bytes, got {len(data)}")
    if data[:4] != SHARE_MAGIC:
        raise ShareFormatError("bad magic")
    if data[4] != SHARE_VERSION:
        raise ShareFormatError(f"unsupported share version {data[4]}")
    body, crc = data[:-4], struct.unpack(">I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise ShareFormatError("checksum mismatch")
    cid = data[5:5 + CEREMONY_ID_BYTES]
    x = data[5 + CEREMONY_ID_BYTES]
    y = data[6 + CEREMONY_ID_BYTES:6 + CEREMONY_ID_BYTES + MASTER_KEY_BYTES]
    if x == 0:
        raise ShareFormatError("share x may not be 0")
    return Share(cid, x, y)
