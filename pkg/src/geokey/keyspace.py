"""Vectorized bulk derivation, sized for the full 25.9M-cell keyspace.

The scalar path in `kdf` derives one key at a time; deriving every cell for
an epoch that way is hours of Python.  This module runs the identical
cipher across millions of cells at once in numpy (uint32 lanes, wrapping
arithmetic) and streams the result straight into the standard bundle
format.  The scalar path stays the reference: tests cross-check sampled
cells bit-for-bit against it.
"""

from __future__ import annotations

import time
import zlib
from pathlib import Path

import numpy as np

from . import cipher, geocell
from .custody import MasterKey
from .kdf import KEY_BITS_DEFAULT, TimeInterval, key_plaintext
from .keystore import (BUNDLE_MAGIC, BUNDLE_VERSION, LICENSEE_ID_BYTES,
                       bundle_size)

_ALPHA = np.frombuffer(geocell.ALPHABET.encode("ascii"), dtype=np.uint8)
_U32 = np.uint32
_31 = _U32(31)
_32 = _U32(32)

DEFAULT_CHUNK = 500_000


def codes_for_range(start: int, stop: int) -> np.ndarray:
    """Geocode ASCII bytes, shape (stop-start, 6), for enumeration indexes
    [start, stop).  Index order matches geocell.enumerate_all."""
    if not 0 <= start <= stop <= geocell.CELL_COUNT:
        raise ValueError("index range out of bounds")
    idx = np.arange(start, stop, dtype=np.int64)
    out = np.empty((len(idx), 6), dtype=np.uint8)
    r, o3 = np.divmod(idx, 20)
    r, a3 = np.divmod(r, 20)
    r, o2 = np.divmod(r, 20)
    r, a2 = np.divmod(r, 20)
    a1, o1 = np.divmod(r, 18)
    for col, digits in enumerate((a1, o1, a2, o2, a3, o3)):
        out[:, col] = _ALPHA[digits]
    return out


def _rotl(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return (x << s) | (x >> ((_32 - s) & _31))


class BulkDeriver:
    """Expands the master key once, then derives cell keys in batches.

    Fixed to 256-bit derived keys (the bundle record size); the round count
    matches the scalar deriver it mirrors.
    """

    def __init__(self, master: MasterKey | bytes,
                 rounds: int = cipher.DEFAULT_ROUNDS) -> None:
        key = master.key if isinstance(master, MasterKey) else bytes(master)
        if len(key) != 255:
            raise ValueError("master key must be 255 bytes")
        self.rounds = rounds
        rk = cipher.key_schedule(
            key, cipher.Rc5Params(rounds=rounds, key_len=len(key)))
        self._S = np.array(rk.words, dtype=_U32)

    def _encrypt(self, A: np.ndarray, B: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
        S = self._S
        A = A + S[0]
        B = B + S[1]
        for i in range(1, self.rounds + 1):
            A = _rotl(A ^ B, B & _31) + S[2 * i]
            B = _rotl(B ^ A, A & _31) + S[2 * i + 1]
        return A, B

    def derive_ascii(self, codes_ascii: np.ndarray,
                     interval: TimeInterval) -> np.ndarray:
        """Derive 32-byte keys for geocodes given as (n, 6) ASCII bytes;
        returns (n, 32) uint8."""
        n = len(codes_ascii)
        pt = np.zeros((n, 32), dtype=np.uint8)
        pt[:, 0] = 0x01
        pt[:, 1:7] = codes_ascii
        pt[:, 7:11] = np.frombuffer(
            interval.start_day.to_bytes(4, "big"), dtype=np.uint8)
        pt[:, 11:15] = np.frombuffer(
            interval.end_day.to_bytes(4, "big"), dtype=np.uint8)
        words = pt.view("<u4").reshape(n, 8)
        out = np.empty((n, 8), dtype="<u4")
        prev_a = np.zeros(n, dtype=_U32)
        prev_b = np.zeros(n, dtype=_U32)
        for blk in range(4):
            a = words[:, 2 * blk].astype(_U32) ^ prev_a
            b = words[:, 2 * blk + 1].astype(_U32) ^ prev_b
            prev_a, prev_b = self._encrypt(a, b)
            out[:, 2 * blk] = prev_a
            out[:, 2 * blk + 1] = prev_b
        return out.view(np.uint8).reshape(n, 32)

    def derive_codes(self, codes: list[str],
                     interval: TimeInterval) -> np.ndarray:
        for c in codes:
            geocell.validate_geocode(c)
        ascii_arr = np.frombuffer(
            "".join(codes).encode("ascii"), dtype=np.uint8
        ).reshape(len(codes), 6)
        return self.derive_ascii(ascii_arr, interval)

    def derive_range(self, start: int, stop: int, interval: TimeInterval
                     ) -> tuple[np.ndarray, np.ndarray]:
        codes = codes_for_range(start, stop)
        return codes, self.derive_ascii(codes, interval)


def write_keyspace_bundle(master: MasterKey | bytes,
                          interval: TimeInterval,
                          out_path: str | Path,
                          licensee_id: bytes = bytes(LICENSEE_ID_BYTES),
                          cells: int = geocell.CELL_COUNT,
                          chunk: int = DEFAULT_CHUNK,
                          rounds: int = cipher.DEFAULT_ROUNDS) -> dict:
    """Stream a bundle holding the first `cells` cells of the keyspace for
    one epoch.  With the default count that is every cell on the globe.

    Returns timing stats.  The output is a standard bundle: any keystore
    can import it (given the memory), and its exact size is bundle_size().
    """
    if not 0 < cells <= geocell.CELL_COUNT:
        raise ValueError("cells out of range")
    if len(licensee_id) != LICENSEE_ID_BYTES:
        raise ValueError("licensee id must be 16 bytes")
    deriver = BulkDeriver(master, rounds=rounds)
    start_be = np.frombuffer(interval.start_day.to_bytes(4, "big"),
                             dtype=np.uint8)
    end_be = np.frombuffer(interval.end_day.to_bytes(4, "big"),
                           dtype=np.uint8)
    header = (BUNDLE_MAGIC + bytes([BUNDLE_VERSION]) + licensee_id
              + cells.to_bytes(8, "big"))
    t0 = time.monotonic()
    crc = zlib.crc32(header)
    out_path = Path(out_path)
    with open(out_path, "wb") as f:
        f.write(header)
        for lo in range(0, cells, chunk):
            hi = min(lo + chunk, cells)
            codes, keys = deriver.derive_range(lo, hi, interval)
            records = np.empty((hi - lo, 46), dtype=np.uint8)
            records[:, 0:6] = codes
            records[:, 6:10] = start_be
            records[:, 10:14] = end_be
            records[:, 14:46] = keys
            blob = records.tobytes()
            crc = zlib.crc32(blob, crc)
            f.write(blob)
        f.write(crc.to_bytes(4, "big"))
    elapsed = time.monotonic() - t0
    size = out_path.stat().st_size
    assert size == bundle_size(cells)
    return {
        "cells": cells,
        "bytes": size,
        "seconds": elapsed,
        "cells_per_s": cells / elapsed if elapsed > 0 else float("inf"),
    }


def scalar_reference_key(master: MasterKey | bytes, code: str,
                         interval: TimeInterval,
                         rounds: int = cipher.DEFAULT_ROUNDS) -> bytes:
    """One cell key via the scalar cipher path, for cross-checking."""
    key = master.key if isinstance(master, MasterKey) else bytes(master)
    rk = cipher.key_schedule(
        key, cipher.Rc5Params(rounds=rounds, key_len=len(key)))
    return cipher.cbc_encrypt(
        key_plaintext(code, interval, KEY_BITS_DEFAULT), rk)
