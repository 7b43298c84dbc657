"""Per-cell, per-epoch key derivation under the master key.

A cell key is the CBC encryption, under the full 255-byte master key, of a
fixed-layout plaintext naming the cell and its validity window.  Derivation
is deterministic: authority and device compute identical keys from the same
inputs, so keys never need to be agreed interactively.  Validity windows are
capped at 60 days and long spans are cut into 60-day epochs, which bounds
the damage window of any single compromised cell key.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import cipher, geocell
from .custody import MasterKey

EPOCH_DAYS = 60
KEY_BITS_DEFAULT = 256
TUB_KEY_BYTES = 32
PLAINTEXT_VERSION = 0x01

_DAY_MAX = 0xFFFFFFFF


@dataclass(frozen=True)
class TimeInterval:
    """Half-open validity window [start_day, end_day), in whole days since
    the deployment epoch.  At most 60 days long."""

    start_day: int
    end_day: int

    def __post_init__(self) -> None:
        if not 0 <= self.start_day <= _DAY_MAX:
            raise ValueError(f"start_day out of range: {self.start_day}")
        if not 0 <= self.end_day <= _DAY_MAX:
            raise ValueError(f"end_day out of range: {self.end_day}")
        if self.end_day <= self.start_day:
            raise ValueError("end_day must be after start_day")
        if self.end_day - self.start_day > EPOCH_DAYS:
            raise ValueError(
                f"interval longer than one epoch ({EPOCH_DAYS} days)")

    def contains(self, day: int) -> bool:
        return self.start_day <= day < self.end_day


def epochs_for(start_day: int, end_day: int) -> list[TimeInterval]:
    """Cut [start_day, end_day) into 60-day epochs aligned to its start;
    the final epoch may be shorter."""
    if end_day <= start_day:
        raise ValueError("end_day must be after start_day")
    if not 0 <= start_day <= _DAY_MAX or not 0 <= end_day <= _DAY_MAX:
        raise ValueError("days out of range")
    out = []
    day = start_day
    while day < end_day:
        nxt = min(day + EPOCH_DAYS, end_day)
        out.append(TimeInterval(day, nxt))
        day = nxt
    return out


@dataclass(frozen=True)
class GeoKey:
    """A derived cell key bound to its cell and validity window."""

    key: bytes = field(repr=False)
    geocode: geocell.Geocode
    interval: TimeInterval

    def __post_init__(self) -> None:
        if not self.key or len(self.key) % 8:
            raise ValueError("key length must be a positive multiple of 8")
        geocell.validate_geocode(self.geocode)

    @property
    def tub_key(self) -> bytes:
        """First 256 bits, for hardware that takes a fixed 32-byte key."""
        if len(self.key) < TUB_KEY_BYTES:
            raise ValueError("derived key shorter than 32 bytes")
        return self.key[:TUB_KEY_BYTES]


def key_plaintext(geocode: geocell.Geocode, interval: TimeInterval,
                  key_bits: int = KEY_BITS_DEFAULT) -> bytes:
    """Derivation plaintext: version byte, 6 geocode characters, start and
    end day as big-endian u32, zero-padded to the key length."""
    geocell.validate_geocode(geocode)
    _check_key_bits(key_bits)
    head = (bytes([PLAINTEXT_VERSION]) + geocode.encode("ascii")
            + interval.start_day.to_bytes(4, "big")
            + interval.end_day.to_bytes(4, "big"))
    return head + bytes(key_bits // 8 - len(head))


def _check_key_bits(key_bits: int) -> None:
    if key_bits % 64 or not 128 <= key_bits <= 2048:
        raise ValueError(
            "key_bits must be a multiple of 64 in [128, 2048]")


class KeyDeriver:
    """Holds the expanded master-key schedule and derives cell keys.

    Expanding once and deriving many is the intended shape; the authority
    and bulk tooling all route through here or match it bit-for-bit.
    """

    def __init__(self, master: MasterKey | bytes,
                 rounds: int = cipher.DEFAULT_ROUNDS,
                 key_bits: int = KEY_BITS_DEFAULT) -> None:
        key = master.key if isinstance(master, MasterKey) else bytes(master)
        if len(key) != 255:
            raise ValueError("master key must be 255 bytes")
        _check_key_bits(key_bits)
        self.rounds = rounds
        self.key_bits = key_bits
        self._rk = cipher.key_schedule(
            key, cipher.Rc5Params(rounds=rounds, key_len=len(key)))

    def derive(self, geocode: geocell.Geocode,
               interval: TimeInterval) -> GeoKey:
        pt = key_plaintext(geocode, interval, self.key_bits)
        return GeoKey(cipher.cbc_encrypt(pt, self._rk), geocode, interval)

    def derive_epochs(self, geocode: geocell.Geocode, start_day: int,
                      end_day: int) -> list[GeoKey]:
        return [self.derive(geocode, iv)
                for iv in epochs_for(start_day, end_day)]


def derive_geokey(master: MasterKey | bytes, geocode: geocell.Geocode,
                  interval: TimeInterval,
                  rounds: int = cipher.DEFAULT_ROUNDS,
                  key_bits: int = KEY_BITS_DEFAULT) -> GeoKey:
    """One-shot convenience wrapper around KeyDeriver."""
    return KeyDeriver(master, rounds=rounds, key_bits=key_bits).derive(
        geocode, interval)
