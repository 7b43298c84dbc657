"""RC5-32 with variable rounds and long keys, plus deterministic CBC and a
truncated CBC-MAC.

The derivation scheme leans on two properties of this cipher: the key can be
as long as 255 bytes (the full master key goes in as-is, no hashing step),
and the round count is tunable (20 here, up against the published 12, for
margin).  Encryption is little-endian 32-bit words per the original design.

CBC here is intentionally IV-free (all-zero IV): the point is deterministic
key derivation, not confidentiality of transported data, so identical inputs
must produce identical outputs.  Do not reuse this mode for messaging.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

P32 = 0xB7E15163
Q32 = 0x9E3779B9
BLOCK_BYTES = 8
MAX_KEY_BYTES = 255
DEFAULT_ROUNDS = 20
MIN_MAC_BITS = 16
MAX_MAC_BITS = 64

_MASK = 0xFFFFFFFF


@dataclass(frozen=True)
class Rc5Params:
    """Cipher parameters: round count and expected key length in bytes."""

    rounds: int = DEFAULT_ROUNDS
    key_len: int = MAX_KEY_BYTES

    def __post_init__(self) -> None:
        if not 1 <= self.rounds <= 255:
            raise ValueError(f"rounds out of range: {self.rounds}")
        if not 1 <= self.key_len <= MAX_KEY_BYTES:
            raise ValueError(f"key_len out of range: {self.key_len}")


@dataclass(frozen=True)
class RoundKeys:
    """Expanded key schedule: 2*(rounds+1) words."""

    words: tuple[int, ...]
    rounds: int


def key_schedule(key: bytes, params: Rc5Params | None = None) -> RoundKeys:
    """Expand `key` into the round-key table.

    With no explicit params the key length is taken from the key itself and
    the round count defaults to 20.
    """
    if params is None:
        params = Rc5Params(key_len=len(key))
    if len(key) != params.key_len:
        raise ValueError(
            f"key is {len(key)} bytes, params say {params.key_len}")
    c = (params.key_len + 3) // 4
    L = list(struct.unpack(f"<{c}I", key.ljust(4 * c, b"\x00")))
    t = 2 * (params.rounds + 1)
    S = [(P32 + i * Q32) & _MASK for i in range(t)]
    A = B = i = j = 0
    for _ in range(3 * max(t, c)):
        A = S[i] = _rotl((S[i] + A + B) & _MASK, 3)
        B = L[j] = _rotl((L[j] + A + B) & _MASK, (A + B) & 31)
        i = (i + 1) % t
        j = (j + 1) % c
    return RoundKeys(tuple(S), params.rounds)


def _rotl(x: int, s: int) -> int:
    # s in [0, 31]; x < 2**32, so x >> 32 is 0 and s == 0 needs no branch
    return ((x << s) | (x >> (32 - s))) & _MASK


def encrypt_block(block: bytes, rk: RoundKeys) -> bytes:
    if len(block) != BLOCK_BYTES:
        raise ValueError("block must be 8 bytes")
    S = rk.words
    A, B = struct.unpack("<II", block)
    A = (A + S[0]) & _MASK
    B = (B + S[1]) & _MASK
    for i in range(1, rk.rounds + 1):
        x = A ^ B
        s = B & 31
        A = (((x << s) | (x >> (32 - s))) + S[2 * i]) & _MASK
        x = B ^ A
        s = A & 31
        B = (((x << s) | (x >> (32 - s))) + S[2 * i + 1]) & _MASK
    return struct.pack("<II", A, B)


def decrypt_block(block: bytes, rk: RoundKeys) -> bytes:
    if len(block) != BLOCK_BYTES:
        raise ValueError("block must be 8 bytes")
    S = rk.words
    A, B = struct.unpack("<II", block)
    for i in range(rk.rounds, 0, -1):
        x = (B - S[2 * i + 1]) & _MASK
        s = A & 31
        B = ((x >> s) | (x << (32 - s))) & _MASK ^ A
        x = (A - S[2 * i]) & _MASK
        s = B & 31
        A = ((x >> s) | (x << (32 - s))) & _MASK ^ B
    B = (B - S[1]) & _MASK
    A = (A - S[0]) & _MASK
    return struct.pack("<II", A, B)


# ---- deterministic CBC and MAC ----


def cbc_encrypt(plaintext: bytes, rk: RoundKeys) -> bytes:
    """CBC with an all-zero IV; input must be a whole number of blocks."""
    if not plaintext or len(plaintext) % BLOCK_BYTES:
        raise ValueError("plaintext must be a positive multiple of 8 bytes")
    out = bytearray()
    prev = bytes(BLOCK_BYTES)
    for off in range(0, len(plaintext), BLOCK_BYTES):
        block = bytes(a ^ b
                      for a, b in zip(plaintext[off:off + BLOCK_BYTES], prev))
        prev = encrypt_block(block, rk)
        out += prev
    return bytes(out)


def cbc_decrypt(ciphertext: bytes, rk: RoundKeys) -> bytes:
    if not ciphertext or len(ciphertext) % BLOCK_BYTES:
        raise ValueError("ciphertext must be a positive multiple of 8 bytes")
    out = bytearray()
    prev = bytes(BLOCK_BYTES)
    for off in range(0, len(ciphertext), BLOCK_BYTES):
        block = ciphertext[off:off + BLOCK_BYTES]
        out += bytes(a ^ b for a, b in zip(decrypt_block(block, rk), prev))
        prev = block
    return bytes(out)


def cbc_mac(message: bytes, rk: RoundKeys,
            mac_bits: int = MAX_MAC_BITS) -> int:
    """Truncated CBC-MAC over `message`.

    Padding (0x80 then zeros to a block boundary) is always appended, even
    to block-aligned input.  The tag is the leading `mac_bits` bits of the
    final CBC block, returned as an int; a shorter tag is a bit-prefix of a
    longer one under the same key.

    Messages here are fixed-format packets, never attacker-extensible, which
    is what makes plain CBC-MAC sound for this use.
    """
    if not message:
        raise ValueError("empty message")
    if not MIN_MAC_BITS <= mac_bits <= MAX_MAC_BITS:
        raise ValueError(f"mac_bits must be in [{MIN_MAC_BITS}, {MAX_MAC_BITS}]")
    padded = message + b"\x80" + b"\x00" * ((-(len(message) + 1)) % BLOCK_BYTES)
    last = cbc_encrypt(padded, rk)[-BLOCK_BYTES:]
    return int.from_bytes(last, "big") >> (64 - mac_bits)
