import random

import pytest

import oracle_rc5
from geokey import kdf
from geokey.custody import MasterKey
from geokey.kdf import KeyDeriver, TimeInterval

ZERO_MASTER = bytes(255)
PATTERNED_MASTER = bytes((7 * i + 3) % 256 for i in range(255))

# Generated with oracle_rc5.py (straight-line implementation, verified
# against the published cipher vectors first).
GOLDEN = {
    (ZERO_MASTER, "222222", 0, 60):
        "00cccf4b5a7069cda300e4d957bc9e1a"
        "844a5bba3183918609cb023458d7bfb1",
    (ZERO_MASTER, "6FG222", 100, 160):
        "da1f0557dae483db9071e78dbddc8687"
        "6a67fbd4708e8b68f2d5d7914200305f",
    (PATTERNED_MASTER, "222222", 0, 60):
        "38fc058d08d94b0e78e02a7dc5a8fa44"
        "443f374d8ad818431451fb641e71569b",
}


class TestTimeInterval:
    def test_half_open_contains(self):
        iv = TimeInterval(10, 70)
        assert iv.contains(10)
        assert iv.contains(69)
        assert not iv.contains(70)
        assert not iv.contains(9)

    def test_validation(self):
        with pytest.raises(ValueError):
            TimeInterval(5, 5)
        with pytest.raises(ValueError):
            TimeInterval(10, 5)
        with pytest.raises(ValueError):
            TimeInterval(-1, 5)
        with pytest.raises(ValueError):
            TimeInterval(0, 61)  # longer than one epoch
        with pytest.raises(ValueError):
            TimeInterval(0, 2 ** 32)
        TimeInterval(2 ** 32 - 61, 2 ** 32 - 1)


class TestEpochs:
    def test_span_cut_into_epochs(self):
        assert kdf.epochs_for(0, 150) == [
            TimeInterval(0, 60), TimeInterval(60, 120),
            TimeInterval(120, 150)]

    def test_aligned_to_span_start(self):
        assert kdf.epochs_for(10, 70) == [TimeInterval(10, 70)]
        assert kdf.epochs_for(10, 130) == [TimeInterval(10, 70),
                                           TimeInterval(70, 130)]

    def test_single_partial(self):
        assert kdf.epochs_for(100, 101) == [TimeInterval(100, 101)]

    def test_validation(self):
        with pytest.raises(ValueError):
            kdf.epochs_for(10, 10)
        with pytest.raises(ValueError):
            kdf.epochs_for(-1, 10)


class TestPlaintextLayout:
    def test_exact_bytes(self):
        pt = kdf.key_plaintext("222222", TimeInterval(0, 60))
        assert pt == (b"\x01" + b"222222" + bytes(3) + b"\x00"
                      + bytes(3) + b"\x3c" + bytes(17))
        assert len(pt) == 32

    def test_day_encoding_big_endian(self):
        pt = kdf.key_plaintext("6FG222", TimeInterval(0x01020304,
                                                      0x01020310))
        assert pt[7:11] == b"\x01\x02\x03\x04"
        assert pt[11:15] == b"\x01\x02\x03\x10"

    def test_key_bits_steps(self):
        assert len(kdf.key_plaintext("222222", TimeInterval(0, 60),
                                     key_bits=128)) == 16
        assert len(kdf.key_plaintext("222222", TimeInterval(0, 60),
                                     key_bits=512)) == 64
        for bad in (0, 100, 96, 2112):
            with pytest.raises(ValueError):
                kdf.key_plaintext("222222", TimeInterval(0, 60),
                                  key_bits=bad)

    def test_geocode_validated(self):
        with pytest.raises(ValueError):
            kdf.key_plaintext("AAAAAA", TimeInterval(0, 60))


class TestDerivation:
    def test_golden_vectors(self):
        for (master, code, start, end), want in GOLDEN.items():
            gk = KeyDeriver(master).derive(code, TimeInterval(start, end))
            assert gk.key.hex() == want

    def test_matches_oracle(self):
        rng = random.Random(77)
        master = bytes(rng.randrange(256) for _ in range(255))
        iv = TimeInterval(300, 360)
        pt = kdf.key_plaintext("84VV4P", iv)
        want = oracle_rc5.cbc_encrypt(pt, master, 20)
        assert KeyDeriver(master).derive("84VV4P", iv).key == want

    def test_deterministic_across_instances(self):
        iv = TimeInterval(0, 60)
        a = KeyDeriver(ZERO_MASTER).derive("6FG222", iv)
        b = KeyDeriver(ZERO_MASTER).derive("6FG222", iv)
        assert a.key == b.key

    def test_distinct_inputs_distinct_keys(self):
        deriver = KeyDeriver(ZERO_MASTER)
        keys = set()
        codes = ["222222", "6FG222", "6FG223", "CVXXXX", "84VV4P"]
        for code in codes:
            for start in range(0, 600, 60):
                keys.add(deriver.derive(
                    code, TimeInterval(start, start + 60)).key)
        assert len(keys) == len(codes) * 10

    def test_master_key_sensitivity(self):
        iv = TimeInterval(0, 60)
        tweaked = b"\x01" + ZERO_MASTER[1:]
        assert KeyDeriver(ZERO_MASTER).derive("222222", iv).key != \
            KeyDeriver(tweaked).derive("222222", iv).key

    def test_accepts_master_key_object(self):
        mk = MasterKey(ZERO_MASTER, bytes(16))
        gk = KeyDeriver(mk).derive("222222", TimeInterval(0, 60))
        assert gk.key.hex() == GOLDEN[(ZERO_MASTER, "222222", 0, 60)]

    def test_derive_epochs(self):
        deriver = KeyDeriver(ZERO_MASTER)
        got = deriver.derive_epochs("222222", 0, 150)
        assert [g.interval for g in got] == kdf.epochs_for(0, 150)
        assert got[0].key.hex() == GOLDEN[(ZERO_MASTER, "222222", 0, 60)]

    def test_one_shot_helper(self):
        gk = kdf.derive_geokey(ZERO_MASTER, "222222", TimeInterval(0, 60))
        assert gk.key.hex() == GOLDEN[(ZERO_MASTER, "222222", 0, 60)]

    def test_master_key_length_enforced(self):
        with pytest.raises(ValueError):
            KeyDeriver(bytes(254))
        with pytest.raises(ValueError):
            KeyDeriver(bytes(256))


class TestTubKey:
    def test_first_256_bits(self):
        gk = KeyDeriver(ZERO_MASTER).derive("222222", TimeInterval(0, 60))
        assert gk.tub_key == gk.key[:32]
        assert len(gk.tub_key) == 32

    def test_longer_derived_key_shares_prefix(self):
        # padding past the header is zeros, so the first four blocks of a
        # longer derivation chain identically
        iv = TimeInterval(0, 60)
        short = KeyDeriver(ZERO_MASTER, key_bits=256).derive("222222", iv)
        long = KeyDeriver(ZERO_MASTER, key_bits=512).derive("222222", iv)
        assert len(long.key) == 64
        assert long.key[:32] == short.key
        assert long.tub_key == short.tub_key

    def test_too_short_for_tub(self):
        gk = KeyDeriver(ZERO_MASTER, key_bits=128).derive(
            "222222", TimeInterval(0, 60))
        with pytest.raises(ValueError):
            gk.tub_key

    def test_repr_hides_key(self):
        gk = KeyDeriver(ZERO_MASTER).derive("222222", TimeInterval(0, 60))
        assert gk.key.hex() not in repr(gk)
        assert "222222" in repr(gk)
