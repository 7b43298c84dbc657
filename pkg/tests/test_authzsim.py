import random

import pytest

import oracle_rc5
from geokey import authzsim as az
from geokey import geocell
from geokey.authzsim import (ChallengePacket, PacketFormatError, ReplayCache,
                             ResponsePacket, VerifyResult, load_scenario,
                             make_challenge, respond, response_mac,
                             run_scenario, tick_distance, verify)
from geokey.keystore import KeyRecord, Keystore, encode_bundle

CELL = "6FG222"
KEY = bytes(range(32))
KEY2 = bytes(range(32, 64))


def _store(*records):
    store = Keystore()
    store.import_bundle(encode_bundle(bytes(16), list(records)))
    return store


# ---- packets ----


class TestChallengePacket:
    def test_known_bytes(self):
        assert ChallengePacket(1, 2).to_bytes().hex() == "400000020002"
        assert ChallengePacket(0, 0).to_bytes().hex() == "400000000000"
        top = ChallengePacket((1 << 29) - 1, (1 << 17) - 1)
        assert top.to_bytes().hex() == "7fffffffffff"

    def test_type_bits_are_01(self):
        first = ChallengePacket(0, 0).to_bytes()[0]
        assert first >> 6 == 0b01

    def test_roundtrip(self):
        rng = random.Random(11)
        for _ in range(200):
            pkt = ChallengePacket(rng.getrandbits(29), rng.getrandbits(17))
            data = pkt.to_bytes()
            assert len(data) == 6
            assert ChallengePacket.from_bytes(data) == pkt

    def test_field_ranges(self):
        with pytest.raises(ValueError):
            ChallengePacket(1 << 29, 0)
        with pytest.raises(ValueError):
            ChallengePacket(0, 1 << 17)
        with pytest.raises(ValueError):
            ChallengePacket(-1, 0)

    def test_bad_parse(self):
        with pytest.raises(PacketFormatError):
            ChallengePacket.from_bytes(b"\x00" * 6)  # type bits 00
        with pytest.raises(PacketFormatError):
            ChallengePacket.from_bytes(b"\x40\x00\x00")
        with pytest.raises(PacketFormatError):
            # a response is not a challenge
            ChallengePacket.from_bytes(b"\x80" + b"\x00" * 5)


class TestResponsePacket:
    def test_known_bytes(self):
        assert ResponsePacket(0xDEADBEEF).to_bytes().hex() == "b7ab6fbbc0"
        assert ResponsePacket(0).to_bytes().hex() == "8000000000"
        assert ResponsePacket((1 << 32) - 1).to_bytes().hex() == "bfffffffc0"

    def test_roundtrip(self):
        rng = random.Random(12)
        for _ in range(200):
            pkt = ResponsePacket(rng.getrandbits(32))
            data = pkt.to_bytes()
            assert len(data) == 5
            assert ResponsePacket.from_bytes(data) == pkt

    def test_padding_must_be_zero(self):
        data = bytes.fromhex("b7ab6fbbc1")
        with pytest.raises(PacketFormatError):
            ResponsePacket.from_bytes(data)

    def test_bad_parse(self):
        with pytest.raises(ValueError):
            ResponsePacket(1 << 32)
        with pytest.raises(PacketFormatError):
            ResponsePacket.from_bytes(b"\x80\x00")
        with pytest.raises(PacketFormatError):
            ResponsePacket.from_bytes(b"\x40" + b"\x00" * 4)


class TestClockArithmetic:
    def test_tick_distance(self):
        assert tick_distance(5, 5) == 0
        assert tick_distance(7, 5) == 2
        assert tick_distance(5, 7) == 2
        assert tick_distance(0, az.TIMESTAMP_MOD - 1) == 1
        assert tick_distance(az.TIMESTAMP_MOD - 1, 0) == 1
        assert tick_distance(0, 1 << 28) == 1 << 28

    def test_wrap_outlives_epoch(self):
        # the counter must not wrap within one 60-day key epoch
        assert az.TIMESTAMP_MOD * az.TICK_SECONDS >= 60 * 86400

    def test_make_challenge_wraps_clock(self):
        rng = random.Random(0)
        pkt = make_challenge(az.TIMESTAMP_MOD + 5, rng)
        assert pkt.timestamp_ticks == 5

    def test_make_challenge_deterministic_with_rng(self):
        a = make_challenge(123, random.Random(99))
        b = make_challenge(123, random.Random(99))
        assert a == b


# ---- MAC ----


class TestResponseMac:
    def test_matches_independent_mac(self):
        rng = random.Random(13)
        for _ in range(10):
            ch = ChallengePacket(rng.getrandbits(29), rng.getrandbits(17))
            key = bytes(rng.getrandbits(8) for _ in range(32))
            want = oracle_rc5.cbc_mac(ch.to_bytes() + CELL.encode(),
                                      key, 20, 32)
            assert response_mac(ch, CELL, key) == want

    def test_binds_cell_and_challenge(self):
        ch = ChallengePacket(1000, 7)
        base = response_mac(ch, CELL, KEY)
        assert response_mac(ch, "6FG223", KEY) != base
        assert response_mac(ChallengePacket(1001, 7), CELL, KEY) != base
        assert response_mac(ChallengePacket(1000, 8), CELL, KEY) != base
        assert response_mac(ch, CELL, KEY2) != base

    def test_validation(self):
        ch = ChallengePacket(0, 0)
        with pytest.raises(ValueError):
            response_mac(ch, CELL, b"short")
        with pytest.raises(ValueError):
            response_mac(ch, "bad!!!", KEY)


class TestRespond:
    def test_answers_when_licensed(self):
        store = _store(KeyRecord(CELL, 0, 60, KEY))
        ch = ChallengePacket(500, 3)
        resp = respond(ch, store, CELL, 30)
        assert resp is not None
        assert resp.mac == response_mac(ch, CELL, KEY)

    def test_silent_without_key(self):
        store = _store(KeyRecord(CELL, 0, 60, KEY))
        ch = ChallengePacket(500, 3)
        assert respond(ch, store, "6FG223", 30) is None  # other cell
        assert respond(ch, store, CELL, 60) is None      # window over


# ---- replay cache ----


class TestReplayCache:
    def test_remembers_and_purges(self):
        cache = ReplayCache(horizon_ticks=100)
        cache.add((1, 2, 3), clock_ticks=50)
        assert cache.seen((1, 2, 3))
        assert not cache.seen((1, 2, 4))
        cache.purge(140)   # distance 90, kept
        assert len(cache) == 1
        cache.purge(151)   # distance 101, gone
        assert len(cache) == 0

    def test_purge_is_modular(self):
        cache = ReplayCache(horizon_ticks=100)
        cache.add((1, 1, 1), clock_ticks=az.TIMESTAMP_MOD - 10)
        cache.purge(az.TIMESTAMP_MOD + 20)  # wrapped distance 30
        assert len(cache) == 1

    def test_add_at_capacity_purges_first(self):
        cache = ReplayCache(horizon_ticks=10, max_entries=4)
        for i in range(4):
            cache.add((i, 0, 0), clock_ticks=0)
        cache.add((9, 0, 0), clock_ticks=5000)
        assert cache.seen((9, 0, 0))
        assert not cache.seen((0, 0, 0))


# ---- verify ----


class TestVerify:
    def _accepting(self, clock=1000):
        store = _store(KeyRecord(CELL, 0, 60, KEY))
        ch = ChallengePacket(clock % az.TIMESTAMP_MOD, 9)
        resp = ResponsePacket(response_mac(ch, CELL, KEY))
        return store, ch, resp

    def test_accepts_fresh_valid(self):
        store, ch, resp = self._accepting()
        out = verify(ch, resp, store, CELL, 1000, 30, ReplayCache())
        assert out == VerifyResult(True, None)

    def test_no_key_first(self):
        store = Keystore()
        ch = ChallengePacket(0, 0)  # also hopelessly stale
        out = verify(ch, ResponsePacket(1), store, CELL, 10 ** 6, 30,
                     ReplayCache())
        assert out.reason == "no-key"

    def test_stale_rejected(self):
        store, ch, resp = self._accepting(clock=1000)
        out = verify(ch, resp, store, CELL, 1000 + 1001, 30, ReplayCache())
        assert out.reason == "stale"

    def test_window_edge_inclusive(self):
        store, ch, resp = self._accepting(clock=1000)
        out = verify(ch, resp, store, CELL, 1000 + 1000, 30, ReplayCache())
        assert out.accepted

    def test_freshness_across_wrap(self):
        store = _store(KeyRecord(CELL, 0, 60, KEY))
        ch = ChallengePacket(az.TIMESTAMP_MOD - 500, 9)
        resp = ResponsePacket(response_mac(ch, CELL, KEY))
        out = verify(ch, resp, store, CELL, az.TIMESTAMP_MOD + 3, 30,
                     ReplayCache())
        assert out.accepted  # wrapped distance 503

    def test_stale_beats_replayed(self):
        store, ch, resp = self._accepting(clock=1000)
        cache = ReplayCache()
        cache.add((ch.timestamp_ticks, ch.nonce, resp.mac), 1000)
        out = verify(ch, resp, store, CELL, 1000 + 1001, 30, cache)
        assert out.reason == "stale"

    def test_replay_rejected(self):
        store, ch, resp = self._accepting()
        cache = ReplayCache()
        assert verify(ch, resp, store, CELL, 1000, 30, cache).accepted
        out = verify(ch, resp, store, CELL, 1000, 30, cache)
        assert out.reason == "replayed"

    def test_bad_mac_rejected(self):
        store, ch, resp = self._accepting()
        bad = ResponsePacket(resp.mac ^ 1)
        out = verify(ch, bad, store, CELL, 1000, 30, ReplayCache())
        assert out.reason == "bad-mac"

    def test_rejects_do_not_fill_cache(self):
        store, ch, resp = self._accepting()
        cache = ReplayCache()
        bad = ResponsePacket(resp.mac ^ 1)
        verify(ch, bad, store, CELL, 1000, 30, cache)
        assert len(cache) == 0

    def test_wrong_day_is_no_key(self):
        store, ch, resp = self._accepting()
        out = verify(ch, resp, store, CELL, 1000, 60, ReplayCache())
        assert out.reason == "no-key"


# ---- scenario loading ----


def _minimal(**over):
    raw = {
        "version": 1,
        "seed": 1,
        "duration_s": 60,
        "challenge_interval_s": 30,
        "assets": [
            {"id": "a", "kind": "static", "position": [0.01, 0.01],
             "challenger": True,
             "keys": [{"geocode": CELL, "start_day": 0, "end_day": 60,
                       "key_hex": KEY.hex()}]},
            {"id": "b", "kind": "static", "position": [0.02, 0.02],
             "keys": [{"geocode": CELL, "start_day": 0, "end_day": 60,
                       "key_hex": KEY.hex()}]},
        ],
    }
    raw.update(over)
    return raw


class TestLoadScenario:
    def test_minimal(self):
        spec = load_scenario(_minimal())
        assert spec.seed == 1
        assert spec.loss_prob == 0.0
        assert len(spec.assets) == 2
        assert spec.assets[0].challenger
        assert spec.assets[0].inline_keys[0].key == KEY

    def test_from_file_resolves_keystore(self, tmp_path):
        import json
        store = Keystore(tmp_path / "b.bundle")
        store.import_bundle(encode_bundle(
            bytes(16), [KeyRecord(CELL, 0, 60, KEY)]))
        raw = _minimal()
        raw["assets"][1].pop("keys")
        raw["assets"][1]["keystore"] = "b.bundle"
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(raw))
        spec = load_scenario(path)
        assert spec.assets[1].keystore_path == tmp_path / "b.bundle"
        run_scenario(spec)  # store must actually load

    def test_rejections(self):
        cases = [
            _minimal(version=2),
            {k: v for k, v in _minimal().items() if k != "seed"},
            _minimal(loss_prob=1.5),
            _minimal(duration_s=0),
            _minimal(challenge_interval_s=0),
        ]
        for raw in cases:
            with pytest.raises(ValueError):
                load_scenario(raw)

    def test_asset_rejections(self):
        bad_assets = [
            [{"id": "a", "kind": "hovercraft", "position": [0, 0]}],
            [{"id": "a", "kind": "static", "position": [0, 0],
              "behavior": "evil"}],
            [{"id": "a", "kind": "static"}],  # no position
            [{"id": "a", "kind": "route", "waypoints": [[0, 0]],
              "speed_mps": 1}],
            [{"id": "a", "kind": "route", "waypoints": [[0, 0], [1, 1]]}],
            [{"id": "a", "kind": "escort"}],  # no follow
            [{"id": "a", "kind": "escort", "follow": "ghost"}],
            [{"id": "a", "kind": "static", "position": [0, 0]},
             {"id": "a", "kind": "static", "position": [1, 1]}],
            [{"id": "a", "kind": "static", "position": [0, 0],
              "behavior": "captured-key"}],  # no captured material
        ]
        for assets in bad_assets:
            with pytest.raises(ValueError):
                load_scenario(_minimal(assets=assets))

    def test_escort_chain_rejected(self):
        assets = [
            {"id": "lead", "kind": "route",
             "waypoints": [[0, 0], [0.1, 0.1]], "speed_mps": 5},
            {"id": "e1", "kind": "escort", "follow": "lead"},
            {"id": "e2", "kind": "escort", "follow": "e1"},
        ]
        with pytest.raises(ValueError):
            load_scenario(_minimal(assets=assets))


# ---- small deterministic runs ----


class TestRunScenario:
    def test_honest_pair_all_accepted(self):
        spec = load_scenario(_minimal(duration_s=120))
        result = run_scenario(spec)
        m = result.metrics
        assert m["challenges"] == 4   # rounds at t=30,60,90,120
        assert m["responses"] == 4
        assert m["accepted"] == 4
        assert m["timeouts"] == 0
        assert m["rejected"] == {}
        a = geocell.GeoPoint(0.01, 0.01)
        b = geocell.GeoPoint(0.02, 0.02)
        rtt = 2 * geocell.great_circle_m(a, b) / az.SOUND_SPEED_MPS
        assert abs(m["delay_s"]["mean"] - rtt) < 1e-9
        assert m["cells_visited"] == {"a": 1, "b": 1}

    def test_deterministic(self):
        raw = _minimal(duration_s=300, loss_prob=0.3, seed=42)
        r1 = run_scenario(load_scenario(raw))
        r2 = run_scenario(load_scenario(raw))
        assert r1.metrics == r2.metrics
        assert r1.transcript == r2.transcript

    def test_seed_changes_outcome(self):
        r1 = run_scenario(load_scenario(
            _minimal(duration_s=600, loss_prob=0.5, seed=1)))
        r2 = run_scenario(load_scenario(
            _minimal(duration_s=600, loss_prob=0.5, seed=2)))
        assert r1.transcript != r2.transcript

    def test_silent_asset_times_out(self):
        raw = _minimal(duration_s=120)
        raw["assets"][1]["behavior"] = "silent"
        m = run_scenario(load_scenario(raw)).metrics
        assert m["challenges"] == 4
        assert m["silent"] == 4
        assert m["responses"] == 0
        assert m["timeouts"] == 4

    def test_unlicensed_honest_stays_silent(self):
        raw = _minimal(duration_s=120)
        raw["assets"][1].pop("keys")
        m = run_scenario(load_scenario(raw)).metrics
        assert m["silent"] == 4
        assert m["timeouts"] == 4
        assert m["accepted"] == 0

    def test_random_mac_rejected(self):
        raw = _minimal(duration_s=120)
        raw["assets"][1]["behavior"] = "random-mac"
        raw["assets"][1].pop("keys")
        m = run_scenario(load_scenario(raw)).metrics
        assert m["challenges"] == 4
        assert m["accepted"] == 0
        assert m["rejected"] == {"bad-mac": 4}

    def test_total_loss(self):
        m = run_scenario(load_scenario(
            _minimal(duration_s=120, loss_prob=1.0))).metrics
        assert m["challenges"] == 4
        assert m["lost_frames"] == 4   # dropped on the way out
        assert m["responses"] == 0
        assert m["timeouts"] == 4

    def test_captured_key_fails_in_other_cell(self):
        # intruder in a neighbor cell holds a key lifted from CELL
        raw = _minimal(duration_s=120)
        raw["assets"][0]["keys"].append(
            {"geocode": "6FG232", "start_day": 0, "end_day": 60,
             "key_hex": KEY2.hex()})
        raw["assets"][1] = {
            "id": "b", "kind": "static",
            "position": [0.06, 0.01],  # one cell north: 6FG232
            "behavior": "captured-key",
            "captured": {"geocode": CELL, "key_hex": KEY.hex()},
        }
        m = run_scenario(load_scenario(raw)).metrics
        assert m["accepted"] == 0
        assert m["rejected"] == {"bad-mac": 4}

    def test_captured_key_works_in_its_own_cell(self):
        # inside the compromised cell the stolen key is indistinguishable
        raw = _minimal(duration_s=120)
        raw["assets"][1] = {
            "id": "b", "kind": "static", "position": [0.02, 0.02],
            "behavior": "captured-key",
            "captured": {"geocode": CELL, "key_hex": KEY.hex()},
        }
        m = run_scenario(load_scenario(raw)).metrics
        assert m["accepted"] == 4
        assert m["rejected"] == {}

    def test_neighbor_cell_exchange(self):
        raw = _minimal(duration_s=120)
        raw["assets"][1]["position"] = [0.06, 0.01]  # neighbor cell 6FG232
        for a in raw["assets"]:
            a["keys"].append({"geocode": "6FG232", "start_day": 0,
                              "end_day": 60, "key_hex": KEY2.hex()})
        m = run_scenario(load_scenario(raw)).metrics
        assert m["challenges"] == 4
        assert m["accepted"] == 4

    def test_distant_asset_unreachable(self):
        raw = _minimal(duration_s=120)
        raw["assets"][1]["position"] = [5.0, 5.0]  # far away
        m = run_scenario(load_scenario(raw)).metrics
        assert m["challenges"] == 0

    def test_route_crosses_cells(self):
        raw = _minimal(duration_s=220, challenge_interval_s=1000)
        raw["cell_sample_interval_s"] = 5
        raw["assets"] = [
            {"id": "r", "kind": "route", "speed_mps": 100.0,
             "waypoints": [[0.01, 0.01], [0.01, 0.19]]},
        ]
        m = run_scenario(load_scenario(raw)).metrics
        assert m["cells_visited"]["r"] == 4

    def test_escort_tracks_target(self):
        raw = _minimal(duration_s=120)
        raw["assets"] = [
            {"id": "lead", "kind": "route", "speed_mps": 5.0,
             "challenger": True,
             "waypoints": [[0.01, 0.01], [0.01, 0.02]],
             "keys": [{"geocode": CELL, "start_day": 0, "end_day": 60,
                       "key_hex": KEY.hex()}]},
            {"id": "tail", "kind": "escort", "follow": "lead",
             "offset_m": 200.0,
             "keys": [{"geocode": CELL, "start_day": 0, "end_day": 60,
                       "key_hex": KEY.hex()}]},
        ]
        m = run_scenario(load_scenario(raw)).metrics
        assert m["challenges"] == 4
        assert m["accepted"] == 4
        # 200 m apart the whole way, so rtt stays ~0.267 s
        assert abs(m["delay_s"]["max"] - 2 * 200.0 / 1500.0) < 0.01
