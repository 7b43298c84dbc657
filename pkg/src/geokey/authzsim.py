"""Same-cell challenge-response authorization, plus a discrete-event
simulator for exercising it over an acoustic channel.

The protocol is two tiny packets sized for acoustic modems.  A challenge
(6 bytes) carries a 29-bit timestamp in 10 ms ticks and a 17-bit nonce; the
response (5 bytes) carries a 32-bit MAC over the challenge bytes and the
cell geocode, keyed with the cell's 32-byte key.  Holding the key for the
cell both parties are in is what proves authorization; the timestamp bounds
response age and the nonce breaks replay within the freshness window.

29 bits of 10 ms ticks wrap every 62.1 days, just past the 60-day key
epoch, so a (timestamp, epoch) pair can never repeat under one key.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import cipher, geocell
from .keystore import Keystore, KeyRecord, encode_bundle

TICK_SECONDS = 0.01
TIMESTAMP_BITS = 29
TIMESTAMP_MOD = 1 << TIMESTAMP_BITS
NONCE_BITS = 17
NONCE_MOD = 1 << NONCE_BITS
MAC_BITS = 32
FRESHNESS_WINDOW_TICKS = 1000  # 10 seconds

CHALLENGE_BYTES = 6
RESPONSE_BYTES = 5
_TYPE_CHALLENGE = 0b01
_TYPE_RESPONSE = 0b10

SOUND_SPEED_MPS = 1500.0

SCENARIO_VERSION = 1


class PacketFormatError(Exception):
    """Packet bytes do not parse as the expected message type."""


@dataclass(frozen=True)
class ChallengePacket:
    """48-bit challenge: type(2) | timestamp(29) | nonce(17), MSB first."""

    timestamp_ticks: int
    nonce: int

    def __post_init__(self) -> None:
        if not 0 <= self.timestamp_ticks < TIMESTAMP_MOD:
            raise ValueError("timestamp out of range")
        if not 0 <= self.nonce < NONCE_MOD:
            raise ValueError("nonce out of range")

    def to_bytes(self) -> bytes:
        val = ((_TYPE_CHALLENGE << 46) | (self.timestamp_ticks << 17)
               | self.nonce)
        return val.to_bytes(CHALLENGE_BYTES, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "ChallengePacket":
        if len(data) != CHALLENGE_BYTES:
            raise PacketFormatError(
                f"challenge must be {CHALLENGE_BYTES} bytes")
        val = int.from_bytes(data, "big")
        if val >> 46 != _TYPE_CHALLENGE:
            raise PacketFormatError("not a challenge packet")
        return cls((val >> 17) & (TIMESTAMP_MOD - 1), val & (NONCE_MOD - 1))


@dataclass(frozen=True)
class ResponsePacket:
    """40-bit response: type(2) | mac(32) | zero pad(6), MSB first."""

    mac: int

    def __post_init__(self) -> None:
        if not 0 <= self.mac < 1 << MAC_BITS:
            raise ValueError("mac out of range")

    def to_bytes(self) -> bytes:
        return ((_TYPE_RESPONSE << 38) | (self.mac << 6)).to_bytes(
            RESPONSE_BYTES, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "ResponsePacket":
        if len(data) != RESPONSE_BYTES:
            raise PacketFormatError(
                f"response must be {RESPONSE_BYTES} bytes")
        val = int.from_bytes(data, "big")
        if val >> 38 != _TYPE_RESPONSE:
            raise PacketFormatError("not a response packet")
        if val & 0x3F:
            raise PacketFormatError("response padding bits must be zero")
        return cls((val >> 6) & 0xFFFFFFFF)


def tick_distance(a: int, b: int) -> int:
    """Modular distance between two 29-bit tick counters."""
    d = (a - b) % TIMESTAMP_MOD
    return min(d, TIMESTAMP_MOD - d)


def make_challenge(clock_ticks: int,
                   rng: random.Random | None = None) -> ChallengePacket:
    """Fresh challenge for the verifier's current clock."""
    if rng is None:
        rng = random.SystemRandom()
    return ChallengePacket(clock_ticks % TIMESTAMP_MOD,
                           rng.getrandbits(NONCE_BITS))


# MAC keys repeat heavily (one per cell-epoch), so cache their schedules
_SCHED_CACHE: dict[bytes, cipher.RoundKeys] = {}
_SCHED_CACHE_MAX = 4096


def _schedule(key: bytes) -> cipher.RoundKeys:
    rk = _SCHED_CACHE.get(key)
    if rk is None:
        if len(_SCHED_CACHE) >= _SCHED_CACHE_MAX:
            _SCHED_CACHE.clear()
        rk = cipher.key_schedule(key)
        _SCHED_CACHE[key] = rk
    return rk


def response_mac(challenge: ChallengePacket, geocode: geocell.Geocode,
                 key: bytes) -> int:
    """32-bit MAC over challenge bytes and geocode under the cell key."""
    if len(key) != 32:
        raise ValueError("cell key must be 32 bytes")
    geocell.validate_geocode(geocode)
    msg = challenge.to_bytes() + geocode.encode("ascii")
    return cipher.cbc_mac(msg, _schedule(key), MAC_BITS)


def respond(challenge: ChallengePacket, store: Keystore,
            own_cell: geocell.Geocode,
            now_day: int) -> ResponsePacket | None:
    """Honest responder: answer if licensed for the current cell, else stay
    silent.  Silence never reveals whether a key is merely absent."""
    gk = store.lookup(own_cell, now_day)
    if gk is None:
        return None
    return ResponsePacket(response_mac(challenge, own_cell, gk.tub_key))


class ReplayCache:
    """Remembers accepted (timestamp, nonce, mac) triples long enough to
    outlive the freshness window, and forgets them after that."""

    def __init__(self, horizon_ticks: int = 4 * FRESHNESS_WINDOW_TICKS,
                 max_entries: int = 1 << 16) -> None:
        self.horizon_ticks = horizon_ticks
        self.max_entries = max_entries
        self._seen: dict[tuple[int, int, int], int] = {}

    def seen(self, entry: tuple[int, int, int]) -> bool:
        return entry in self._seen

    def add(self, entry: tuple[int, int, int], clock_ticks: int) -> None:
        if len(self._seen) >= self.max_entries:
            self.purge(clock_ticks)
        self._seen[entry] = clock_ticks % TIMESTAMP_MOD

    def purge(self, clock_ticks: int) -> None:
        now = clock_ticks % TIMESTAMP_MOD
        self._seen = {e: t for e, t in self._seen.items()
                      if tick_distance(now, t) <= self.horizon_ticks}

    def __len__(self) -> int:
        return len(self._seen)


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    reason: str | None = None  # no-key | stale | replayed | bad-mac


def verify(challenge: ChallengePacket, response: ResponsePacket,
           store: Keystore, cell: geocell.Geocode, clock_ticks: int,
           now_day: int, cache: ReplayCache) -> VerifyResult:
    """Check a response against the cell the verifier observes the prover
    in.  Reject reasons, in check order: no-key (verifier itself is not
    licensed there), stale, replayed, bad-mac."""
    gk = store.lookup(cell, now_day)
    if gk is None:
        return VerifyResult(False, "no-key")
    now = clock_ticks % TIMESTAMP_MOD
    if tick_distance(now, challenge.timestamp_ticks) > FRESHNESS_WINDOW_TICKS:
        return VerifyResult(False, "stale")
    entry = (challenge.timestamp_ticks, challenge.nonce, response.mac)
    if cache.seen(entry):
        return VerifyResult(False, "replayed")
    if response.mac != response_mac(challenge, cell, gk.tub_key):
        return VerifyResult(False, "bad-mac")
    cache.add(entry, now)
    return VerifyResult(True, None)


# ---- scenario specification ----


@dataclass(frozen=True)
class AssetSpec:
    asset_id: str
    kind: str = "static"  # static | route | escort
    behavior: str = "honest"  # honest | silent | captured-key | random-mac
    challenger: bool = False
    position: geocell.GeoPoint | None = None
    waypoints: tuple[geocell.GeoPoint, ...] = ()
    speed_mps: float = 0.0
    follow: str | None = None
    offset_m: float = 0.0
    keystore_path: Path | None = None
    inline_keys: tuple[KeyRecord, ...] = ()
    captured_cell: geocell.Geocode | None = None
    captured_key: bytes | None = None


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    duration_s: float
    challenge_interval_s: float
    assets: tuple[AssetSpec, ...]
    start_day: int = 0
    loss_prob: float = 0.0
    sound_speed_mps: float = SOUND_SPEED_MPS
    response_timeout_s: float = 30.0
    max_clock_skew_s: float = 0.5
    cell_sample_interval_s: float = 300.0


def _parse_asset(raw: dict, base_dir: Path | None) -> AssetSpec:
    asset_id = raw.get("id")
    if not asset_id or not isinstance(asset_id, str):
        raise ValueError("asset needs a string id")
    kind = raw.get("kind", "static")
    behavior = raw.get("behavior", "honest")
    if kind not in ("static", "route", "escort"):
        raise ValueError(f"asset {asset_id}: unknown kind {kind!r}")
    if behavior not in ("honest", "silent", "captured-key", "random-mac"):
        raise ValueError(
            f"asset {asset_id}: unknown behavior {behavior!r}")
    position = None
    waypoints: tuple[geocell.GeoPoint, ...] = ()
    if kind == "static":
        if "position" not in raw:
            raise ValueError(f"asset {asset_id}: static needs position")
        position = geocell.GeoPoint(*raw["position"])
    elif kind == "route":
        pts = raw.get("waypoints", [])
        if len(pts) < 2:
            raise ValueError(f"asset {asset_id}: route needs >= 2 waypoints")
        waypoints = tuple(geocell.GeoPoint(*p) for p in pts)
        if raw.get("speed_mps", 0) <= 0:
            raise ValueError(f"asset {asset_id}: route needs speed_mps > 0")
    else:
        if not raw.get("follow"):
            raise ValueError(f"asset {asset_id}: escort needs follow")
    keystore_path = None
    if raw.get("keystore"):
        keystore_path = Path(raw["keystore"])
        if base_dir is not None and not keystore_path.is_absolute():
            keystore_path = base_dir / keystore_path
    inline = []
    for rec in raw.get("keys", []):
        inline.append(KeyRecord(rec["geocode"], rec["start_day"],
                                rec["end_day"],
                                bytes.fromhex(rec["key_hex"])))
    captured_cell = captured_key = None
    if behavior == "captured-key":
        cap = raw.get("captured")
        if not cap:
            raise ValueError(
                f"asset {asset_id}: captured-key needs captured")
        captured_cell = cap["geocode"]
        geocell.validate_geocode(captured_cell)
        captured_key = bytes.fromhex(cap["key_hex"])
        if len(captured_key) != 32:
            raise ValueError(f"asset {asset_id}: captured key must be 32B")
    return AssetSpec(
        asset_id=asset_id, kind=kind, behavior=behavior,
        challenger=bool(raw.get("challenger", False)), position=position,
        waypoints=waypoints, speed_mps=float(raw.get("speed_mps", 0.0)),
        follow=raw.get("follow"), offset_m=float(raw.get("offset_m", 0.0)),
        keystore_path=keystore_path, inline_keys=tuple(inline),
        captured_cell=captured_cell, captured_key=captured_key)


def load_scenario(source: str | Path | dict,
                  base_dir: str | Path | None = None) -> ScenarioSpec:
    """Load a scenario from a JSON file or an already-parsed dict.

    Relative keystore paths resolve against the scenario file's directory.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        raw = json.loads(path.read_text(encoding="utf-8"))
        if base_dir is None:
            base_dir = path.parent
    else:
        raw = source
    base = Path(base_dir) if base_dir is not None else None
    if raw.get("version") != SCENARIO_VERSION:
        raise ValueError(
            f"scenario version must be {SCENARIO_VERSION}, "
            f"got {raw.get('version')!r}")
    for req in ("seed", "duration_s", "challenge_interval_s", "assets"):
        if req not in raw:
            raise ValueError(f"scenario missing {req!r}")
    loss = float(raw.get("loss_prob", 0.0))
    if not 0.0 <= loss <= 1.0:
        raise ValueError("loss_prob must be in [0, 1]")
    if float(raw["duration_s"]) <= 0:
        raise ValueError("duration_s must be positive")
    if float(raw["challenge_interval_s"]) <= 0:
        raise ValueError("challenge_interval_s must be positive")
    assets = tuple(_parse_asset(a, base) for a in raw["assets"])
    ids = [a.asset_id for a in assets]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate asset ids")
    by_id = {a.asset_id: a for a in assets}
    for a in assets:
        if a.kind == "escort":
            target = by_id.get(a.follow)
            if target is None:
                raise ValueError(
                    f"asset {a.asset_id}: follows unknown {a.follow!r}")
            if target.kind == "escort":
                raise ValueError(
                    f"asset {a.asset_id}: cannot escort an escort")
    return ScenarioSpec(
        seed=int(raw["seed"]), duration_s=float(raw["duration_s"]),
        challenge_interval_s=float(raw["challenge_interval_s"]),
        assets=assets, start_day=int(raw.get("start_day", 0)),
        loss_prob=loss,
        sound_speed_mps=float(raw.get("sound_speed_mps", SOUND_SPEED_MPS)),
        response_timeout_s=float(raw.get("response_timeout_s", 30.0)),
        max_clock_skew_s=float(raw.get("max_clock_skew_s", 0.5)),
        cell_sample_interval_s=float(raw.get("cell_sample_interval_s",
                                             300.0)))


# ---- position tracks ----

_M_PER_DEG_LAT = geocell.EARTH_RADIUS_M * math.pi / 180.0


class _Track:
    def __init__(self, spec: AssetSpec) -> None:
        self.spec = spec
        self._target: "_Track" | None = None
        if spec.kind == "route":
            self._legs = []
            total = 0.0
            for p, q in zip(spec.waypoints, spec.waypoints[1:]):
                d = geocell.great_circle_m(p, q)
                if d > 0:
                    self._legs.append((total, d, p, q))
                    total += d
            self._total = total

    def bind(self, target: "_Track") -> None:
        self._target = target

    def position(self, t: float) -> geocell.GeoPoint:
        spec = self.spec
        if spec.kind == "static":
            return spec.position
        if spec.kind == "escort":
            base = self._target.position(t)
            lat = base.lat - spec.offset_m / _M_PER_DEG_LAT
            return geocell.GeoPoint(lat, base.lng)
        dist = min(spec.speed_mps * t, self._total)
        if not self._legs:
            return spec.waypoints[0]
        for start, length, p, q in reversed(self._legs):
            if dist >= start:
                return geocell.slerp_point(p, q, min(1.0,
                                                     (dist - start) / length))
        return self._legs[0][2]


class _Asset:
    def __init__(self, spec: AssetSpec, track: _Track, store: Keystore,
                 skew_s: float) -> None:
        self.spec = spec
        self.track = track
        self.store = store
        self.skew_s = skew_s
        self.cache = ReplayCache()
        self.cells_seen: set[str] = set()

    def clock_ticks(self, t: float) -> int:
        return max(0, int((t + self.skew_s) / TICK_SECONDS))

    def cell_at(self, t: float) -> geocell.Geocode:
        code = geocell.encode(self.track.position(t))
        self.cells_seen.add(code)
        return code


def _build_store(spec: AssetSpec) -> Keystore:
    if spec.keystore_path is not None:
        return Keystore(path=spec.keystore_path)
    store = Keystore()
    if spec.inline_keys:
        store.import_bundle(encode_bundle(bytes(16), spec.inline_keys))
    return store


@dataclass
class ScenarioResult:
    metrics: dict
    transcript: list[str]


def run_scenario(spec: ScenarioSpec) -> ScenarioResult:
    """Run the scenario to completion and return metrics plus transcript.

    Fully deterministic for a given spec: one seeded RNG drives nonces,
    clock skews, frame loss, and adversarial MACs in event order.
    """
    rng = random.Random(spec.seed)
    assets: dict[str, _Asset] = {}
    tracks: dict[str, _Track] = {}
    for a in spec.assets:
        tracks[a.asset_id] = _Track(a)
    for a in spec.assets:
        if a.kind == "escort":
            tracks[a.asset_id].bind(tracks[a.follow])
    for a in spec.assets:
        skew = rng.uniform(-spec.max_clock_skew_s, spec.max_clock_skew_s)
        assets[a.asset_id] = _Asset(a, tracks[a.asset_id],
                                    _build_store(a), skew)

    transcript: list[str] = []
    counts = {"challenges": 0, "responses": 0, "accepted": 0,
              "timeouts": 0, "lost_frames": 0, "silent": 0, "late": 0}
    rejected: dict[str, int] = {}
    delays: list[float] = []

    heap: list[tuple] = []
    seq = 0

    def push(t: float, kind: str, data: dict) -> None:
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, data))
        seq += 1

    challengers = [a for a in spec.assets if a.challenger]
    for a in challengers:
        push(spec.challenge_interval_s, "round", {"who": a.asset_id})
    push(0.0, "sample", {})

    outstanding: dict[tuple, dict] = {}
    day_for = lambda t: spec.start_day + int(t // 86400)
    horizon = spec.duration_s + spec.response_timeout_s + 60.0

    while heap:
        t, _, kind, data = heapq.heappop(heap)
        if t > horizon:
            break
        if kind == "sample":
            for asset in assets.values():
                asset.cell_at(t)
            nxt = t + spec.cell_sample_interval_s
            if nxt <= spec.duration_s:
                push(nxt, "sample", {})
            continue
        if kind == "round":
            verifier = assets[data["who"]]
            if t <= spec.duration_s:
                _start_round(spec, rng, assets, verifier, t, push,
                             outstanding, transcript, counts)
                push(t + spec.challenge_interval_s, "round", data)
            continue
        if kind == "deliver-challenge":
            _on_challenge(spec, rng, assets, data, t, push, transcript,
                          counts, day_for)
            continue
        if kind == "deliver-response":
            _on_response(spec, assets, data, t, outstanding, transcript,
                         counts, rejected, delays, day_for)
            continue
        if kind == "timeout":
            rec = outstanding.pop(data["key"], None)
            if rec is not None:
                counts["timeouts"] += 1
                transcript.append(
                    f"t={t:.2f} timeout from={rec['verifier']} "
                    f"target={rec['target']} cell={rec['cell']}")

    metrics = {
        "scenario": {"seed": spec.seed, "duration_s": spec.duration_s,
                     "loss_prob": spec.loss_prob,
                     "sound_speed_mps": spec.sound_speed_mps},
        **counts,
        "rejected": rejected,
        "delay_s": {
            "min": min(delays) if delays else None,
            "mean": sum(delays) / len(delays) if delays else None,
            "max": max(delays) if delays else None,
        },
        "cells_visited": {aid: len(a.cells_seen)
                          for aid, a in assets.items()},
    }
    return ScenarioResult(metrics, transcript)


def _start_round(spec, rng, assets, verifier, t, push, outstanding,
                 transcript, counts) -> None:
    vcell = verifier.cell_at(t)
    reachable = {vcell, *geocell.neighbors(vcell)}
    for target in assets.values():
        if target.spec.asset_id == verifier.spec.asset_id:
            continue
        tcell = target.cell_at(t)
        if tcell not in reachable:
            continue
        ch = make_challenge(verifier.clock_ticks(t), rng)
        counts["challenges"] += 1
        key = (verifier.spec.asset_id, ch.timestamp_ticks, ch.nonce)
        outstanding[key] = {"verifier": verifier.spec.asset_id,
                            "target": target.spec.asset_id,
                            "cell": tcell, "challenge": ch, "sent": t}
        transcript.append(
            f"t={t:.2f} challenge from={verifier.spec.asset_id} "
            f"to={target.spec.asset_id} cell={tcell} "
            f"ts={ch.timestamp_ticks} nonce={ch.nonce}")
        dist = geocell.great_circle_m(verifier.track.position(t),
                                      target.track.position(t))
        delay = dist / spec.sound_speed_mps
        if rng.random() < spec.loss_prob:
            counts["lost_frames"] += 1
            transcript.append(
                f"t={t:.2f} lost challenge to={target.spec.asset_id}")
        else:
            push(t + delay, "deliver-challenge",
                 {"key": key, "to": target.spec.asset_id})
        push(t + spec.response_timeout_s, "timeout", {"key": key})


def _on_challenge(spec, rng, assets, data, t, push, transcript, counts,
                  day_for) -> None:
    key = data["key"]
    verifier_id, ts, nonce = key
    target = assets[data["to"]]
    ch = ChallengePacket(ts, nonce)
    behavior = target.spec.behavior
    if behavior == "silent":
        counts["silent"] += 1
        transcript.append(
            f"t={t:.2f} silent asset={target.spec.asset_id} reason=policy")
        return
    own_cell = target.cell_at(t)
    if behavior == "honest":
        resp = respond(ch, target.store, own_cell, day_for(t))
        if resp is None:
            counts["silent"] += 1
            transcript.append(
                f"t={t:.2f} silent asset={target.spec.asset_id} "
                f"reason=no-key cell={own_cell}")
            return
    elif behavior == "captured-key":
        resp = ResponsePacket(
            response_mac(ch, own_cell, target.spec.captured_key))
    else:  # random-mac
        resp = ResponsePacket(rng.getrandbits(MAC_BITS))
    verifier = assets[verifier_id]
    dist = geocell.great_circle_m(target.track.position(t),
                                  verifier.track.position(t))
    delay = dist / spec.sound_speed_mps
    if rng.random() < spec.loss_prob:
        counts["lost_frames"] += 1
        transcript.append(
            f"t={t:.2f} lost response from={target.spec.asset_id}")
        return
    push(t + delay, "deliver-response", {"key": key, "mac": resp.mac})


def _on_response(spec, assets, data, t, outstanding, transcript, counts,
                 rejected, delays, day_for) -> None:
    rec = outstanding.pop(data["key"], None)
    if rec is None:
        counts["late"] += 1
        return
    counts["responses"] += 1
    verifier = assets[rec["verifier"]]
    result = verify(rec["challenge"], ResponsePacket(data["mac"]),
                    verifier.store, rec["cell"], verifier.clock_ticks(t),
                    day_for(t), verifier.cache)
    rtt = t - rec["sent"]
    if result.accepted:
        counts["accepted"] += 1
        delays.append(rtt)
        outcome = "accepted"
    else:
        rejected[result.reason] = rejected.get(result.reason, 0) + 1
        outcome = f"rejected reason={result.reason}"
    transcript.append(
        f"t={t:.2f} verify from={rec['verifier']} target={rec['target']} "
        f"cell={rec['cell']} outcome={outcome} rtt={rtt:.2f}")
