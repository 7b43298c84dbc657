"""Command-line interface.

One executable, `geokey`, with subcommands for the whole lifecycle:
ceremony (contribute, assemble, split, combine), key derivation, grid
enumeration and coverage, device keystores, the authority service, the
channel simulator, and keyspace benchmarking.

Key bytes are never printed unless --reveal is given; default output shows
a SHA-256 fingerprint instead.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import authority as authority_mod
from . import authzsim, custody, geocell, keyspace, keystore
from .kdf import KeyDeriver, TimeInterval, epochs_for

_CONTRIB_KEYS = {"participant_id", "material_hex", "declared_entropy_bits"}


def _fingerprint(key: bytes) -> str:
    return "sha256:" + hashlib.sha256(key).hexdigest()[:16]


def _read_master_key(path: str) -> bytes:
    data = Path(path).read_bytes()
    if len(data) != custody.MASTER_KEY_BYTES:
        raise SystemExit(
            f"error: master key file must be {custody.MASTER_KEY_BYTES} "
            f"bytes, got {len(data)}")
    return data


def _parse_point(text: str) -> geocell.GeoPoint:
    try:
        lat_s, lng_s = text.split(",")
        return geocell.GeoPoint(float(lat_s), float(lng_s))
    except ValueError as e:
        raise SystemExit(f"error: bad coordinate {text!r}: {e}") from e


def _load_points(path: str) -> list[geocell.GeoPoint]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [geocell.GeoPoint(*p) for p in raw]


def _hex_id(text: str) -> bytes:
    val = bytes.fromhex(text)
    if len(val) != 16:
        raise SystemExit("error: id must be 16 bytes (32 hex chars)")
    return val


# ---- ceremony ----


def _cmd_ceremony_contribute(args) -> int:
    if args.material_hex is not None:
        material = bytes.fromhex(args.material_hex)
        if len(material) != custody.CONTRIBUTION_BYTES:
            raise SystemExit(
                f"error: material must be {custody.CONTRIBUTION_BYTES} bytes")
    else:
        material = os.urandom(custody.CONTRIBUTION_BYTES)
    contrib = custody.Contribution(args.participant, material,
                                   args.entropy_bits)
    Path(args.out).write_text(json.dumps({
        "participant_id": contrib.participant_id,
        "material_hex": contrib.material.hex(),
        "declared_entropy_bits": contrib.declared_entropy_bits,
    }, indent=2) + "\n", encoding="utf-8")
    print(f"wrote contribution for participant {args.participant} "
          f"({args.entropy_bits} declared bits) to {args.out}")
    return 0


def _load_contribution(path: Path) -> custody.Contribution:
    raw = json.loads(path.read_text(encoding="utf-8"))
    missing = _CONTRIB_KEYS - raw.keys()
    if missing:
        raise SystemExit(f"error: {path}: missing {sorted(missing)}")
    return custody.Contribution(raw["participant_id"],
                                bytes.fromhex(raw["material_hex"]),
                                raw["declared_entropy_bits"])


def _write_shares(shares, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for share in shares:
        (out_dir / f"share_{share.x:02d}.gksh").write_bytes(
            custody.encode_share(share))


def _cmd_ceremony_assemble(args) -> int:
    if args.contribution:
        paths = [Path(p) for p in args.contribution]
    else:
        paths = sorted(Path(args.dir).glob("*.json"))
    contribs = [_load_contribution(p) for p in paths]
    nonce = bytes.fromhex(args.nonce_hex) if args.nonce_hex else None
    master = custody.assemble_master_key(contribs, nonce=nonce)
    shares = custody.split_master_key(master, k=args.k, n=args.n)
    out_dir = Path(args.out_dir)
    _write_shares(shares, out_dir)
    (out_dir / "ceremony.json").write_text(json.dumps({
        "ceremony_id": master.ceremony_id.hex(),
        "declared_entropy_bits": master.declared_entropy_bits,
        "threshold": args.k,
        "shares": args.n,
    }, indent=2) + "\n", encoding="utf-8")
    if args.master_key_out:
        Path(args.master_key_out).write_bytes(master.key)
        print(f"master key written to {args.master_key_out} "
              "(handle accordingly)")
    print(f"ceremony {master.ceremony_id.hex()}")
    print(f"declared entropy: {master.declared_entropy_bits} bits")
    print(f"shares: {args.n} written to {out_dir}, threshold {args.k}")
    return 0


def _cmd_ceremony_split(args) -> int:
    key = _read_master_key(args.master_key)
    cid = hashlib.sha256(b"geokey-ceremony-v1" + key).digest()[:16]
    master = custody.MasterKey(key, cid)
    shares = custody.split_master_key(master, k=args.k, n=args.n)
    _write_shares(shares, Path(args.out_dir))
    print(f"ceremony {cid.hex()}")
    print(f"shares: {args.n} written to {args.out_dir}, threshold {args.k}")
    return 0


def _cmd_ceremony_combine(args) -> int:
    shares = [custody.decode_share(Path(p).read_bytes())
              for p in args.share]
    master = custody.combine_shares(shares, threshold=args.threshold)
    Path(args.out).write_bytes(master.key)
    print(f"ceremony {master.ceremony_id.hex()}")
    print(f"master key reconstructed from {len(shares)} shares "
          f"to {args.out}")
    return 0


# ---- derive / enumerate / cover ----


def _cmd_derive(args) -> int:
    master = _read_master_key(args.master_key)
    deriver = KeyDeriver(master)
    interval = TimeInterval(args.start_day, args.end_day)
    gk = deriver.derive(args.geocode, interval)
    if args.out:
        Path(args.out).write_bytes(gk.key)
    print(f"cell {gk.geocode} days [{interval.start_day},"
          f"{interval.end_day})")
    if args.reveal:
        print(f"key {gk.key.hex()}")
        print(f"tub-key {gk.tub_key.hex()}")
    else:
        print(f"key {_fingerprint(gk.key)} (use --reveal to print)")
    return 0


def _cmd_enumerate(args) -> int:
    if args.count_only:
        print(geocell.CELL_COUNT)
        return 0
    for i, code in enumerate(geocell.enumerate_all()):
        if args.limit is not None and i >= args.limit:
            break
        print(code)
    return 0


def _route_points(args) -> list[geocell.GeoPoint]:
    if args.waypoints_file:
        return _load_points(args.waypoints_file)
    return [_parse_point(w) for w in args.waypoint]


def _cmd_cover_route(args) -> int:
    points = _route_points(args)
    codes = geocell.cover_route(points, step_m=args.step_m)
    if args.count_only:
        print(len(codes))
    else:
        for code in codes:
            print(code)
    return 0


def _cmd_cover_area(args) -> int:
    if args.polygon_file:
        points = _load_points(args.polygon_file)
    else:
        points = [_parse_point(v) for v in args.vertex]
    codes = sorted(geocell.cover_area(points))
    if args.count_only:
        print(len(codes))
    else:
        for code in codes:
            print(code)
    return 0


# ---- keystore ----


def _cmd_keystore_import(args) -> int:
    store = keystore.Keystore(path=args.store)
    count = store.import_bundle(Path(args.bundle).read_bytes())
    print(f"imported {count} records; store holds {len(store)} "
          f"({store.size_bytes()} bytes serialized)")
    return 0


def _cmd_keystore_export(args) -> int:
    store = keystore.Keystore(path=args.store)
    licensee = _hex_id(args.licensee_hex) if args.licensee_hex else None
    data = store.export_bundle(licensee)
    Path(args.out).write_bytes(data)
    print(f"exported {len(store)} records ({len(data)} bytes) to {args.out}")
    return 0


def _cmd_keystore_lookup(args) -> int:
    store = keystore.Keystore(path=args.store)
    gk = store.lookup(args.geocode, args.day)
    if gk is None:
        print(f"no key for {args.geocode} on day {args.day}")
        return 1
    print(f"cell {gk.geocode} days [{gk.interval.start_day},"
          f"{gk.interval.end_day})")
    if args.reveal:
        print(f"key {gk.key.hex()}")
    else:
        print(f"key {_fingerprint(gk.key)} (use --reveal to print)")
    return 0


def _cmd_keystore_prune(args) -> int:
    store = keystore.Keystore(path=args.store)
    dropped = store.prune_expired(args.now_day)
    print(f"pruned {dropped} expired records; {len(store)} remain")
    return 0


def _cmd_keystore_size(args) -> int:
    if args.records is not None:
        print(keystore.bundle_size(args.records))
    else:
        store = keystore.Keystore(path=args.store)
        print(f"{len(store)} records, {store.size_bytes()} bytes serialized")
    return 0


# ---- authority ----


def _authority_cells(args) -> tuple:
    given = [bool(args.cell), bool(args.cells_file),
             bool(getattr(args, "polygon_file", None))]
    if sum(given) != 1:
        raise SystemExit(
            "error: give exactly one of --cell, --cells-file, "
            "--polygon-file")
    if args.cell:
        return tuple(args.cell), None
    if args.cells_file:
        text = Path(args.cells_file).read_text(encoding="utf-8")
        return tuple(text.split()), None
    return None, tuple(_load_points(args.polygon_file))


def _cmd_authority_issue(args) -> int:
    master = _read_master_key(args.master_key)
    auth = authority_mod.Authority(KeyDeriver(master),
                                   data_dir=args.data_dir)
    cells, polygon = _authority_cells(args)
    req = authority_mod.LicenseRequest(
        _hex_id(args.licensee_hex), args.start_day, args.end_day,
        cells=cells, polygon=polygon, purpose=args.purpose)
    bundle = auth.issue(req)
    Path(args.out).write_bytes(bundle)
    _, records = keystore.decode_bundle(bundle)
    epochs = len(epochs_for(args.start_day, args.end_day))
    print(f"issued {len(records)} records "
          f"({len(records) // epochs} cells x {epochs} epochs, "
          f"{len(bundle)} bytes) to {args.out}")
    return 0


def _cmd_authority_delegate(args) -> int:
    master = _read_master_key(args.master_key)
    auth = authority_mod.Authority(KeyDeriver(master),
                                   data_dir=args.data_dir)
    cells, polygon = _authority_cells(args)
    if cells is None:
        cells = tuple(sorted(geocell.cover_area(polygon)))
    grant = authority_mod.Delegation(_hex_id(args.subauthority_hex),
                                     cells, args.start_day, args.end_day)
    bundle = auth.delegate(grant)
    Path(args.out).write_bytes(bundle)
    print(f"delegated {len(cells)} cells to "
          f"{args.subauthority_hex} ({len(bundle)} bytes) in {args.out}")
    return 0


def _cmd_authority_serve(args) -> int:
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    creds = [authority_mod.ClientCredential(
        c["token"], _hex_id(c["licensee_hex"]), bool(c.get("admin", False)))
        for c in cfg.get("credentials", [])]
    deriver = None
    if cfg.get("master_key"):
        deriver = KeyDeriver(_read_master_key(cfg["master_key"]))
    auth = authority_mod.Authority(deriver, data_dir=cfg.get("data_dir"))
    service = authority_mod.ServiceConfig(
        host=cfg.get("host", "127.0.0.1"), port=int(cfg.get("port", 0)),
        credentials=creds, tls_cert=cfg.get("tls_cert"),
        tls_key=cfg.get("tls_key"))
    server = authority_mod.AuthorityServer(auth, service)
    host, port = server.address
    ready = "ready" if auth.ready else "no master key: issuance unavailable"
    tls = "tls" if service.tls_cert else "plaintext"
    print(f"authority listening on {host}:{port} ({tls}, {ready})",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


# ---- sim / bench ----


def _cmd_sim_run(args) -> int:
    spec = authzsim.load_scenario(args.scenario)
    result = authzsim.run_scenario(spec)
    if args.transcript:
        Path(args.transcript).write_text(
            "\n".join(result.transcript) + "\n", encoding="utf-8")
    if args.metrics:
        Path(args.metrics).write_text(
            json.dumps(result.metrics, indent=2) + "\n", encoding="utf-8")
    m = result.metrics
    print(f"challenges {m['challenges']}, responses {m['responses']}, "
          f"accepted {m['accepted']}, timeouts {m['timeouts']}, "
          f"lost {m['lost_frames']}")
    for reason, count in sorted(m["rejected"].items()):
        print(f"rejected {reason}: {count}")
    if m["delay_s"]["mean"] is not None:
        print(f"round-trip s: min {m['delay_s']['min']:.2f} "
              f"mean {m['delay_s']['mean']:.2f} "
              f"max {m['delay_s']['max']:.2f}")
    return 0


def _cmd_bench_keyspace(args) -> int:
    if args.master_key:
        master = _read_master_key(args.master_key)
    else:
        master = bytes(custody.MASTER_KEY_BYTES)
        print("using all-zero test master key", file=sys.stderr)
    cells = geocell.CELL_COUNT if args.full else args.cells
    interval = TimeInterval(args.start_day, args.end_day)
    if args.out:
        stats = keyspace.write_keyspace_bundle(
            master, interval, args.out, cells=cells, chunk=args.chunk)
        print(f"wrote {stats['cells']} records, {stats['bytes']} bytes "
              f"in {stats['seconds']:.1f}s "
              f"({stats['cells_per_s']:.0f} cells/s)")
    else:
        import time
        deriver = keyspace.BulkDeriver(master)
        t0 = time.monotonic()
        done = 0
        for lo in range(0, cells, args.chunk):
            hi = min(lo + args.chunk, cells)
            deriver.derive_range(lo, hi, interval)
            done += hi - lo
        dt = time.monotonic() - t0
        rate = done / dt if dt > 0 else float("inf")
        full_est = geocell.CELL_COUNT / rate
        print(f"derived {done} cells in {dt:.1f}s ({rate:.0f} cells/s)")
        print(f"full keyspace estimate: {full_est / 60:.1f} min, "
              f"{keystore.bundle_size(geocell.CELL_COUNT)} bytes serialized")
    return 0


# ---- parser ----


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geokey",
        description="geocoded, time-boxed keys for underwater authorization")
    sub = parser.add_subparsers(dest="command", required=True)

    cer = sub.add_parser("ceremony", help="master-key custody lifecycle")
    cer_sub = cer.add_subparsers(dest="subcommand", required=True)

    p = cer_sub.add_parser("contribute", help="generate one contribution")
    p.add_argument("--participant", type=int, required=True)
    p.add_argument("--entropy-bits", type=int, default=35)
    p.add_argument("--material-hex")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ceremony_contribute)

    p = cer_sub.add_parser(
        "assemble", help="assemble master key from contributions and split")
    p.add_argument("--contribution", action="append", default=[])
    p.add_argument("--dir", help="directory of contribution JSON files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=custody.THRESHOLD)
    p.add_argument("--n", type=int, default=custody.PARTICIPANTS)
    p.add_argument("--nonce-hex")
    p.add_argument("--master-key-out",
                   help="also write the raw master key (testing only)")
    p.set_defaults(func=_cmd_ceremony_assemble)

    p = cer_sub.add_parser("split", help="split an existing master key")
    p.add_argument("--master-key", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=custody.THRESHOLD)
    p.add_argument("--n", type=int, default=custody.PARTICIPANTS)
    p.set_defaults(func=_cmd_ceremony_split)

    p = cer_sub.add_parser("combine", help="reconstruct from shares")
    p.add_argument("--share", action="append", required=True)
    p.add_argument("--threshold", type=int, default=custody.THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ceremony_combine)

    p = sub.add_parser("derive", help="derive one cell key")
    p.add_argument("--master-key", required=True)
    p.add_argument("--geocode", required=True)
    p.add_argument("--start-day", type=int, required=True)
    p.add_argument("--end-day", type=int, required=True)
    p.add_argument("--reveal", action="store_true")
    p.add_argument("--out", help="write raw key bytes to file")
    p.set_defaults(func=_cmd_derive)

    p = sub.add_parser("enumerate", help="list all geocodes")
    p.add_argument("--count-only", action="store_true")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=_cmd_enumerate)

    cov = sub.add_parser("cover", help="cells for a route or area")
    cov_sub = cov.add_subparsers(dest="subcommand", required=True)

    p = cov_sub.add_parser("route", help="cells along waypoints")
    p.add_argument("--waypoint", action="append", default=[],
                   metavar="LAT,LNG")
    p.add_argument("--waypoints-file")
    p.add_argument("--step-m", type=float,
                   default=geocell.DEFAULT_ROUTE_STEP_M)
    p.add_argument("--count-only", action="store_true")
    p.set_defaults(func=_cmd_cover_route)

    p = cov_sub.add_parser("area", help="cells intersecting a polygon")
    p.add_argument("--vertex", action="append", default=[],
                   metavar="LAT,LNG")
    p.add_argument("--polygon-file")
    p.add_argument("--count-only", action="store_true")
    p.set_defaults(func=_cmd_cover_area)

    ks = sub.add_parser("keystore", help="device keystore operations")
    ks_sub = ks.add_subparsers(dest="subcommand", required=True)

    p = ks_sub.add_parser("import", help="merge a bundle into a store")
    p.add_argument("--store", required=True)
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=_cmd_keystore_import)

    p = ks_sub.add_parser("export", help="write store as a bundle")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--licensee-hex")
    p.set_defaults(func=_cmd_keystore_export)

    p = ks_sub.add_parser("lookup", help="find the key for a cell and day")
    p.add_argument("--store", required=True)
    p.add_argument("--geocode", required=True)
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--reveal", action="store_true")
    p.set_defaults(func=_cmd_keystore_lookup)

    p = ks_sub.add_parser("prune", help="drop expired records")
    p.add_argument("--store", required=True)
    p.add_argument("--now-day", type=int, required=True)
    p.set_defaults(func=_cmd_keystore_prune)

    p = ks_sub.add_parser("size", help="serialized size")
    p.add_argument("--records", type=int)
    p.add_argument("--store")
    p.set_defaults(func=_cmd_keystore_size)

    au = sub.add_parser("authority", help="issuance and delegation")
    au_sub = au.add_subparsers(dest="subcommand", required=True)

    p = au_sub.add_parser("issue", help="issue a license bundle")
    p.add_argument("--master-key", required=True)
    p.add_argument("--licensee-hex", required=True)
    p.add_argument("--start-day", type=int, required=True)
    p.add_argument("--end-day", type=int, required=True)
    p.add_argument("--cell", action="append", default=[])
    p.add_argument("--cells-file")
    p.add_argument("--polygon-file")
    p.add_argument("--purpose", default="")
    p.add_argument("--data-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_authority_issue)

    p = au_sub.add_parser("delegate", help="delegate cells to a subauthority")
    p.add_argument("--master-key", required=True)
    p.add_argument("--subauthority-hex", required=True)
    p.add_argument("--start-day", type=int, required=True)
    p.add_argument("--end-day", type=int, required=True)
    p.add_argument("--cell", action="append", default=[])
    p.add_argument("--cells-file")
    p.add_argument("--polygon-file")
    p.add_argument("--data-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_authority_delegate)

    p = au_sub.add_parser("serve", help="run the authority service")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_authority_serve)

    sim = sub.add_parser("sim", help="acoustic channel simulation")
    sim_sub = sim.add_subparsers(dest="subcommand", required=True)

    p = sim_sub.add_parser("run", help="run a scenario file")
    p.add_argument("scenario")
    p.add_argument("--transcript")
    p.add_argument("--metrics")
    p.set_defaults(func=_cmd_sim_run)

    ben = sub.add_parser("bench", help="performance measurement")
    ben_sub = ben.add_subparsers(dest="subcommand", required=True)

    p = ben_sub.add_parser("keyspace", help="bulk derivation throughput")
    p.add_argument("--cells", type=int, default=200_000)
    p.add_argument("--full", action="store_true",
                   help="all 25,920,000 cells")
    p.add_argument("--start-day", type=int, default=0)
    p.add_argument("--end-day", type=int, default=60)
    p.add_argument("--master-key")
    p.add_argument("--out", help="write the derived bundle here")
    p.add_argument("--chunk", type=int, default=keyspace.DEFAULT_CHUNK)
    p.set_defaults(func=_cmd_bench_keyspace)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (custody.ThresholdError, custody.ShareIntegrityError,
            custody.ShareFormatError, keystore.BundleFormatError,
            authority_mod.AuthorityError,
            authority_mod.MasterKeyUnavailable, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
