"""Base-20 geocell grid and coverage planning.

The grid divides the globe into 0.05 degree square cells (roughly 5.5 km per
side at the equator), 3,600 rows by 7,200 columns.  A cell is named by a
6-character geocode over a 20-symbol alphabet, digits interleaved as
(lat, lng) pairs at 20, 1, and 0.05 degree resolution, so lexicographic
order groups nearby cells.  Cells are half-open in both axes; the north pole
clamps into the top row and longitude 180 wraps to -180.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

ALPHABET = "23456789CFGHJMPQRVWX"
CELL_DEG = 0.05
LAT_ROWS = 3600
LNG_COLS = 7200
CELL_COUNT = LAT_ROWS * LNG_COLS
EARTH_RADIUS_M = 6_371_000.0
DEFAULT_ROUTE_STEP_M = 500.0
MAX_ROUTE_STEP_M = 1000.0

Geocode = str

_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}

# Nudge in scaled grid units (~0.5 mm on the ground) so decimal coordinates
# that conceptually sit on a grid line land on it despite float error.
_EPS = 1e-7

# Snap tolerance for polygon vertices near grid lines; closed-set
# intersection needs "touching" to be decidable.
_SNAP = 1e-6


@dataclass(frozen=True)
class GeoPoint:
    """A WGS-style coordinate; longitude is normalized to [-180, 180)."""

    lat: float
    lng: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lng)):
            raise ValueError("coordinates must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        lng = ((self.lng + 180.0) % 360.0) - 180.0
        object.__setattr__(self, "lng", lng)


@dataclass(frozen=True)
class CellBounds:
    """Half-open extent of one cell: [south, north) x [west, east)."""

    south: float
    west: float
    north: float
    east: float

    def center(self) -> GeoPoint:
        return GeoPoint((self.south + self.north) / 2.0,
                        (self.west + self.east) / 2.0)


# ---- geocode <-> row/col ----


def _lat_to_row(lat: float) -> int:
    row = math.floor((lat + 90.0) * 20.0 + _EPS)
    # lat == 90 falls past the last row; clamp it in
    return min(row, LAT_ROWS - 1)


def _lng_to_col(lng: float) -> int:
    return math.floor((lng + 180.0) * 20.0 + _EPS) % LNG_COLS


def _split(n: int) -> tuple[int, int, int]:
    return n // 400, (n // 20) % 20, n % 20


def _rowcol_to_code(row: int, col: int) -> Geocode:
    a1, a2, a3 = _split(row)
    o1, o2, o3 = _split(col)
    return "".join(
        (ALPHABET[a1], ALPHABET[o1], ALPHABET[a2],
         ALPHABET[o2], ALPHABET[a3], ALPHABET[o3])
    )


def _code_to_rowcol(code: Geocode) -> tuple[int, int]:
    validate_geocode(code)
    d = [_INDEX[ch] for ch in code]
    row = d[0] * 400 + d[2] * 20 + d[4]
    col = d[1] * 400 + d[3] * 20 + d[5]
    return row, col


def validate_geocode(code: Geocode) -> None:
    """Raise ValueError unless `code` names a cell."""
    if not isinstance(code, str):
        raise ValueError(f"geocode must be str, got {type(code).__name__}")
    if len(code) != 6:
        raise ValueError(f"geocode must be 6 characters: {code!r}")
    for ch in code:
        if ch not in _INDEX:
            raise ValueError(f"invalid geocode character {ch!r} in {code!r}")
    # top-level latitude digit spans 180 degrees in 20-degree steps: 9 values
    if _INDEX[code[0]] > 8:
        raise ValueError(f"latitude digit out of range in {code!r}")


def encode(point: GeoPoint) -> Geocode:
    """Geocode of the cell containing `point`."""
    return _rowcol_to_code(_lat_to_row(point.lat), _lng_to_col(point.lng))


def decode(code: Geocode) -> CellBounds:
    """Bounds of the cell named by `code`."""
    row, col = _code_to_rowcol(code)
    # integer hundredths of a degree, divided once, so every bound is the
    # nearest float to its exact decimal value
    return CellBounds((row * 5 - 9000) / 100, (col * 5 - 18000) / 100,
                      (row * 5 - 8995) / 100, (col * 5 - 17995) / 100)


def neighbors(code: Geocode) -> list[Geocode]:
    """The up-to-8 cells adjacent to `code`, sorted.

    Longitude wraps; rows beyond the poles do not exist, so cells in the top
    and bottom rows have 5 neighbors.
    """
    row, col = _code_to_rowcol(code)
    out = []
    for dr in (-1, 0, 1):
        r = row + dr
        if not 0 <= r < LAT_ROWS:
            continue
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            out.append(_rowcol_to_code(r, (col + dc) % LNG_COLS))
    return sorted(out)


def enumerate_all() -> Iterator[Geocode]:
    """All cell geocodes in lexicographic order, starting at '222222'."""
    suffixes = ["".join(t) for t in itertools.product(ALPHABET, repeat=4)]
    for a1 in ALPHABET[:9]:
        for o1 in ALPHABET[:18]:
            prefix = a1 + o1
            for s in suffixes:
                yield prefix + s


# ---- great-circle geometry ----


def _to_xyz(p: GeoPoint) -> tuple[float, float, float]:
    la = math.radians(p.lat)
    lo = math.radians(p.lng)
    return (math.cos(la) * math.cos(lo),
            math.cos(la) * math.sin(lo),
            math.sin(la))


def _from_xyz(x: float, y: float, z: float) -> GeoPoint:
    lat = math.degrees(math.asin(max(-1.0, min(1.0, z))))
    return GeoPoint(lat, math.degrees(math.atan2(y, x)))


def _angle(a: tuple[float, float, float], b: tuple[float, float, float]) -> float:
    dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    return math.acos(max(-1.0, min(1.0, dot)))


def great_circle_m(p: GeoPoint, q: GeoPoint) -> float:
    """Spherical distance in meters (radius 6,371,000 m)."""
    return _angle(_to_xyz(p), _to_xyz(q)) * EARTH_RADIUS_M


def slerp_point(p: GeoPoint, q: GeoPoint, f: float) -> GeoPoint:
    """Point a fraction `f` along the great circle from `p` to `q`."""
    a = _to_xyz(p)
    b = _to_xyz(q)
    omega = _angle(a, b)
    if omega < 1e-12:
        return p
    if math.pi - omega < 1e-9:
        raise ValueError("antipodal leg: great-circle path is ambiguous")
    sa = math.sin((1.0 - f) * omega) / math.sin(omega)
    sb = math.sin(f * omega) / math.sin(omega)
    return _from_xyz(sa * a[0] + sb * b[0],
                     sa * a[1] + sb * b[1],
                     sa * a[2] + sb * b[2])


def cover_route(waypoints: Sequence[GeoPoint],
                step_m: float = DEFAULT_ROUTE_STEP_M) -> list[Geocode]:
    """Cells touched by the great-circle path through `waypoints`.

    Samples each leg every `step_m` meters (including both endpoints), which
    cannot skip a cell: the shortest crossing of any cell exceeds the 1000 m
    step ceiling everywhere a vessel can operate.  Returns first-visit order
    without duplicates.
    """
    if len(waypoints) < 2:
        raise ValueError("route needs at least 2 waypoints")
    if not 0.0 < step_m <= MAX_ROUTE_STEP_M:
        raise ValueError(f"step_m must be in (0, {MAX_ROUTE_STEP_M}]")
    seen: dict[Geocode, None] = {}
    for p, q in zip(waypoints, waypoints[1:]):
        dist = great_circle_m(p, q)
        n = max(1, math.ceil(dist / step_m))
        for i in range(n + 1):
            seen.setdefault(encode(slerp_point(p, q, i / n)))
    return list(seen)


# ---- polygon coverage ----


def _snap(u: float) -> float:
    r = round(u)
    return float(r) if abs(u - r) <= _SNAP else u


def _unwrap(vertices: Sequence[GeoPoint]) -> list[tuple[float, float]]:
    """Vertices as (lat, lng) with longitudes unwrapped into one continuous
    strip, so a ring crossing longitude 180 stays connected."""
    out = [(vertices[0].lat, vertices[0].lng)]
    for v in vertices[1:]:
        prev = out[-1][1]
        lng = v.lng
        while lng - prev > 180.0:
            lng -= 360.0
        while lng - prev < -180.0:
            lng += 360.0
        out.append((v.lat, lng))
    # the implied closing edge must come back to the start; if it is itself
    # displaced by a full turn the ring winds around a pole
    closing = out[0][1]
    last = out[-1][1]
    while closing - last > 180.0:
        closing -= 360.0
    while closing - last < -180.0:
        closing += 360.0
    if abs(closing - out[0][1]) > 1.0:
        raise ValueError("polygon winds around a pole")
    return out


def _orient(ax: float, ay: float, bx: float, by: float,
            cx: float, cy: float) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(px: float, py: float, ax: float, ay: float,
                bx: float, by: float) -> bool:
    if _orient(ax, ay, bx, by, px, py) != 0.0:
        return False
    return (min(ax, bx) <= px <= max(ax, bx)
            and min(ay, by) <= py <= max(ay, by))


def _segments_intersect(ax, ay, bx, by, cx, cy, dx, dy) -> bool:
    """Closed-segment intersection, touching endpoints included."""
    o1 = _orient(ax, ay, bx, by, cx, cy)
    o2 = _orient(ax, ay, bx, by, dx, dy)
    o3 = _orient(cx, cy, dx, dy, ax, ay)
    o4 = _orient(cx, cy, dx, dy, bx, by)
    if ((o1 > 0) != (o2 > 0) and (o1 < 0) != (o2 < 0)
            and (o3 > 0) != (o4 > 0) and (o3 < 0) != (o4 < 0)):
        return True
    return (_on_segment(cx, cy, ax, ay, bx, by)
            or _on_segment(dx, dy, ax, ay, bx, by)
            or _on_segment(ax, ay, cx, cy, dx, dy)
            or _on_segment(bx, by, cx, cy, dx, dy))


def _point_in_ring(px: float, py: float,
                   ring: list[tuple[float, float]]) -> bool:
    """Point in closed polygon: boundary counts as inside."""
    inside = False
    n = len(ring)
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        if _on_segment(px, py, ax, ay, bx, by):
            return True
        if (ay > py) != (by > py):
            xi = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < xi:
                inside = not inside
    return inside


def _rect_touches_ring(col: int, row: int,
                       ring: list[tuple[float, float]]) -> bool:
    x0, y0, x1, y1 = float(col), float(row), float(col + 1), float(row + 1)
    for vx, vy in ring:
        if x0 <= vx <= x1 and y0 <= vy <= y1:
            return True
    for cx, cy in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):
        if _point_in_ring(cx, cy, ring):
            return True
    edges = (((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)),
             ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0)))
    n = len(ring)
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        for (cx, cy), (dx, dy) in edges:
            if _segments_intersect(ax, ay, bx, by, cx, cy, dx, dy):
                return True
    return False


def cover_area(polygon: Sequence[GeoPoint]) -> set[Geocode]:
    """Cells whose closed extent intersects the closed polygon.

    The polygon is a simple ring (closing edge implied; a repeated final
    vertex is tolerated).  Touching counts: a polygon running exactly along
    a grid line covers the cells on both sides.  Rings crossing longitude
    180 are handled; rings containing a pole are rejected.
    """
    verts = list(polygon)
    if len(verts) >= 2 and (verts[0].lat, verts[0].lng) == (verts[-1].lat,
                                                            verts[-1].lng):
        verts = verts[:-1]
    if len(verts) < 3:
        raise ValueError("polygon needs at least 3 distinct vertices")
    for v in verts:
        if abs(v.lat) == 90.0:
            raise ValueError("polygon vertices may not touch a pole")
    unwrapped = _unwrap(verts)
    ring = [(_snap((lng + 180.0) * 20.0), _snap((lat + 90.0) * 20.0))
            for lat, lng in unwrapped]
    area2 = 0.0
    n = len(ring)
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        area2 += ax * by - bx * ay
    if abs(area2) < 1e-9:
        raise ValueError("degenerate polygon: zero area")
    xs = [p[0] for p in ring]
    ys = [p[1] for p in ring]
    row_lo = max(0, math.floor(min(ys)) - 1)
    row_hi = min(LAT_ROWS - 1, math.floor(max(ys)) + 1)
    col_lo = math.floor(min(xs)) - 1
    col_hi = math.floor(max(xs)) + 1
    out: set[Geocode] = set()
    for row in range(row_lo, row_hi + 1):
        for col in range(col_lo, col_hi + 1):
            if _rect_touches_ring(col, row, ring):
                out.add(_rowcol_to_code(row, col % LNG_COLS))
    return out
