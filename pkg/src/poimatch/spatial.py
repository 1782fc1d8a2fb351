"""Geometric kernels: haversine, bounding rectangles, containment, nearest objects.

Distances from a point to many objects are computed in one vectorized pass
over a flat segment table, so the grid-indexed lookup and an exhaustive scan
run literally the same arithmetic and agree bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geodata import GeoObject, GeoPoint, Shape

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_LINE_EPS_M = 5.0
DEFAULT_N = 20
DEFAULT_RADIUS_M = 1000.0
DEFAULT_CELL_DEG = 0.01


class RelationType(enum.IntEnum):
    NEAR = 0
    COVERED = 1


@dataclass(frozen=True)
class Rect:
    left: float
    bottom: float
    right: float
    top: float

    def __post_init__(self) -> None:
        if self.left > self.right or self.bottom > self.top:
            raise ValueError(f"inverted rect {self}")

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.top - self.bottom

    def contains(self, p: GeoPoint) -> bool:
        return self.left <= p.lng <= self.right and self.bottom <= p.lat <= self.top

    def corners(self) -> tuple[GeoPoint, ...]:
        return (
            GeoPoint(self.left, self.bottom),
            GeoPoint(self.right, self.bottom),
            GeoPoint(self.right, self.top),
            GeoPoint(self.left, self.top),
        )

    def padded(self, fraction: float) -> "Rect":
        dx, dy = self.width * fraction, self.height * fraction
        return Rect(
            max(-180.0, self.left - dx),
            max(-90.0, self.bottom - dy),
            min(180.0, self.right + dx),
            min(90.0, self.top + dy),
        )


@dataclass(frozen=True)
class Relation:
    object_id: str
    relation_type: RelationType
    distance: float


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius 6,371 km."""
    return float(_haversine(a.lng, a.lat, np.float64(b.lng), np.float64(b.lat)))


def _haversine(lng0: float, lat0: float, lng: np.ndarray, lat: np.ndarray) -> np.ndarray:
    phi0 = math.radians(lat0)
    phi = np.radians(lat)
    dphi = phi - phi0
    dlmb = np.radians(lng - lng0)
    h = np.sin(dphi / 2.0) ** 2 + math.cos(phi0) * np.cos(phi) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def bounding_rect(o: GeoObject) -> Rect:
    lngs = [v.lng for v in o.vertices]
    lats = [v.lat for v in o.vertices]
    return Rect(min(lngs), min(lats), max(lngs), max(lats))


class SegmentTable:
    """Flat arrays of object edges (closing edge included for polygons)."""

    def __init__(self, objects: Sequence[GeoObject]):
        self.objects = list(objects)
        ax, ay, bx, by, owner = [], [], [], [], []
        starts = np.zeros(len(self.objects) + 1, dtype=np.int64)
        for i, o in enumerate(self.objects):
            v = o.vertices
            pairs = list(zip(v, v[1:]))
            if o.shape is Shape.POLYGON:
                pairs.append((v[-1], v[0]))
            for a, b in pairs:
                ax.append(a.lng)
                ay.append(a.lat)
                bx.append(b.lng)
                by.append(b.lat)
                owner.append(i)
            starts[i + 1] = starts[i] + len(pairs)
        self.ax = np.asarray(ax, dtype=np.float64)
        self.ay = np.asarray(ay, dtype=np.float64)
        self.bx = np.asarray(bx, dtype=np.float64)
        self.by = np.asarray(by, dtype=np.float64)
        self.owner = np.asarray(owner, dtype=np.int64)
        self.starts = starts
        self.is_polygon = np.array([o.shape is Shape.POLYGON for o in self.objects], dtype=bool)

    def _segments_of(self, idx: np.ndarray) -> np.ndarray:
        counts = self.starts[idx + 1] - self.starts[idx]
        offsets = np.repeat(self.starts[idx] - np.cumsum(counts) + counts, counts)
        return offsets + np.arange(int(counts.sum()))

    def measure(self, p: GeoPoint, idx: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Return (distance in meters, inside-polygon flag) per selected object.

        Polygon distance is 0 when the point is inside or on the boundary.
        """
        if idx is None:
            idx = np.arange(len(self.objects), dtype=np.int64)
        if len(idx) == 0:
            return np.zeros(0), np.zeros(0, dtype=bool)
        seg = self._segments_of(idx)
        ax, ay, bx, by = self.ax[seg], self.ay[seg], self.bx[seg], self.by[seg]
        x0, y0 = p.lng, p.lat
        kx = math.cos(math.radians(y0))
        # local equirectangular plane centered at p
        ux, uy = (ax - x0) * kx, ay - y0
        dx, dy = (bx - ax) * kx, by - ay
        dd = dx * dx + dy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dd > 0, -(ux * dx + uy * dy) / dd, 0.0)
        t = np.clip(t, 0.0, 1.0)
        cx = ax + t * (bx - ax)
        cy = ay + t * (by - ay)
        seg_dist = _haversine(x0, y0, cx, cy)

        # even-odd crossings plus exact on-edge test
        with np.errstate(divide="ignore", invalid="ignore"):
            straddle = (ay > y0) != (by > y0)
            x_cross = (bx - ax) * (y0 - ay) / (by - ay) + ax
            crossing = straddle & (x0 < x_cross)
        cross = (bx - ax) * (y0 - ay) - (by - ay) * (x0 - ax)
        on_edge = (
            (cross == 0)
            & (np.minimum(ax, bx) <= x0) & (x0 <= np.maximum(ax, bx))
            & (np.minimum(ay, by) <= y0) & (y0 <= np.maximum(ay, by))
        )

        group_starts = np.concatenate(([0], np.cumsum(self.starts[idx + 1] - self.starts[idx])[:-1]))
        dist = np.minimum.reduceat(seg_dist, group_starts)
        parity = np.add.reduceat(crossing.astype(np.int64), group_starts) % 2 == 1
        edge = np.logical_or.reduceat(on_edge, group_starts)
        inside = self.is_polygon[idx] & (parity | edge)
        dist = np.where(inside, 0.0, dist)
        return dist, inside


def point_in_polygon(p: GeoPoint, o: GeoObject) -> bool:
    """Even-odd containment in the lng/lat plane; boundary points count as inside."""
    if o.shape is not Shape.POLYGON:
        raise ValueError(f"object {o.id!r} is a {o.shape.name}, not a POLYGON")
    _, inside = SegmentTable([o]).measure(p)
    return bool(inside[0])


def point_to_object_distance(p: GeoPoint, o: GeoObject) -> float:
    dist, _ = SegmentTable([o]).measure(p)
    return float(dist[0])


def relation_type(p: GeoPoint, o: GeoObject, line_eps: float = DEFAULT_LINE_EPS_M) -> RelationType:
    if line_eps < 0:
        raise ValueError("line_eps must be >= 0")
    dist, inside = SegmentTable([o]).measure(p)
    return _classify(o.shape, float(dist[0]), bool(inside[0]), line_eps)[0]


def _classify(shape: Shape, dist: float, inside: bool, line_eps: float) -> tuple[RelationType, float]:
    if shape is Shape.POLYGON:
        covered = inside
    else:
        covered = dist <= line_eps
    if covered:
        return RelationType.COVERED, 0.0
    return RelationType.NEAR, dist


def _rank(
    objects: Sequence[GeoObject], idx: np.ndarray, dist: np.ndarray, inside: np.ndarray,
    n: int, radius: float, line_eps: float,
) -> list[Relation]:
    rels = []
    for i, d, ins in zip(idx.tolist(), dist.tolist(), inside.tolist()):
        o = objects[i]
        rt, d = _classify(o.shape, d, ins, line_eps)
        if d <= radius:
            rels.append(Relation(o.id, rt, d))
    rels.sort(key=lambda r: (r.distance, r.object_id))
    return rels[:n]


class SpatialIndex:
    """Uniform lng/lat grid over object bounding rectangles."""

    def __init__(self, objects: Iterable[GeoObject], cell_deg: float = DEFAULT_CELL_DEG):
        if cell_deg <= 0:
            raise ValueError("cell_deg must be positive")
        self.cell_deg = cell_deg
        # sorted by id so the table layout does not depend on insertion order
        self.objects = sorted(objects, key=lambda o: o.id)
        self.rects = [bounding_rect(o) for o in self.objects]
        self.position = {o.id: i for i, o in enumerate(self.objects)}
        self.table = SegmentTable(self.objects)
        self.cells: dict[tuple[int, int], list[int]] = {}
        for i, r in enumerate(self.rects):
            for key in self._cells_over(r.left, r.bottom, r.right, r.top):
                self.cells.setdefault(key, []).append(i)

    def __len__(self) -> int:
        return len(self.objects)

    def _cells_over(self, left: float, bottom: float, right: float, top: float):
        c = self.cell_deg
        for ix in range(math.floor(left / c), math.floor(right / c) + 1):
            for iy in range(math.floor(bottom / c), math.floor(top / c) + 1):
                yield ix, iy

    def candidates(self, p: GeoPoint, radius: float) -> np.ndarray:
        dlat = math.degrees(radius / EARTH_RADIUS_M) * 1.01 + 1e-9
        bottom, top = max(-90.0, p.lat - dlat), min(90.0, p.lat + dlat)
        cos_min = math.cos(math.radians(max(abs(bottom), abs(top))))
        if cos_min < 1e-6:
            dlng = 360.0
        else:
            ratio = math.sin(radius / (2 * EARTH_RADIUS_M)) / cos_min
            dlng = 360.0 if ratio >= 1 else math.degrees(2 * math.asin(ratio)) * 1.01 + 1e-9
        left, right = max(-180.0, p.lng - dlng), min(180.0, p.lng + dlng)
        found: set[int] = set()
        for key in self._cells_over(left, bottom, right, top):
            found.update(self.cells.get(key, ()))
        return np.array(sorted(found), dtype=np.int64)

    def nearby(
        self, p: GeoPoint, n: int = DEFAULT_N, radius: float = DEFAULT_RADIUS_M,
        line_eps: float = DEFAULT_LINE_EPS_M,
    ) -> list[Relation]:
        if n < 1 or radius <= 0:
            raise ValueError("need n >= 1 and radius > 0")
        idx = self.candidates(p, radius)
        dist, inside = self.table.measure(p, idx)
        return _rank(self.objects, idx, dist, inside, n, radius, line_eps)

    def brute_force(
        self, p: GeoPoint, n: int = DEFAULT_N, radius: float = DEFAULT_RADIUS_M,
        line_eps: float = DEFAULT_LINE_EPS_M,
    ) -> list[Relation]:
        """Exhaustive scan over every object, without the grid."""
        idx = np.arange(len(self.objects), dtype=np.int64)
        dist, inside = self.table.measure(p, idx)
        return _rank(self.objects, idx, dist, inside, n, radius, line_eps)


def nearby_objects(
    p: GeoPoint, index: SpatialIndex, n: int = DEFAULT_N, radius: float = DEFAULT_RADIUS_M,
    line_eps: float = DEFAULT_LINE_EPS_M,
) -> list[Relation]:
    return index.nearby(p, n=n, radius=radius, line_eps=line_eps)
