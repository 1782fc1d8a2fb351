"""Discrete geographic-context features for a geolocation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .geodata import CorpusBundle, GeoPoint, Shape, format_coord
from .spatial import (
    DEFAULT_LINE_EPS_M,
    DEFAULT_N,
    DEFAULT_RADIUS_M,
    Rect,
    SpatialIndex,
    nearby_objects,
)

DEFAULT_K = 10
DEFAULT_GRID_N = 2000
DEFAULT_ID_VOCAB = 50_021
MIN_SPAN_DEG = 1e-9
SIDES = ("left", "bottom", "right", "top")


@dataclass(frozen=True)
class GcConfig:
    map_bounds: Rect
    k: int = DEFAULT_K
    grid_n: int = DEFAULT_GRID_N
    n_max: int = DEFAULT_N
    radius: float = DEFAULT_RADIUS_M
    line_eps: float = DEFAULT_LINE_EPS_M
    id_vocab: int = DEFAULT_ID_VOCAB

    def __post_init__(self) -> None:
        if self.k < 1 or self.grid_n < 1 or self.n_max < 1 or self.id_vocab < 1:
            raise ValueError("k, grid_n, n_max and id_vocab must be >= 1")
        if self.map_bounds.width <= 0 or self.map_bounds.height <= 0:
            raise ValueError("map_bounds must have positive width and height")
        if self.radius <= 0 or self.line_eps < 0:
            raise ValueError("radius must be > 0 and line_eps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["map_bounds"] = [self.map_bounds.left, self.map_bounds.bottom, self.map_bounds.right, self.map_bounds.top]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GcConfig":
        d = dict(d)
        d["map_bounds"] = Rect(*d["map_bounds"])
        return cls(**d)


@dataclass(frozen=True)
class ObjectFeatures:
    object_id: str
    object_id_code: int
    shape_code: int
    relation_code: int
    rel_pos_codes: tuple[int, int, int, int]
    grid_codes: tuple[int, int, int, int]

    def codes(self) -> tuple[int, ...]:
        """The 11 categorical targets: relation, id, shape, 4 rel-pos, 4 grid."""
        return (self.relation_code, self.object_id_code, self.shape_code, *self.rel_pos_codes, *self.grid_codes)


@dataclass(frozen=True)
class GCRecord:
    anchor: GeoPoint
    objects: tuple[ObjectFeatures, ...]

    def __len__(self) -> int:
        return len(self.objects)


def hash_object_id(object_id: str, vocab: int = DEFAULT_ID_VOCAB) -> int:
    digest = hashlib.blake2b(object_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab


def _sgn(x: float) -> int:
    return int(x > 0) - int(x < 0)


def _side_code(offset: float, span: float, k: int) -> int:
    span = max(span, MIN_SPAN_DEG)
    return _sgn(offset) * min(k, math.floor(k * abs(offset) / span)) + k


def relative_position(p: GeoPoint, rect: Rect, k: int = DEFAULT_K) -> tuple[int, int, int, int]:
    """Signed, capped, floored offsets of ``p`` from each rectangle side, shifted into [0, 2k]."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return (
        _side_code(p.lng - rect.left, rect.width, k),
        _side_code(p.lat - rect.bottom, rect.height, k),
        _side_code(p.lng - rect.right, rect.width, k),
        _side_code(p.lat - rect.top, rect.height, k),
    )


def map_scale(map_bounds: Rect, grid_n: int = DEFAULT_GRID_N) -> tuple[float, float]:
    if map_bounds.width <= 0 or map_bounds.height <= 0:
        raise ValueError(f"degenerate map bounds {map_bounds}")
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    return map_bounds.width / grid_n, map_bounds.height / grid_n


def map_grid_position(
    rect: Rect, scale: tuple[float, float], map_bounds: Rect, grid_n: int = DEFAULT_GRID_N
) -> tuple[int, int, int, int]:
    s_lng, s_lat = scale

    def cell(value: float, origin: float, s: float) -> int:
        return min(grid_n - 1, max(0, math.floor((value - origin) / s)))

    return (
        cell(rect.left, map_bounds.left, s_lng),
        cell(rect.bottom, map_bounds.bottom, s_lat),
        cell(rect.right, map_bounds.left, s_lng),
        cell(rect.top, map_bounds.bottom, s_lat),
    )


def extract_gc(p: GeoPoint, index: SpatialIndex, cfg: GcConfig) -> GCRecord:
    scale = map_scale(cfg.map_bounds, cfg.grid_n)
    feats = []
    for rel in nearby_objects(p, index, n=cfg.n_max, radius=cfg.radius, line_eps=cfg.line_eps):
        i = index.position[rel.object_id]
        obj, rect = index.objects[i], index.rects[i]
        feats.append(
            ObjectFeatures(
                object_id=obj.id,
                object_id_code=hash_object_id(obj.id, cfg.id_vocab),
                shape_code=int(obj.shape),
                relation_code=int(rel.relation_type),
                rel_pos_codes=relative_position(p, rect, cfg.k),
                grid_codes=map_grid_position(rect, scale, cfg.map_bounds, cfg.grid_n),
            )
        )
    return GCRecord(p, tuple(feats))


def corpus_map_bounds(bundle: CorpusBundle, pad: float = 0.01) -> Rect:
    """Bounding box of every coordinate in the corpus, padded by ``pad`` of each span."""
    lngs: list[float] = []
    lats: list[float] = []
    for o in bundle.objects:
        lngs.extend(v.lng for v in o.vertices)
        lats.extend(v.lat for v in o.vertices)
    for p in bundle.pois:
        lngs.append(p.location.lng)
        lats.append(p.location.lat)
    for q in bundle.queries:
        if q.location is not None:
            lngs.append(q.location.lng)
            lats.append(q.location.lat)
    if not lngs:
        raise ValueError("corpus has no coordinates")
    rect = Rect(min(lngs), min(lats), max(lngs), max(lats))
    if rect.width <= 0 or rect.height <= 0:
        c = GeoPoint((rect.left + rect.right) / 2, (rect.bottom + rect.top) / 2)
        rect = Rect(c.lng - 0.005, c.lat - 0.005, c.lng + 0.005, c.lat + 0.005)
    return rect.padded(pad)


# -- cache file --------------------------------------------------------------


def record_to_json(entity_id: str, record: GCRecord, key: str = "") -> str:
    objs = ", ".join(
        "[" + ", ".join([json.dumps(f.object_id), *(str(c) for c in f.codes())]) + "]"
        for f in record.objects
    )
    return (
        f'{{"id": {json.dumps(entity_id)}, "key": {json.dumps(key)}, '
        f'"lng": {format_coord(record.anchor.lng)}, "lat": {format_coord(record.anchor.lat)}, '
        f'"objects": [{objs}]}}'
    )


def record_from_json(line: str) -> tuple[str, str, GCRecord]:
    rec = json.loads(line)
    feats = []
    for row in rec["objects"]:
        oid, rel, code, shape, *rest = row
        feats.append(
            ObjectFeatures(
                object_id=oid,
                object_id_code=int(code),
                shape_code=int(shape),
                relation_code=int(rel),
                rel_pos_codes=tuple(int(c) for c in rest[:4]),
                grid_codes=tuple(int(c) for c in rest[4:8]),
            )
        )
    return rec["id"], rec.get("key", ""), GCRecord(GeoPoint(rec["lng"], rec["lat"]), tuple(feats))


def check_codes(record: GCRecord, cfg: GcConfig) -> None:
    for f in record.objects:
        if f.shape_code not in (Shape.LINE, Shape.POLYGON) or f.relation_code not in (0, 1):
            raise ValueError(f"bad categorical code in {f}")
        if not all(0 <= c <= 2 * cfg.k for c in f.rel_pos_codes):
            raise ValueError(f"rel_pos code out of range in {f}")
        if not all(0 <= c < cfg.grid_n for c in f.grid_codes):
            raise ValueError(f"grid code out of range in {f}")


def extract_many(points: Iterable[tuple[str, GeoPoint]], index: SpatialIndex, cfg: GcConfig) -> dict[str, GCRecord]:
    return {eid: extract_gc(p, index, cfg) for eid, p in points}


def object_ids(record: GCRecord) -> Sequence[str]:
    return [f.object_id for f in record.objects]
