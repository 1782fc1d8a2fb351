"""Data model and line-delimited corpus files.

A corpus directory holds four files, one JSON record per line:

``objects.jl``  ``{"id", "shape", "vertices": [lng, lat, lng, lat, ...]}``
``pois.jl``     ``{"id", "text", "lng", "lat"}``
``queries.jl``  ``{"id", "text", "lng", "lat", "type", "candidates", "gold"}``
``splits.jl``   ``{"split", "query_ids"}``

Query ``lng``/``lat`` are ``null`` when the query carries no geolocation.
Coordinates are written with the shortest round-trip representation, padded
to at least six fractional digits, so saving is byte-stable and loading
recovers the exact float.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

OBJECTS_FILE = "objects.jl"
POIS_FILE = "pois.jl"
QUERIES_FILE = "queries.jl"
SPLITS_FILE = "splits.jl"
CORPUS_FILES = (OBJECTS_FILE, POIS_FILE, QUERIES_FILE, SPLITS_FILE)


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus data."""


class Shape(enum.IntEnum):
    LINE = 0
    POLYGON = 1


class QueryType(enum.Enum):
    ADDRESS = "ADDRESS"
    STREET_NO = "STREET_NO"
    COLLOQUIAL = "COLLOQUIAL"


@dataclass(frozen=True, order=True)
class GeoPoint:
    lng: float
    lat: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lng) and math.isfinite(self.lat)):
            raise CorpusError(f"non-finite coordinate ({self.lng}, {self.lat})")
        if not -180.0 <= self.lng <= 180.0:
            raise CorpusError(f"longitude out of range: {self.lng}")
        if not -90.0 <= self.lat <= 90.0:
            raise CorpusError(f"latitude out of range: {self.lat}")


@dataclass(frozen=True)
class GeoObject:
    id: str
    shape: Shape
    vertices: tuple[GeoPoint, ...]

    def __post_init__(self) -> None:
        verts = tuple(self.vertices)
        # an explicitly repeated closing vertex is dropped
        if self.shape is Shape.POLYGON and len(verts) > 1 and verts[0] == verts[-1]:
            verts = verts[:-1]
        object.__setattr__(self, "vertices", verts)
        minimum = 3 if self.shape is Shape.POLYGON else 2
        if len(verts) < minimum:
            raise CorpusError(
                f"object {self.id!r}: {self.shape.name} needs >= {minimum} vertices, got {len(verts)}"
            )
        for a, b in zip(verts, verts[1:]):
            if a == b:
                raise CorpusError(f"object {self.id!r}: duplicate consecutive vertex {a}")


@dataclass(frozen=True)
class Poi:
    id: str
    text: str
    location: GeoPoint

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise CorpusError(f"poi {self.id!r}: empty text")


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    location: GeoPoint | None
    query_type: QueryType
    candidates: tuple[str, ...]
    gold: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.text.strip():
            raise CorpusError(f"query {self.id!r}: empty text")
        if self.candidates and self.gold not in self.candidates:
            raise CorpusError(f"query {self.id!r}: gold not in candidates")


@dataclass(frozen=True)
class CorpusBundle:
    objects: tuple[GeoObject, ...] = ()
    pois: tuple[Poi, ...] = ()
    queries: tuple[Query, ...] = ()
    splits: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "pois", tuple(self.pois))
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "splits", {k: tuple(v) for k, v in self.splits.items()})
        self.validate()

    def validate(self) -> None:
        _unique("object", (o.id for o in self.objects))
        poi_ids = _unique("poi", (p.id for p in self.pois))
        query_ids = _unique("query", (q.id for q in self.queries))
        for q in self.queries:
            if q.gold not in poi_ids:
                raise CorpusError(f"query {q.id!r}: dangling gold id {q.gold!r}")
            for c in q.candidates:
                if c not in poi_ids:
                    raise CorpusError(f"query {q.id!r}: dangling candidate id {c!r}")
        seen: dict[str, str] = {}
        for name, ids in self.splits.items():
            for qid in ids:
                if qid not in query_ids:
                    raise CorpusError(f"split {name!r}: dangling query id {qid!r}")
                if qid in seen:
                    raise CorpusError(f"query {qid!r} in both {seen[qid]!r} and {name!r} splits")
                seen[qid] = name

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.objects), len(self.pois), len(self.queries)

    def poi_by_id(self) -> dict[str, Poi]:
        return {p.id: p for p in self.pois}

    def object_by_id(self) -> dict[str, GeoObject]:
        return {o.id: o for o in self.objects}

    def split_queries(self, name: str) -> list[Query]:
        by_id = {q.id: q for q in self.queries}
        return [by_id[qid] for qid in self.splits.get(name, ())]


def _unique(kind: str, ids: Iterable[str]) -> set[str]:
    out: set[str] = set()
    for i in ids:
        if i in out:
            raise CorpusError(f"duplicate {kind} id {i!r}")
        out.add(i)
    return out


# -- serialization -----------------------------------------------------------


def format_coord(x: float) -> str:
    """Shortest exact decimal for ``x`` with at least six fractional digits."""
    s = format(Decimal(repr(float(x))), "f")
    whole, _, frac = s.partition(".")
    return f"{whole}.{frac.ljust(6, '0')}"


def _coords(values: Sequence[float]) -> str:
    return "[" + ", ".join(format_coord(v) for v in values) + "]"


def _str(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def object_line(o: GeoObject) -> str:
    flat = [c for v in o.vertices for c in (v.lng, v.lat)]
    return f'{{"id": {_str(o.id)}, "shape": {_str(o.shape.name)}, "vertices": {_coords(flat)}}}'


def poi_line(p: Poi) -> str:
    return (
        f'{{"id": {_str(p.id)}, "text": {_str(p.text)}, '
        f'"lng": {format_coord(p.location.lng)}, "lat": {format_coord(p.location.lat)}}}'
    )


def query_line(q: Query) -> str:
    if q.location is None:
        lng = lat = "null"
    else:
        lng, lat = format_coord(q.location.lng), format_coord(q.location.lat)
    cands = "[" + ", ".join(_str(c) for c in q.candidates) + "]"
    return (
        f'{{"id": {_str(q.id)}, "text": {_str(q.text)}, "lng": {lng}, "lat": {lat}, '
        f'"type": {_str(q.query_type.value)}, "candidates": {cands}, "gold": {_str(q.gold)}}}'
    )


def split_line(name: str, ids: Sequence[str]) -> str:
    return f'{{"split": {_str(name)}, "query_ids": [' + ", ".join(_str(i) for i in ids) + "]}"


def save_corpus(bundle: CorpusBundle, directory: str | Path) -> None:
    """Write the four corpus files into ``directory`` (created if missing)."""
    bundle.validate()
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        _write_lines(d / OBJECTS_FILE, (object_line(o) for o in bundle.objects))
        _write_lines(d / POIS_FILE, (poi_line(p) for p in bundle.pois))
        _write_lines(d / QUERIES_FILE, (query_line(q) for q in bundle.queries))
        _write_lines(d / SPLITS_FILE, (split_line(k, v) for k, v in bundle.splits.items()))
    except OSError as exc:
        raise CorpusError(f"cannot write corpus to {d}: {exc}") from exc


def _write_lines(path: Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


# -- parsing -----------------------------------------------------------------


def _records(path: Path) -> Iterator[tuple[int, dict]]:
    if not path.exists():
        raise CorpusError(f"missing corpus file {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path.name}:{lineno}: malformed record ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CorpusError(f"{path.name}:{lineno}: record is not an object")
            yield lineno, rec


def _point(lng, lat, where: str) -> GeoPoint:
    if isinstance(lng, bool) or isinstance(lat, bool) or not isinstance(lng, (int, float)) or not isinstance(lat, (int, float)):
        raise CorpusError(f"{where}: coordinates must be numbers")
    try:
        return GeoPoint(float(lng), float(lat))
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def parse_object(rec: dict, where: str) -> GeoObject:
    try:
        flat = rec["vertices"]
        shape = Shape[rec["shape"]]
        oid = str(rec["id"])
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"{where}: bad object record ({exc})") from None
    if not isinstance(flat, list) or len(flat) % 2:
        raise CorpusError(f"{where}: vertices must be a flat even-length lng/lat list")
    verts = tuple(_point(flat[i], flat[i + 1], where) for i in range(0, len(flat), 2))
    try:
        return GeoObject(oid, shape, verts)
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def parse_poi(rec: dict, where: str) -> Poi:
    try:
        loc = _point(rec["lng"], rec["lat"], where)
        return Poi(str(rec["id"]), str(rec["text"]), loc)
    except KeyError as exc:
        raise CorpusError(f"{where}: missing field {exc}") from None
    except CorpusError as exc:
        msg = str(exc)
        raise CorpusError(msg if msg.startswith(where) else f"{where}: {msg}") from None


def parse_query(rec: dict, where: str) -> Query:
    try:
        lng, lat = rec.get("lng"), rec.get("lat")
        loc = None if lng is None and lat is None else _point(lng, lat, where)
        return Query(
            id=str(rec["id"]),
            text=str(rec["text"]),
            location=loc,
            query_type=QueryType(rec["type"]),
            candidates=tuple(str(c) for c in rec.get("candidates", [])),
            gold=str(rec["gold"]),
        )
    except KeyError as exc:
        raise CorpusError(f"{where}: missing field {exc}") from None
    except ValueError as exc:
        msg = str(exc)
        raise CorpusError(msg if msg.startswith(where) else f"{where}: {msg}") from None


def load_corpus(directory: str | Path) -> CorpusBundle:
    """Parse and cross-reference the four corpus files under ``directory``."""
    d = Path(directory)
    objects = [parse_object(r, f"{OBJECTS_FILE}:{n}") for n, r in _records(d / OBJECTS_FILE)]
    pois = [parse_poi(r, f"{POIS_FILE}:{n}") for n, r in _records(d / POIS_FILE)]
    queries = [parse_query(r, f"{QUERIES_FILE}:{n}") for n, r in _records(d / QUERIES_FILE)]
    splits: dict[str, tuple[str, ...]] = {}
    for n, r in _records(d / SPLITS_FILE):
        try:
            splits[str(r["split"])] = tuple(str(i) for i in r["query_ids"])
        except (KeyError, TypeError) as exc:
            raise CorpusError(f"{SPLITS_FILE}:{n}: bad split record ({exc})") from None
    return CorpusBundle(objects, pois, queries, splits)
