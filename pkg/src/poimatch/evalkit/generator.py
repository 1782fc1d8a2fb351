"""Synthetic grid-city benchmark with name collisions as hard negatives.

The city holds road segments (LINE) and blocks (POLYGON). POI text is only
``name category``; queries describe the gold POI through the names of its
nearest road and region, which the POI text never contains. Chain POIs share
their whole text and are spread over separate grid cells, so text alone
cannot tell them apart while geography can.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geodata import CorpusBundle, GeoObject, GeoPoint, Poi, Query, QueryType, Shape
from ..rng import stream
from ..spatial import EARTH_RADIUS_M, Rect, SegmentTable, haversine

M_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0

_ONSETS = ("b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "ch", "sh", "x")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ao", "en", "an", "ing")
ROAD_SUFFIXES = ("road", "street", "avenue", "lane")
REGION_SUFFIXES = ("plaza", "park", "garden", "estate", "center", "village")
CATEGORIES = ("cafe", "bank", "hotel", "pharmacy", "restaurant", "bookstore", "clinic", "bakery", "gym", "market")
SYNONYMS = {
    "cafe": "coffee", "bank": "atm", "hotel": "inn", "pharmacy": "drugstore", "restaurant": "diner",
    "bookstore": "books", "clinic": "doctor", "bakery": "bread", "gym": "fitness", "market": "grocery",
    "road": "rd", "street": "st", "avenue": "ave", "lane": "ln",
}
FILLERS = ("um", "like", "that", "the", "please", "where", "is", "uh", "find", "near")


class GenSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GenSpec:
    bounds: Rect = field(default_factory=lambda: Rect(120.10, 30.20, 120.18, 30.28))
    n_lines: int = 40
    n_polygons: int = 60
    n_pois: int = 500
    n_queries: int = 2000
    type_mix: tuple[float, float, float] = (0.90, 0.07, 0.03)
    collision_rate: float = 0.4
    chain_size: int = 8
    near_fraction: float = 0.5
    near_radius_m: float = 1000.0
    train_candidates: int = 20
    eval_candidates: int = 40
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 17

    def __post_init__(self) -> None:
        for name in ("collision_rate", "near_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GenSpecError(f"{name} must be in [0, 1], got {v}")
        for name in ("n_lines", "n_polygons", "n_pois", "n_queries", "train_candidates", "eval_candidates"):
            if getattr(self, name) < 1:
                raise GenSpecError(f"{name} must be >= 1")
        if self.chain_size < 2:
            raise GenSpecError("chain_size must be >= 2")
        if len(self.type_mix) != 3 or min(self.type_mix) < 0 or not math.isclose(sum(self.type_mix), 1.0):
            raise GenSpecError("type_mix must be three non-negative fractions summing to 1")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 or not math.isclose(sum(self.split_fractions), 1.0):
            raise GenSpecError("split_fractions must be three non-negative fractions summing to 1")
        if self.bounds.width <= 0 or self.bounds.height <= 0:
            raise GenSpecError("bounds must be non-degenerate")

    @property
    def n_colliding(self) -> int:
        return int(round(self.collision_rate * self.n_pois))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [self.bounds.left, self.bounds.bottom, self.bounds.right, self.bounds.top]
        d["type_mix"] = list(self.type_mix)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = Rect(*d["bounds"])
        for key in ("type_mix", "split_fractions"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise GenSpecError(f"unknown GenSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CityFacts:
    """Generator-side ground truth used by scripted oracles."""

    names: dict[str, str]  # object id -> name
    poi_name: dict[str, str]
    poi_category: dict[str, str]
    address: dict[str, tuple[str, str, int]]  # poi id -> (nearest road id, nearest region id, house number)


def _words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < count:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(int(rng.integers(2, 4))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _offset(p: GeoPoint, east_m: float, north_m: float) -> tuple[float, float]:
    return (p.lng + east_m / (M_PER_DEG * math.cos(math.radians(p.lat))), p.lat + north_m / M_PER_DEG)


def _clamp(lng: float, lat: float, b: Rect) -> GeoPoint:
    return GeoPoint(min(max(lng, b.left), b.right), min(max(lat, b.bottom), b.top))


def _uniform(rng: np.random.Generator, b: Rect) -> GeoPoint:
    return GeoPoint(b.left + rng.random() * b.width, b.bottom + rng.random() * b.height)


def _roads(rng, spec: GenSpec) -> list[GeoObject]:
    out = []
    b = spec.bounds
    for i in range(spec.n_lines):
        start = _uniform(rng, b)
        length = rng.uniform(1500.0, 3500.0)
        horizontal = rng.random() < 0.5
        bend = rng.uniform(-60.0, 60.0)
        if horizontal:
            pts = [_offset(start, 0, 0), _offset(start, length / 2, bend), _offset(start, length, 0)]
        else:
            pts = [_offset(start, 0, 0), _offset(start, bend, length / 2), _offset(start, 0, length)]
        verts = []
        for lng, lat in pts:
            v = _clamp(lng, lat, b)
            if not verts or v != verts[-1]:
                verts.append(v)
        if len(verts) < 2:
            verts = [start, _clamp(*_offset(start, -length, 0), b)]
        out.append(GeoObject(f"line-{i:03d}", Shape.LINE, tuple(verts)))
    return out


def _regions(rng, spec: GenSpec) -> list[GeoObject]:
    out = []
    b = spec.bounds
    for i in range(spec.n_polygons):
        c = _uniform(rng, b)
        radius = rng.uniform(120.0, 380.0)
        m = int(rng.integers(4, 7))
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=m))
        verts = []
        for a in angles:
            r = radius * rng.uniform(0.7, 1.0)
            v = _clamp(*_offset(c, r * math.cos(a), r * math.sin(a)), b)
            if not verts or v != verts[-1]:
                verts.append(v)
        if len(verts) > 1 and verts[0] == verts[-1]:
            verts.pop()
        if len(verts) < 3:
            verts = [GeoPoint(*_offset(c, -radius, -radius)), GeoPoint(*_offset(c, radius, -radius)), GeoPoint(*_offset(c, 0, radius))]
        out.append(GeoObject(f"poly-{i:03d}", Shape.POLYGON, tuple(verts)))
    return out


def _chain_groups(spec: GenSpec) -> list[int]:
    n = spec.n_colliding
    if n > spec.n_pois:
        raise GenSpecError(f"infeasible spec: {n} colliding POIs but only {spec.n_pois} POIs")
    if n == 0:
        return []
    if n < 2:
        raise GenSpecError("collision_rate too small to form a collision pair")
    sizes = [spec.chain_size] * (n // spec.chain_size)
    rest = n % spec.chain_size
    if rest >= 2:
        sizes.append(rest)
    elif rest == 1:
        if sizes:
            sizes[-1] += 1
        else:
            raise GenSpecError("collision_rate too small to form a collision pair")
    return sizes


def _chain_locations(rng, spec: GenSpec, size: int) -> list[GeoPoint]:
    """One location per member, each in the central fifth of a distinct grid cell."""
    g = math.ceil(math.sqrt(size))
    cells = rng.permutation(g * g)[:size]
    b = spec.bounds
    cw, ch = b.width / g, b.height / g
    out = []
    for c in cells:
        ix, iy = int(c) % g, int(c) // g
        lng = b.left + (ix + 0.4 + 0.2 * rng.random()) * cw
        lat = b.bottom + (iy + 0.4 + 0.2 * rng.random()) * ch
        out.append(GeoPoint(lng, lat))
    return out


def _nearest(table: SegmentTable, p: GeoPoint, shape: Shape) -> tuple[str, float]:
    dist, _ = table.measure(p)
    best = None
    for o, d in zip(table.objects, dist.tolist()):
        if o.shape is shape and (best is None or (d, o.id) < best):
            best = (d, o.id)
    return best[1], best[0]


def house_number(road: GeoObject, p: GeoPoint) -> int:
    return 1 + int(haversine(road.vertices[0], p) // 25.0)


def _colloquial(rng, words: list[str]) -> str:
    out = []
    for w in words:
        if w in SYNONYMS and rng.random() < 0.5:
            w = SYNONYMS[w]
        out.append(w)
        if rng.random() < 0.3:
            out.append(str(rng.choice(FILLERS)))
    return " ".join([str(rng.choice(FILLERS)), *out])


def generate_benchmark(spec: GenSpec, with_facts: bool = False):
    """Build a CorpusBundle (and optionally the generator's ground-truth facts)."""
    sizes = _chain_groups(spec)
    geo_rng = stream(spec.seed, "gen.geometry")
    name_rng = stream(spec.seed, "gen.names")
    poi_rng = stream(spec.seed, "gen.pois")
    q_rng = stream(spec.seed, "gen.queries")

    taken: set[str] = set()
    roads = _roads(geo_rng, spec)
    regions = _regions(geo_rng, spec)
    objects = roads + regions
    names = {}
    for o, w in zip(roads, _words(name_rng, len(roads), taken)):
        names[o.id] = f"{w} {name_rng.choice(ROAD_SUFFIXES)}"
    for o, w in zip(regions, _words(name_rng, len(regions), taken)):
        names[o.id] = f"{w} {name_rng.choice(REGION_SUFFIXES)}"

    # POI placement: chains first, then unique names
    placed: list[tuple[GeoPoint, str, str]] = []
    chain_words = _words(name_rng, len(sizes), taken)
    for size, word in zip(sizes, chain_words):
        cat = str(name_rng.choice(CATEGORIES))
        for loc in _chain_locations(poi_rng, spec, size):
            placed.append((loc, word, cat))
    n_unique = spec.n_pois - len(placed)
    for w1, w2 in zip(_words(name_rng, n_unique, taken), _words(name_rng, n_unique, taken)):
        placed.append((_uniform(poi_rng, spec.bounds), f"{w1} {w2}", str(name_rng.choice(CATEGORIES))))
    order = poi_rng.permutation(len(placed))
    table = SegmentTable(objects)
    by_id = {o.id: o for o in objects}
    pois, poi_name, poi_cat, address = [], {}, {}, {}
    for rank, j in enumerate(order):
        loc, name, cat = placed[int(j)]
        pid = f"poi-{rank:04d}"
        pois.append(Poi(pid, f"{name} {cat}", loc))
        poi_name[pid], poi_cat[pid] = name, cat
        road_id, _ = _nearest(table, loc, Shape.LINE)
        region_id, _ = _nearest(table, loc, Shape.POLYGON)
        address[pid] = (road_id, region_id, house_number(by_id[road_id], loc))

    same_name: dict[str, list[str]] = {}
    for p in pois:
        same_name.setdefault(poi_name[p.id], []).append(p.id)

    # splits decided up front: candidate list size depends on the split
    split_names = ("train", "dev", "test")
    counts = [int(round(f * spec.n_queries)) for f in spec.split_fractions]
    counts[0] = spec.n_queries - counts[1] - counts[2]
    split_of = []
    for name, c in zip(split_names, counts):
        split_of.extend([name] * c)
    split_of = [split_of[int(i)] for i in q_rng.permutation(spec.n_queries)]

    types = (QueryType.ADDRESS, QueryType.STREET_NO, QueryType.COLLOQUIAL)
    all_ids = [p.id for p in pois]
    poi_by_id = {p.id: p for p in pois}
    queries = []
    splits: dict[str, list[str]] = {n: [] for n in split_names}
    for qi in range(spec.n_queries):
        gold = all_ids[int(q_rng.integers(len(all_ids)))]
        gp = poi_by_id[gold].location
        qtype = types[int(q_rng.choice(3, p=list(spec.type_mix)))]
        if q_rng.random() < spec.near_fraction:
            r = spec.near_radius_m * math.sqrt(q_rng.random())
            a = q_rng.uniform(0, 2 * math.pi)
            loc = _clamp(*_offset(gp, r * math.cos(a), r * math.sin(a)), spec.bounds)
        else:
            loc = _uniform(q_rng, spec.bounds)
        road_id, region_id, number = address[gold]
        road, region = names[road_id], names[region_id]
        if qtype is QueryType.ADDRESS:
            parts = [region, road, poi_name[gold]]
            if q_rng.random() < 0.5:
                parts.append(poi_cat[gold])
            text = " ".join(parts)
        elif qtype is QueryType.STREET_NO:
            text = f"{road} no {number}"
        else:
            text = _colloquial(q_rng, f"{poi_name[gold]} {poi_cat[gold]} near {road}".split())
        size = spec.train_candidates if split_of[qi] == "train" else spec.eval_candidates
        cands = [gold] + [c for c in same_name[poi_name[gold]] if c != gold][: size - 1]
        pool = [c for c in all_ids if c not in set(cands)]
        extra = max(0, min(size - len(cands), len(pool)))
        if extra:
            cands += [pool[int(i)] for i in q_rng.choice(len(pool), size=extra, replace=False)]
        cands = [cands[int(i)] for i in q_rng.permutation(len(cands))]
        qid = f"q-{qi:05d}"
        queries.append(Query(qid, text, loc, qtype, tuple(cands), gold))
        splits[split_of[qi]].append(qid)

    bundle = CorpusBundle(tuple(objects), tuple(pois), tuple(queries), {k: tuple(v) for k, v in splits.items()})
    if with_facts:
        return bundle, CityFacts(names, poi_name, poi_cat, address)
    return bundle
