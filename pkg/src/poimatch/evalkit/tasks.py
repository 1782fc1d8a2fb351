"""Ranking / retrieval runners, ablation slicing and scripted reference rankers."""

from __future__ import annotations

import dataclasses
import enum
import heapq
import math
from typing import Callable, Sequence

import torch

from ..geodata import CorpusBundle, Query, QueryType
from ..mgeo import Head, InteractionModel, MatchDataset, MatchQuery, bi_encode, candidate_scores
from ..spatial import haversine
from .generator import CityFacts
from .metrics import RankingResult, metric_block, rank_by_score


class Axis(enum.Enum):
    QUERY_TYPE = "QUERY_TYPE"
    GC_PERCENT = "GC_PERCENT"
    TRUNCATION = "TRUNCATION"


Scored = tuple[tuple[str, float], ...]


@torch.no_grad()
def score_ranking(model: InteractionModel, dataset: MatchDataset, head: Head,
                  batch_size: int = 64) -> list[tuple[MatchQuery, Scored]]:
    """Score every (query, candidate) pair; candidates ordered by score descending, ties by id."""
    model.eval()
    for q in dataset.queries:
        if not q.candidates:
            raise ValueError(f"query {q.id!r} has no candidates")
        missing = [c for c in q.candidates if c not in dataset.pois]
        if missing:
            raise KeyError(f"query {q.id!r}: no cached entry for candidate {missing[0]!r}")
    poi_cls = None
    if head is Head.BI:
        ids = sorted({c for q in dataset.queries for c in q.candidates})
        poi_cls = dict(zip(ids, bi_encode(model, [dataset.pois[i] for i in ids])))
    out = []
    for start in range(0, len(dataset.queries), batch_size):
        chunk = dataset.queries[start : start + batch_size]
        for q, s in zip(chunk, candidate_scores(model, dataset, chunk, head, poi_cls=poi_cls)):
            out.append((q, _ordered(q.candidates, s.tolist())))
    return out


def run_ranking(model: InteractionModel, dataset: MatchDataset, head: Head, batch_size: int = 64) -> list[RankingResult]:
    return [RankingResult(q.id, tuple(i for i, _ in scored), q.gold)
            for q, scored in score_ranking(model, dataset, head, batch_size)]


@torch.no_grad()
def score_retrieval(model: InteractionModel, dataset: MatchDataset, pool: Sequence[str] | None = None,
                    k_max: int = 100, head: Head = Head.BI) -> list[tuple[MatchQuery, Scored]]:
    """Cosine retrieval of each query against a full POI pool; keeps the top ``k_max``."""
    if head is not Head.BI:
        raise ValueError("retrieval runs with the bi-encoder only")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    model.eval()
    ids = sorted(dataset.pois) if pool is None else list(pool)
    pv = torch.nn.functional.normalize(bi_encode(model, [dataset.pois[i] for i in ids]), dim=-1)
    qv = torch.nn.functional.normalize(bi_encode(model, [q.example for q in dataset.queries]), dim=-1)
    return [(q, _ordered(ids, (pv * v[None]).sum(-1).tolist(), k_max)) for q, v in zip(dataset.queries, qv)]


def run_retrieval(model: InteractionModel, dataset: MatchDataset, pool: Sequence[str] | None = None,
                  k_max: int = 100, head: Head = Head.BI) -> list[RankingResult]:
    return [RankingResult(q.id, tuple(i for i, _ in scored), q.gold)
            for q, scored in score_retrieval(model, dataset, pool, k_max, head)]


def _ordered(ids: Sequence[str], scores: Sequence[float], k: int | None = None) -> Scored:
    best = heapq.nsmallest(len(ids) if k is None else k, zip((-float(s) for s in scores), ids))
    return tuple((i, -s) for s, i in best)


def top_k(ids: Sequence[str], scores: Sequence[float], k: int) -> tuple[str, ...]:
    """Top-k by score descending, ties by id, without sorting the whole pool."""
    return tuple(i for i, _ in _ordered(ids, scores, k))


def retrieval_pool_for(dataset: MatchDataset, query: MatchQuery) -> MatchDataset:
    return MatchDataset([query], {c: dataset.pois[c] for c in query.candidates})


def truncate_text_tokens(tokens: Sequence[int], fraction: float) -> tuple[int, ...]:
    """Keep the leading ``1 - fraction`` share of tokens (at least one)."""
    if not 0 <= fraction < 1:
        raise ValueError("truncation fraction must be in [0, 1)")
    keep = max(1, math.ceil(len(tokens) * (1 - fraction)))
    return tuple(tokens[:keep])


def truncated(dataset: MatchDataset, fraction: float) -> MatchDataset:
    qs = [dataclasses.replace(q, example=dataclasses.replace(q.example, tokens=truncate_text_tokens(q.example.tokens, fraction)))
          for q in dataset.queries]
    return MatchDataset(qs, dataset.pois)


def with_query_gc_fraction(dataset: MatchDataset, fraction: float) -> MatchDataset:
    """Keep query GC on the first ``fraction`` of queries (by id order) and drop it elsewhere."""
    ordered = sorted(q.id for q in dataset.queries)
    keep = set(ordered[: int(round(fraction * len(ordered)))])
    qs = [q if q.id in keep else dataclasses.replace(q, example=dataclasses.replace(q.example, gc=None))
          for q in dataset.queries]
    return MatchDataset(qs, dataset.pois)


def ablation_slice(results: Sequence[RankingResult], dataset: MatchDataset, axis: Axis | str,
                   rerun: Callable[[MatchDataset], list[RankingResult]] | None = None,
                   levels: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0)) -> dict[str, dict]:
    """Per-slice metrics along one ablation axis.

    QUERY_TYPE partitions existing results. GC_PERCENT and TRUNCATION
    re-score through ``rerun`` on a modified copy of the dataset per level.
    """
    axis = Axis(axis)
    if axis is Axis.QUERY_TYPE:
        by_id = {r.query_id: r for r in results}
        groups: dict[str, list[RankingResult]] = {}
        for q in dataset.queries:
            if q.id in by_id:
                groups.setdefault(q.query_type, []).append(by_id[q.id])
        return {k: metric_block(v) for k, v in sorted(groups.items())}
    if rerun is None:
        raise ValueError(f"{axis.value} slicing needs a rerun callable")
    out = {}
    for level in levels:
        if axis is Axis.TRUNCATION:
            if level >= 1:
                continue
            ds = truncated(dataset, level)
        else:
            ds = with_query_gc_fraction(dataset, level)
        out[f"{int(round(level * 100))}%"] = metric_block(rerun(ds))
    return out


# -- scripted reference rankers ----------------------------------------------


def _overlap(a: str, b: str) -> float:
    sa, sb = set(a.split()), set(b.split())
    return len(sa & sb) / max(1, len(sa | sb))


def text_only_oracle(bundle: CorpusBundle, queries: Sequence[Query]) -> list[RankingResult]:
    """Rank candidates by token overlap with the query text; ties by id."""
    pois = bundle.poi_by_id()
    return [
        RankingResult(q.id, rank_by_score(q.candidates, [_overlap(q.text, pois[c].text) for c in q.candidates]), q.gold)
        for q in queries
    ]


def gc_aware_oracle(bundle: CorpusBundle, facts: CityFacts, queries: Sequence[Query]) -> list[RankingResult]:
    """Rank by name match, breaking ties by distance to the query location.

    Street-number queries are matched on the candidate's (road, house number)
    address instead, since they carry no name.
    """
    pois = bundle.poi_by_id()
    out = []
    for q in queries:
        scores = []
        for c in q.candidates:
            if q.query_type is QueryType.STREET_NO:
                road_id, _, number = facts.address[c]
                s = float(q.text == f"{facts.names[road_id]} no {number}")
            else:
                s = float(set(facts.poi_name[c].split()) <= set(q.text.split()))
                if q.location is not None:
                    s -= haversine(q.location, pois[c].location) / 1e8
            scores.append(s)
        out.append(RankingResult(q.id, rank_by_score(q.candidates, scores), q.gold))
    return out
