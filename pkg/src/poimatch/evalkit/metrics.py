"""Ranking results and Recall@k / MRR@k."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

REPORT_RECALL_KS = (1, 3, 5, 20, 50, 100)
REPORT_MRR_KS = (5, 10)


@dataclass(frozen=True)
class RankingResult:
    query_id: str
    ranked: tuple[str, ...]
    gold: str

    @property
    def gold_rank(self) -> int | None:
        """1-based rank of the gold POI, None when it is not in the scored pool."""
        try:
            return self.ranked.index(self.gold) + 1
        except ValueError:
            return None


def rank_by_score(ids: Sequence[str], scores: Sequence[float]) -> tuple[str, ...]:
    """Order ids by score descending, ties by id ascending."""
    return tuple(i for _, i in sorted(zip((-float(s) for s in scores), ids)))


def _check(results: Sequence[RankingResult], k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("empty result set")


def recall_at_k(results: Sequence[RankingResult], k: int) -> float:
    _check(results, k)
    hits = sum(1 for r in results if (rank := r.gold_rank) is not None and rank <= k)
    return hits / len(results)


def mrr_at_k(results: Sequence[RankingResult], k: int) -> float:
    _check(results, k)
    total = 0.0
    for r in results:
        rank = r.gold_rank
        if rank is not None and rank <= k:
            total += 1.0 / rank
    return total / len(results)


def metric_block(results: Sequence[RankingResult],
                 recall_ks: Iterable[int] = REPORT_RECALL_KS, mrr_ks: Iterable[int] = REPORT_MRR_KS) -> dict:
    block = {"queries": len(results)}
    for k in recall_ks:
        block[f"recall@{k}"] = round(recall_at_k(results, k), 6)
    for k in mrr_ks:
        block[f"mrr@{k}"] = round(mrr_at_k(results, k), 6)
    return block
