"""Acceptance suite: one test per criterion, each recording a pass/fail line for the terminal summary.

The end-to-end criteria (7 to 9) train the full default pipeline twice and take several minutes.
"""

import math
import time

import numpy as np
import pytest
import torch
from conftest import record
from test_evalkit import tiny_dataset
from test_evalkit import tiny_model as eval_model
from test_geoenc import scripted_gcl
from test_spatial import random_city, winding_number

from poimatch.evalkit.metrics import RankingResult, mrr_at_k, recall_at_k
from poimatch.evalkit.tasks import run_ranking, run_retrieval
from poimatch.gcfeat import map_grid_position, map_scale, relative_position
from poimatch.geodata import GeoObject, GeoPoint, Shape
from poimatch.geoenc import (
    KEEP_SCHEME,
    MASK_SCHEME,
    RANDOM_SCHEME,
    GeoEncoderConfig,
    GeoEncoderModel,
    collate,
    encode_records,
    freeze,
    gcl_loss,
    geo_target_matrix,
    masked_feature_loss,
    plan_masking,
)
from poimatch.gcfeat import GCRecord, ObjectFeatures
from poimatch.mgeo import (
    MASK_ID,
    SPECIALS,
    Head,
    InteractionConfig,
    InteractionModel,
    MatchDataset,
    MatchQuery,
    PairExample,
    PretrainPair,
    Role,
    Task,
    finetune_loss,
    mask_tokens,
    pretrain_step,
)
from poimatch.nncore import TransformerConfig, grad_check
from poimatch.pipeline import RunConfig, run_pipeline
from poimatch.spatial import Rect, SpatialIndex, point_in_polygon

SEED = 17


# -- 1. gradient correctness --------------------------------------------------

H = 16
VOCAB = 30


def _geo_cfg():
    return GeoEncoderConfig(k=2, grid_n=8, id_vocab=31, trunk=TransformerConfig(layers=2, hidden=H, heads=2, max_seq=21))


def _records(rng, count, cfg):
    out = []
    for _ in range(count):
        n = int(rng.integers(1, 5))
        objs = tuple(
            ObjectFeatures(f"o{i}", int(rng.integers(cfg.id_vocab)), int(rng.integers(2)), int(rng.integers(2)),
                           tuple(int(c) for c in rng.integers(0, 2 * cfg.k + 1, 4)),
                           tuple(int(c) for c in rng.integers(0, cfg.grid_n, 4)))
            for i in range(n)
        )
        out.append(GCRecord(GeoPoint(120 + rng.uniform(0, 0.1), 30 + rng.uniform(0, 0.1)), objs))
    return out


def test_criterion_1_gradient_checks():
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    gcfg = _geo_cfg()
    geo = GeoEncoderModel(gcfg, seed=SEED, dtype=torch.float64)
    recs = _records(rng, 4, gcfg)
    codes, mask = collate(recs, gcfg)
    plan = plan_masking(codes, mask, gcfg, 0.5, np.random.default_rng(1))
    anchors = np.array([[r.anchor.lng, r.anchor.lat] for r in recs])

    losses = {
        "MGM": (lambda: masked_feature_loss(geo.heads, geo(plan.codes, mask)[:, 1:], codes, plan.selected), geo),
        "GCL": (lambda: gcl_loss(anchors, geo(codes, mask)[:, 0]), geo),
    }

    frozen = GeoEncoderModel(gcfg, seed=SEED + 1, dtype=torch.float64)
    freeze(frozen)
    vecs = encode_records(frozen, recs)
    pairs = [PretrainPair(tuple(int(t) for t in rng.integers(len(SPECIALS), VOCAB, 5)), r, v[1:])
             for r, v in zip(recs, vecs)]
    mm = InteractionModel(VOCAB, InteractionConfig(TransformerConfig(layers=2, hidden=H, heads=2, max_seq=48), 24),
                          gcfg, seed=SEED, dtype=torch.float64)
    for task in Task:
        losses[task.value] = (lambda t=task: pretrain_step(mm, frozen, pairs, t, np.random.default_rng(2), 0.5), mm)

    g = torch.Generator().manual_seed(SEED)
    pois = {f"p{i}": PairExample(tuple(int(t) for t in rng.integers(len(SPECIALS), VOCAB, 3)),
                                 torch.randn(2, H, generator=g, dtype=torch.float64), Role.POI) for i in range(5)}
    queries = [MatchQuery(f"q{i}", PairExample((5 + i, 6), torch.randn(1, H, generator=g, dtype=torch.float64),
                                               Role.QUERY), tuple(pois), f"p{i}") for i in range(2)]
    ds = MatchDataset(queries, pois)
    for head in Head:
        losses[f"finetune-{head.value}"] = (lambda h=head: finetune_loss(mm, ds, queries, h), mm)

    # eps 1e-4 keeps roundoff below tolerance on near-zero attention gradients of a loss around 20
    errors = {name: grad_check(fn, module, eps=1e-4, max_per_tensor=6, seed=SEED)
              for name, (fn, module) in losses.items()}
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    passed = worst < 1e-4 and elapsed < 120
    record(1, "gradient correctness", passed,
           f"max rel err {worst:.2e} over {', '.join(errors)}; {elapsed:.1f}s")
    assert worst < 1e-4, errors
    assert elapsed < 120


# -- 2. GCL identities --------------------------------------------------------


def test_criterion_2_gcl_identities():
    anchors = np.array([(120.10, 30.20), (120.13, 30.21), (120.11, 30.26), (120.16, 30.22)])
    h = np.ones((4, 4))
    h[~np.eye(4, dtype=bool)] = geo_target_matrix(anchors).ravel()
    gram = np.where(np.eye(4, dtype=bool), 1.0, h - 0.6)
    zero = gcl_loss(anchors, torch.tensor(np.linalg.cholesky(gram))).item()

    rng = np.random.default_rng(SEED)
    lowest = math.inf
    for _ in range(1000):
        bs = int(rng.integers(2, 17))
        a = np.column_stack([rng.uniform(120, 120.2, bs), rng.uniform(30, 30.2, bs)])
        lowest = min(lowest, gcl_loss(a, torch.from_numpy(rng.normal(size=(bs, 8)))).item())

    fixture_a = [(120.10, 30.20), (120.13, 30.21), (120.11, 30.26)]
    fixture_v = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.6, 0.0, 0.8)]
    oracle_err = abs(gcl_loss(np.array(fixture_a), torch.tensor(fixture_v, dtype=torch.float64)).item()
                     - scripted_gcl(fixture_a, fixture_v))
    passed = abs(zero) < 1e-12 and lowest >= -1e-12 and oracle_err < 1e-10
    record(2, "GCL identities", passed,
           f"matched-rows loss {zero:.1e}; min over 1000 batches {lowest:.3e}; oracle diff {oracle_err:.1e}")
    assert passed


# -- 3. masking statistics ----------------------------------------------------


def test_criterion_3_masking_statistics():
    rng = np.random.default_rng(SEED)
    cfg = GeoEncoderConfig(k=10, grid_n=2000, id_vocab=50_021, trunk=TransformerConfig(layers=1, hidden=8, heads=2))
    recs = []
    for _ in range(500):  # 500 x 20 = 10,000 objects
        objs = tuple(ObjectFeatures(f"o{i}", int(rng.integers(cfg.id_vocab)), 0, 0, (0, 0, 0, 0), (0, 0, 0, 0))
                     for i in range(20))
        recs.append(GCRecord(GeoPoint(120.1, 30.2), objs))
    codes, mask = collate(recs, cfg)
    plan = plan_masking(codes, mask, cfg, 0.15, rng)
    n_obj = int(mask.sum())
    sel = int(plan.selected.sum())
    obj_rate = sel / n_obj
    obj_split = [int((plan.scheme == s).sum()) / sel for s in (MASK_SCHEME, RANDOM_SCHEME, KEEP_SCHEME)]

    vocab = 1000
    toks = list(rng.integers(len(SPECIALS), vocab, 10_000))
    inp, tgt = mask_tokens(toks, vocab, MASK_ID, len(SPECIALS), 0.15, rng)
    picked = [i for i, t in enumerate(tgt) if t >= 0]
    tok_rate = len(picked) / len(toks)
    masked = sum(inp[i] == MASK_ID for i in picked) / len(picked)
    kept = sum(inp[i] == toks[i] for i in picked) / len(picked)
    tok_split = [masked, 1 - masked - kept, kept]

    def ok(rate, split):
        return 0.14 <= rate <= 0.16 and all(abs(a - b) <= 0.02 for a, b in zip(split, (0.8, 0.1, 0.1)))

    passed = n_obj == 10_000 and ok(obj_rate, obj_split) and ok(tok_rate, tok_split)
    fmt = lambda s: "/".join(f"{x:.3f}" for x in s)  # noqa: E731
    record(3, "masking statistics", passed,
           f"objects rate {obj_rate:.4f} split {fmt(obj_split)}; tokens rate {tok_rate:.4f} split {fmt(tok_split)}")
    assert passed


# -- 4. spatial oracles -------------------------------------------------------


def test_criterion_4_spatial_oracles():
    rng = np.random.default_rng(SEED)
    index = SpatialIndex(random_city(rng, 5000))
    mismatches = 0
    for _ in range(1000):
        p = GeoPoint(rng.uniform(119.99, 120.21), rng.uniform(29.99, 30.21))
        mismatches += index.nearby(p) != index.brute_force(p)

    disagree, total = 0, 0
    while total < 10_000:
        k = int(rng.integers(3, 9))
        pts = tuple(GeoPoint(rng.uniform(0, 1), rng.uniform(0, 1)) for _ in range(k))
        try:
            poly = GeoObject("p", Shape.POLYGON, pts)
        except ValueError:
            continue
        p = GeoPoint(rng.uniform(0, 1), rng.uniform(0, 1))
        disagree += point_in_polygon(p, poly) != (winding_number(p, poly.vertices) % 2 != 0)
        total += 1
    passed = mismatches == 0 and disagree == 0
    record(4, "spatial oracles", passed,
           f"index vs brute force {1000 - mismatches}/1000 probes; point-in-polygon {total - disagree}/{total}")
    assert passed


# -- 5. metric oracles --------------------------------------------------------


def _brute_recall(ranks, k):
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def _brute_mrr(ranks, k):
    return sum(1 / r for r in ranks if r is not None and r <= k) / len(ranks)


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(SEED)
    wrong = 0
    for _ in range(1000):
        results, ranks = [], []
        for qi in range(int(rng.integers(1, 30))):
            n = int(rng.integers(1, 40))
            ranked = [f"c{i}" for i in rng.permutation(60)[:n]]
            gold = f"c{int(rng.integers(60))}"
            results.append(RankingResult(str(qi), tuple(ranked), gold))
            ranks.append(ranked.index(gold) + 1 if gold in ranked else None)
        for k in (1, 3, 5, 10, 20, 50, 100):
            wrong += recall_at_k(results, k) != _brute_recall(ranks, k)
            wrong += mrr_at_k(results, k) != _brute_mrr(ranks, k)

    m, ds = eval_model(), tiny_dataset(n_queries=20)
    ranked = run_ranking(m, ds, Head.BI)
    diff = sum(run_retrieval(m, MatchDataset([q], ds.pois), pool=q.candidates, k_max=len(q.candidates))[0].ranked
               != r.ranked for q, r in zip(ds.queries, ranked))
    passed = wrong == 0 and diff == 0
    record(5, "metric oracles", passed, f"{wrong} metric mismatches over 1000 sets; {diff} retrieval/ranking diffs")
    assert passed


# -- 6. discretization bounds -------------------------------------------------


def _near_floor_boundary(offset, span, k, tol=1e-6):
    x = k * abs(offset) / span
    return abs(x - round(x)) < tol or abs(offset) < 1e-12


def test_criterion_6_discretization_bounds():
    rng = np.random.default_rng(SEED)
    k, n = 10, 2000
    bounds = Rect(120.0, 30.0, 120.2, 30.2)
    scale = map_scale(bounds, n)
    bad = 0
    for _ in range(100_000):
        x0, y0 = rng.uniform(119.9, 120.3), rng.uniform(29.9, 30.3)
        w, h = rng.exponential(0.005, 2) * (rng.random(2) > 0.05)  # some degenerate rects
        rect = Rect(x0, y0, x0 + w, y0 + h)
        p = GeoPoint(x0 + rng.normal(0, 0.02), y0 + rng.normal(0, 0.02))
        rp = relative_position(p, rect, k)
        gp = map_grid_position(rect, scale, bounds, n)
        bad += not (all(0 <= c <= 2 * k for c in rp) and all(0 <= c <= n - 1 for c in gp))

    checked = broken = 0
    while checked < 10_000:
        x0, y0 = rng.uniform(120.0, 120.2), rng.uniform(30.0, 30.2)
        w, h = rng.uniform(0.0005, 0.01, 2)
        rect = Rect(x0, y0, x0 + w, y0 + h)
        p = GeoPoint(x0 + rng.uniform(-0.02, 0.02), y0 + rng.uniform(-0.02, 0.02))
        offsets = (p.lng - rect.left, p.lat - rect.bottom, p.lng - rect.right, p.lat - rect.top)
        spans = (w, h, w, h)
        if any(_near_floor_boundary(o, s, k) for o, s in zip(offsets, spans)):
            continue
        dx, dy = rng.uniform(-1, 1, 2) * np.array(scale) * 0.5  # within one grid cell
        moved = Rect(rect.left + dx, rect.bottom + dy, rect.right + dx, rect.top + dy)
        broken += relative_position(GeoPoint(p.lng + dx, p.lat + dy), moved, k) != relative_position(p, rect, k)
        checked += 1
    passed = bad == 0 and broken == 0
    record(6, "discretization bounds", passed,
           f"{bad} out-of-range codes over 100000 draws; {broken} translation changes over {checked} shifts")
    assert passed


# -- 7 to 9. end-to-end pipeline ----------------------------------------------


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    cfg = RunConfig(seed=SEED)
    reports, times = [], []
    for name in ("run-a", "run-b"):
        w = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        run_pipeline(cfg, w)
        times.append(time.perf_counter() - t0)
        reports.append((w / "eval" / "report.json").read_bytes())
    return reports, times


def _report(pipeline_runs):
    import json

    return json.loads(pipeline_runs[0][0])


@pytest.mark.slow
def test_criterion_7_gc_beats_text(pipeline_runs):
    m = _report(pipeline_runs)["models"]
    bi, bi_text = m["bi"]["test"]["ranking"]["recall@1"], m["bi-text"]["test"]["ranking"]["recall@1"]
    cross, cross_text = m["cross"]["dev"]["ranking"]["recall@1"], m["cross-text"]["dev"]["ranking"]["recall@1"]
    minutes = pipeline_runs[1][0] / 60
    passed = bi - bi_text >= 0.15 and bi_text <= 0.65 and cross - cross_text >= 0.10
    record(7, "GC beats text-only", passed,
           f"bi test R@1 {bi:.3f} vs text {bi_text:.3f} (gap {100 * (bi - bi_text):.1f}); "
           f"cross dev R@1 {cross:.3f} vs text {cross_text:.3f} (gap {100 * (cross - cross_text):.1f}); "
           f"pipeline {minutes:.1f} min on one core")
    assert bi - bi_text >= 0.15
    assert bi_text <= 0.65
    assert cross - cross_text >= 0.10


@pytest.mark.slow
def test_criterion_8_ablation_direction(pipeline_runs):
    m = _report(pipeline_runs)["models"]
    sweep = m["cross"]["ablation"]["gc_percent"]
    full, none = sweep["100%"]["mrr@5"], sweep["0%"]["mrr@5"]
    noqgc, text = m["cross-noqgc"]["dev"]["ranking"]["mrr@5"], m["cross-text"]["dev"]["ranking"]["mrr@5"]
    passed = full > none and noqgc > text
    record(8, "ablation direction", passed,
           f"cross dev MRR@5 at 100% query GC {full:.3f} vs 0% {none:.3f}; "
           f"w/o query GC {noqgc:.3f} vs text-only {text:.3f}")
    assert full > none
    assert noqgc > text


@pytest.mark.slow
def test_criterion_9_determinism(pipeline_runs):
    (a, b), times = pipeline_runs
    passed = a == b
    record(9, "determinism", passed,
           f"reports {'byte-identical' if passed else 'differ'} ({len(a)} bytes; runs {times[0]:.0f}s and {times[1]:.0f}s)")
    assert passed
