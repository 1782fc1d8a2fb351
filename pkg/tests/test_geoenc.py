import json
import logging
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from poimatch.gcfeat import GCRecord, ObjectFeatures
from poimatch.geodata import GeoPoint
from poimatch.geoenc import (
    KEEP_SCHEME,
    MASK_SCHEME,
    N_SLOTS,
    RANDOM_SCHEME,
    GeoEncoderConfig,
    GeoEncoderModel,
    GeoTrainConfig,
    collate,
    embed_object,
    encode_gc,
    gcl_loss,
    geo_target_matrix,
    masked_feature_loss,
    pairwise_haversine,
    plan_masking,
    train_geo_encoder,
)
from poimatch.nncore import TransformerConfig, softmax_xent
from poimatch.spatial import haversine

GOLDEN = Path(__file__).parent / "golden"


def tiny_cfg(hidden=16):
    return GeoEncoderConfig(k=2, grid_n=8, id_vocab=31, trunk=TransformerConfig(layers=2, hidden=hidden, heads=2, max_seq=21))


def make_record(rng, n, lng=120.1, lat=30.2, cfg=None):
    cfg = cfg or tiny_cfg()
    objs = []
    for i in range(n):
        objs.append(ObjectFeatures(
            f"o{i}", int(rng.integers(cfg.id_vocab)), int(rng.integers(2)), int(rng.integers(2)),
            tuple(int(c) for c in rng.integers(0, 2 * cfg.k + 1, 4)), tuple(int(c) for c in rng.integers(0, cfg.grid_n, 4)),
        ))
    return GCRecord(GeoPoint(lng, lat), tuple(objs))


def golden_record():
    return make_record(np.random.default_rng(11), 5)


# -- config and embedding ---------------------------------------------------


def test_vocab_layout():
    cfg = GeoEncoderConfig(k=10, grid_n=2000, id_vocab=50_021)
    assert cfg.vocab_sizes == (2, 50_021, 2, 21, 21, 21, 21, 2000, 2000, 2000, 2000)
    assert cfg.mask_index[1] == 50_022  # OOV row sits at 50,021
    assert cfg.mask_index[0] == 2 and cfg.mask_index[3] == 21
    assert cfg.table_rows == tuple(m + 1 for m in cfg.mask_index)
    assert GeoEncoderConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_embedding_is_sum_of_slot_rows():
    model = GeoEncoderModel(tiny_cfg(), seed=3, dtype=torch.float64)
    codes = (1, 7, 0, 0, 4, 2, 3, 0, 7, 5, 1)
    want = sum(model.tables.tables[s].weight[c] for s, c in enumerate(codes))
    torch.testing.assert_close(embed_object(codes, model.tables), want)
    with pytest.raises(IndexError):
        embed_object((5, 7, 0, 0, 4, 2, 3, 0, 7, 5, 1), model.tables)


def test_collate_pads_and_routes_oov():
    cfg = tiny_cfg()
    rng = np.random.default_rng(0)
    a, b = make_record(rng, 3), make_record(rng, 1)
    f = b.objects[0]
    b = GCRecord(b.anchor, (ObjectFeatures(f.object_id, 999, f.shape_code, f.relation_code, f.rel_pos_codes, f.grid_codes),))
    codes, mask = collate([a, b], cfg)
    assert codes.shape == (2, 3, N_SLOTS)
    assert mask.tolist() == [[True, True, True], [True, False, False]]
    assert codes[1, 0, 1].item() == cfg.id_vocab


def test_encoder_output_shape_and_gc_position():
    model = GeoEncoderModel(tiny_cfg(), seed=3, dtype=torch.float64)
    out = encode_gc(golden_record(), model)
    assert out.shape == (6, 16)


def test_encoder_golden_h_gc():
    golden = json.loads((GOLDEN / "geo_h_gc.json").read_text())
    model = GeoEncoderModel(tiny_cfg(), seed=3, dtype=torch.float64)
    h_gc = encode_gc(golden_record(), model)[0]
    np.testing.assert_allclose(h_gc.detach().numpy(), np.array(golden["h_gc"]), rtol=1e-9, atol=1e-12)


def test_encoder_padding_invariance():
    model = GeoEncoderModel(tiny_cfg(), seed=3, dtype=torch.float64)
    rng = np.random.default_rng(1)
    r = make_record(rng, 2)
    alone = encode_gc(r, model)
    codes, mask = collate([r, make_record(rng, 6)], model.cfg)
    batched = model(codes, mask)[0, :3]
    torch.testing.assert_close(alone, batched, rtol=1e-12, atol=1e-12)


# -- masking ----------------------------------------------------------------


def test_masking_replacement_rules():
    cfg = tiny_cfg()
    rng = np.random.default_rng(0)
    records = [make_record(rng, 20) for _ in range(200)]
    codes, mask = collate(records, cfg)
    plan = plan_masking(codes, mask, cfg, 0.15, np.random.default_rng(5))
    mask_codes = torch.tensor(cfg.mask_index)
    assert torch.equal(plan.codes[~plan.selected], codes[~plan.selected])
    is_mask = plan.scheme == MASK_SCHEME
    assert torch.all(plan.codes[is_mask] == mask_codes)
    assert torch.equal(plan.codes[plan.scheme == KEEP_SCHEME], codes[plan.scheme == KEEP_SCHEME])
    rand = plan.codes[plan.scheme == RANDOM_SCHEME]
    assert torch.all(rand < torch.tensor(cfg.vocab_sizes)) and torch.all(rand >= 0)
    assert torch.all(plan.scheme[~plan.selected] == -1)


def test_masking_never_selects_padding():
    cfg = tiny_cfg()
    rng = np.random.default_rng(0)
    codes, mask = collate([make_record(rng, 1), make_record(rng, 20)], cfg)
    plan = plan_masking(codes, mask, cfg, 0.9, np.random.default_rng(1))
    assert not bool(plan.selected[0, 1:].any())


def test_masked_feature_loss_oracle():
    cfg = tiny_cfg()
    model = GeoEncoderModel(cfg, seed=2, dtype=torch.float64)
    rng = np.random.default_rng(3)
    hidden = torch.randn(2, 4, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    codes, _ = collate([make_record(rng, 4), make_record(rng, 4)], cfg)
    selected = torch.tensor([[True, False, True, False], [False, False, False, True]])
    total = 0.0
    for b, i in [(0, 0), (0, 2), (1, 3)]:
        for s in range(N_SLOTS):
            total += softmax_xent(model.heads[s](hidden[b, i]), codes[b, i, s]).item()
    got = masked_feature_loss(model.heads, hidden, codes, selected).item()
    assert got == pytest.approx(total / 3, rel=1e-12)
    assert masked_feature_loss(model.heads, hidden, codes, torch.zeros_like(selected)).item() == 0.0


# -- GCL --------------------------------------------------------------------


def scripted_gcl(anchors, vectors):
    """Straight-line evaluation with Python floats: distances, z-score, sigmoid, two softmaxes, KL."""
    bs = len(anchors)
    pts = [GeoPoint(*a) for a in anchors]
    off = [(i, j) for i in range(bs) for j in range(bs) if i != j]
    dist = {(i, j): haversine(pts[i], pts[j]) for i, j in off}
    mean = sum(dist.values()) / len(off)
    std = math.sqrt(sum((d - mean) ** 2 for d in dist.values()) / len(off))
    geo = {k: 1 / (1 + math.exp((d - mean) / std)) for k, d in dist.items()}
    norm = [math.sqrt(sum(x * x for x in v)) for v in vectors]
    cos = {(i, j): sum(a * b for a, b in zip(vectors[i], vectors[j])) / (norm[i] * norm[j]) for i, j in off}
    total = 0.0
    for i in range(bs):
        js = [j for j in range(bs) if j != i]
        zp = sum(math.exp(geo[i, j]) for j in js)
        zq = sum(math.exp(cos[i, j]) for j in js)
        for j in js:
            p, q = math.exp(geo[i, j]) / zp, math.exp(cos[i, j]) / zq
            total += p * math.log(p / q)
    return total


def test_gcl_matches_scripted_oracle_bs3():
    anchors = [(120.10, 30.20), (120.13, 30.21), (120.11, 30.26)]
    vectors = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.6, 0.0, 0.8)]
    got = gcl_loss(np.array(anchors), torch.tensor(vectors, dtype=torch.float64)).item()
    assert got == pytest.approx(scripted_gcl(anchors, vectors), abs=1e-10)
    assert got > 0


def test_gcl_zero_when_latent_rows_match_geo_rows():
    anchors = np.array([(120.10, 30.20), (120.13, 30.21), (120.11, 30.26), (120.16, 30.22)])
    h = np.ones((4, 4))
    h[~np.eye(4, dtype=bool)] = geo_target_matrix(anchors).ravel()
    # cosines = targets - 0.6 keep each softmax row unchanged; the Gram matrix stays diagonally dominant
    gram = np.where(np.eye(4, dtype=bool), 1.0, h - 0.6)
    vecs = np.linalg.cholesky(gram)
    assert gcl_loss(anchors, torch.tensor(vecs)).item() == pytest.approx(0.0, abs=1e-12)


def test_gcl_equal_distances_is_zero_and_logged(caplog):
    anchors = np.array([(120.1, 30.2), (120.1, 30.2), (120.1, 30.2)])
    h = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    with caplog.at_level(logging.INFO, logger="poimatch.geoenc"):
        loss = gcl_loss(anchors, h)
    assert loss.item() == 0.0
    assert "GCL skipped" in caplog.text


def test_geo_target_is_symmetric_and_monotone():
    anchors = np.array([(120.10, 30.20), (120.11, 30.20), (120.20, 30.20)])
    d = pairwise_haversine(anchors)
    assert np.allclose(d, d.T) and np.all(np.diag(d) == 0)
    t = geo_target_matrix(anchors)  # row 0: neighbours 1 (near), 2 (far)
    assert t[0, 0] > t[0, 1]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_gcl_nonnegative(bs, seed):
    rng = np.random.default_rng(seed)
    anchors = np.column_stack([rng.uniform(120, 120.2, bs), rng.uniform(30, 30.2, bs)])
    h = torch.from_numpy(rng.normal(size=(bs, 8)))
    assert gcl_loss(anchors, h).item() >= -1e-12


# -- training ---------------------------------------------------------------


def test_train_geo_encoder_reduces_loss_and_freezes():
    cfg = tiny_cfg()
    rng = np.random.default_rng(0)
    records = [make_record(rng, int(rng.integers(1, 8)), 120 + rng.uniform(0, 0.1), 30 + rng.uniform(0, 0.1))
               for _ in range(64)]
    model = GeoEncoderModel(cfg, seed=1)
    trace = train_geo_encoder(records, model, GeoTrainConfig(epochs=12, batch_size=16, lr=3e-3, seed=1))
    first = np.mean([m for _, m, _ in trace[:4]])
    last = np.mean([m for _, m, _ in trace[-4:]])
    assert last < first
    assert not any(p.requires_grad for p in model.parameters())
    assert not model.training


def test_train_geo_encoder_is_deterministic():
    cfg = tiny_cfg()
    rng = np.random.default_rng(0)
    records = [make_record(rng, 3, 120 + rng.uniform(0, 0.1), 30.1) for _ in range(20)]
    runs = []
    for _ in range(2):
        model = GeoEncoderModel(cfg, seed=1)
        runs.append(train_geo_encoder(records, model, GeoTrainConfig(epochs=2, batch_size=8, seed=4)))
    assert runs[0] == runs[1]


def test_train_geo_encoder_rejects_empty():
    with pytest.raises(ValueError):
        train_geo_encoder([], GeoEncoderModel(tiny_cfg()), GeoTrainConfig(epochs=1))
