"""Geographic encoder over GC records, trained with masked-feature prediction and distance alignment."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .gcfeat import DEFAULT_GRID_N, DEFAULT_ID_VOCAB, DEFAULT_K, GCRecord
from .nncore import (
    TransformerConfig,
    TransformerEncoder,
    init_parameters,
    kl_from_logits,
    make_optimizer,
    optimizer_step,
    softmax_xent,
)
from .spatial import EARTH_RADIUS_M

log = logging.getLogger(__name__)

# slot order matches ObjectFeatures.codes()
FAMILIES = (
    "relation", "id", "shape",
    "rel_pos_left", "rel_pos_bottom", "rel_pos_right", "rel_pos_top",
    "grid_left", "grid_bottom", "grid_right", "grid_top",
)
N_SLOTS = len(FAMILIES)

MASK_SCHEME, RANDOM_SCHEME, KEEP_SCHEME = 0, 1, 2


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GeoEncoderConfig:
    k: int = DEFAULT_K
    grid_n: int = DEFAULT_GRID_N
    id_vocab: int = DEFAULT_ID_VOCAB
    trunk: TransformerConfig = field(default_factory=lambda: TransformerConfig(layers=4, hidden=256, heads=4, max_seq=21))

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        """Number of predictable classes per slot (MASK/OOV rows excluded)."""
        return (2, self.id_vocab, 2, *(2 * self.k + 1,) * 4, *(self.grid_n,) * 4)

    @property
    def mask_index(self) -> tuple[int, ...]:
        # id table carries an OOV row before its MASK row
        return tuple(v + 1 if i == 1 else v for i, v in enumerate(self.vocab_sizes))

    @property
    def table_rows(self) -> tuple[int, ...]:
        return tuple(m + 1 for m in self.mask_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeoEncoderConfig":
        d = dict(d)
        d["trunk"] = TransformerConfig(**d["trunk"])
        return cls(**d)


class GeoEmbeddingTables(nn.Module):
    """One table per feature slot plus the learned GC token; every width is ``hidden``."""

    def __init__(self, cfg: GeoEncoderConfig):
        super().__init__()
        h = cfg.trunk.hidden
        self.tables = nn.ModuleList(nn.Embedding(rows, h) for rows in cfg.table_rows)
        self.gc_token = nn.Parameter(torch.zeros(h))

    def forward(self, codes: Tensor) -> Tensor:
        """Sum the 11 slot embeddings; ``codes`` is (..., 11)."""
        out = self.tables[0](codes[..., 0])
        for slot in range(1, N_SLOTS):
            out = out + self.tables[slot](codes[..., slot])
        return out


class GeoEncoderModel(nn.Module):
    def __init__(self, cfg: GeoEncoderConfig, seed: int = 17, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.tables = GeoEmbeddingTables(cfg)
        self.trunk = TransformerEncoder(cfg.trunk)
        self.heads = nn.ModuleList(nn.Linear(cfg.trunk.hidden, v) for v in cfg.vocab_sizes)
        init_parameters(self, seed)
        with torch.no_grad():
            nn.init.trunc_normal_(self.tables.gc_token, std=0.02, a=-0.04, b=0.04,
                                  generator=torch.Generator().manual_seed(seed + 1))
        self.to(dtype)

    @property
    def hidden(self) -> int:
        return self.cfg.trunk.hidden

    def forward(self, codes: Tensor, obj_mask: Tensor) -> Tensor:
        """(B, n, 11) codes and (B, n) validity -> (B, n + 1, H) with h_GC at position 0."""
        b = codes.shape[0]
        if codes.shape[1] + 1 > self.cfg.trunk.max_seq:
            raise ValueError(f"{codes.shape[1]} objects exceed encoder capacity {self.cfg.trunk.max_seq - 1}")
        e = self.tables(codes)
        gc = self.tables.gc_token.expand(b, 1, -1)
        x = torch.cat([gc, e], dim=1)
        mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), obj_mask], dim=1)
        return self.trunk(x, mask)


def embed_object(codes: Sequence[int], tables: GeoEmbeddingTables) -> Tensor:
    """Summed embedding of one object's 11 codes."""
    t = torch.as_tensor(list(codes), dtype=torch.long)
    for slot, (c, table) in enumerate(zip(t.tolist(), tables.tables)):
        if not 0 <= c < table.num_embeddings:
            raise IndexError(f"{FAMILIES[slot]} code {c} outside table of {table.num_embeddings} rows")
    return tables(t)


def clamp_ids(codes: Tensor, cfg: GeoEncoderConfig) -> Tensor:
    """Route id codes outside the model vocabulary to the OOV row."""
    ids = codes[..., 1]
    codes = codes.clone()
    codes[..., 1] = torch.where((ids < 0) | (ids >= cfg.id_vocab), torch.full_like(ids, cfg.id_vocab), ids)
    return codes


def collate(records: Sequence[GCRecord], cfg: GeoEncoderConfig) -> tuple[Tensor, Tensor]:
    """Pad records to a (B, n_max, 11) code tensor and a (B, n_max) validity mask."""
    n = max((len(r) for r in records), default=0)
    codes = torch.zeros(len(records), n, N_SLOTS, dtype=torch.long)
    mask = torch.zeros(len(records), n, dtype=torch.bool)
    for i, r in enumerate(records):
        if r.objects:
            codes[i, : len(r)] = torch.tensor([f.codes() for f in r.objects], dtype=torch.long)
            mask[i, : len(r)] = True
    return clamp_ids(codes, cfg), mask


def encode_gc(record: GCRecord, model: GeoEncoderModel) -> Tensor:
    """(n + 1, H) outputs for one record; row 0 is h_GC."""
    codes, mask = collate([record], model.cfg)
    return model(codes, mask)[0]


@dataclass
class MaskPlan:
    codes: Tensor  # replaced inputs
    selected: Tensor  # (B, n) bool
    scheme: Tensor  # (B, n) long: 0 MASK, 1 random, 2 keep; -1 when not selected


def plan_masking(codes: Tensor, obj_mask: Tensor, cfg: GeoEncoderConfig, mask_prob: float,
                 rng: np.random.Generator) -> MaskPlan:
    """Select whole objects with ``mask_prob``; replace all slots 80% MASK, 10% random, 10% kept."""
    b, n = obj_mask.shape
    u = torch.from_numpy(rng.random((b, n)))
    selected = (u < mask_prob) & obj_mask
    v = torch.from_numpy(rng.random((b, n)))
    scheme = torch.where(v < 0.8, MASK_SCHEME, torch.where(v < 0.9, RANDOM_SCHEME, KEEP_SCHEME))
    scheme = torch.where(selected, scheme, torch.full_like(scheme, -1))
    sizes = torch.tensor(cfg.vocab_sizes, dtype=torch.float64)
    random_codes = torch.floor(torch.from_numpy(rng.random((b, n, N_SLOTS))) * sizes).long()
    mask_codes = torch.tensor(cfg.mask_index, dtype=torch.long).expand(b, n, N_SLOTS)
    out = torch.where((scheme == MASK_SCHEME)[..., None], mask_codes, codes)
    out = torch.where((scheme == RANDOM_SCHEME)[..., None], random_codes, out)
    return MaskPlan(out, selected, scheme)


def masked_feature_loss(heads: nn.ModuleList, hidden: Tensor, targets: Tensor, selected: Tensor) -> Tensor:
    """Sum of per-slot cross-entropies over selected objects, averaged over the selected count."""
    count = int(selected.sum())
    if count == 0:
        return hidden.sum() * 0.0
    h = hidden[selected]
    t = targets[selected]
    total = h.new_zeros(())
    for slot, head in enumerate(heads):
        total = total + softmax_xent(head(h), t[:, slot]).sum()
    return total / count


def mgm_loss(model: GeoEncoderModel, codes: Tensor, obj_mask: Tensor, mask_prob: float,
             rng: np.random.Generator) -> Tensor:
    plan = plan_masking(codes, obj_mask, model.cfg, mask_prob, rng)
    if not bool(plan.selected.any()):
        return next(model.parameters()).new_zeros(())
    out = model(plan.codes, obj_mask)
    return masked_feature_loss(model.heads, out[:, 1:], codes, plan.selected)


def pairwise_haversine(anchors: np.ndarray) -> np.ndarray:
    """(bs, 2) lng/lat degrees -> (bs, bs) meters."""
    lng = np.radians(anchors[:, 0])
    lat = np.radians(anchors[:, 1])
    dphi = lat[:, None] - lat[None, :]
    dlmb = lng[:, None] - lng[None, :]
    h = np.sin(dphi / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _off_diagonal(bs: int) -> np.ndarray:
    """(bs, bs - 1) column indices skipping the diagonal."""
    cols = np.tile(np.arange(bs), (bs, 1))
    return cols[~np.eye(bs, dtype=bool)].reshape(bs, bs - 1)


def geo_target_matrix(anchors: np.ndarray) -> np.ndarray | None:
    """Sigmoid of negated z-scored pairwise distances, off-diagonal only: (bs, bs - 1).

    Returns None when every pairwise distance is equal (z-score undefined).
    """
    bs = anchors.shape[0]
    if bs < 2:
        raise ValueError("GCL needs at least two geolocations")
    d = pairwise_haversine(anchors)
    off = d[np.arange(bs)[:, None], _off_diagonal(bs)]
    std = off.std()
    if not std > 0:
        return None
    z = (off - off.mean()) / std
    return 1.0 / (1.0 + np.exp(z))


def gcl_loss(anchors: np.ndarray, h_gc: Tensor) -> Tensor:
    """Sum over rows of KL(softmax(geo row) || softmax(latent cosine row)), diagonal excluded."""
    target = geo_target_matrix(np.asarray(anchors, dtype=np.float64))
    if target is None:
        log.info("GCL skipped: all pairwise distances equal in batch of %d", len(anchors))
        return h_gc.sum() * 0.0
    bs = h_gc.shape[0]
    unit = F.normalize(h_gc, dim=-1)
    latent = unit @ unit.T
    cols = torch.from_numpy(_off_diagonal(bs))
    latent_off = latent.gather(1, cols)
    geo = torch.from_numpy(target).to(h_gc.dtype)
    return kl_from_logits(geo, latent_off).sum()


@dataclass
class GeoTrainConfig:
    epochs: int = 30
    batch_size: int = 512
    lr: float = 1e-4
    weight_decay: float = 0.02
    mask_prob: float = 0.15
    seed: int = 17


def train_geo_encoder(records: Sequence[GCRecord], model: GeoEncoderModel, cfg: GeoTrainConfig,
                      progress=None) -> list[tuple[int, float, float]]:
    """Minimize MGM + GCL; returns the per-step trace ``(step, mgm, gcl)``.

    The model is left holding the last-epoch parameters and is then frozen.
    """
    if not records:
        raise ValueError("empty GC corpus")
    from .rng import stream

    model.train()
    opt = make_optimizer(model, cfg.lr, cfg.weight_decay)
    order_rng = stream(cfg.seed, "geo.order")
    mask_rng = stream(cfg.seed, "geo.mask")
    codes_all, mask_all = collate(records, model.cfg)
    anchors_all = np.array([[r.anchor.lng, r.anchor.lat] for r in records], dtype=np.float64)
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(records))
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            codes, obj_mask = codes_all[idx], mask_all[idx]
            width = int(obj_mask.sum(1).max()) if obj_mask.numel() else 0
            codes, obj_mask = codes[:, :width], obj_mask[:, :width]
            plan = plan_masking(codes, obj_mask, model.cfg, cfg.mask_prob, mask_rng)
            out = model(plan.codes, obj_mask)
            l_mgm = masked_feature_loss(model.heads, out[:, 1:], codes, plan.selected)
            if len(idx) >= 2:
                l_gcl = gcl_loss(anchors_all[idx.numpy()], out[:, 0])
            else:
                l_gcl = out.sum() * 0.0
            loss = l_mgm + l_gcl
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite geo loss at epoch {epoch} step {step}: mgm={l_mgm.item()} gcl={l_gcl.item()}"
                )
            loss.backward()
            optimizer_step(opt)
            trace.append((step, float(l_mgm.item()), float(l_gcl.item())))
            step += 1
        if progress is not None:
            progress(epoch, trace)
    freeze(model)
    return trace


def freeze(model: nn.Module) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


@torch.no_grad()
def encode_records(model: GeoEncoderModel, records: Sequence[GCRecord], batch_size: int = 256) -> list[Tensor]:
    """Frozen-encoder outputs per record as (n + 1, H) tensors (row 0 is h_GC)."""
    out: list[Tensor] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        codes, mask = collate(chunk, model.cfg)
        h = model(codes, mask)
        for i, r in enumerate(chunk):
            out.append(h[i, : len(r) + 1].clone())
    return out


def uniform_entropy(vocab: int) -> float:
    return math.log(vocab)
