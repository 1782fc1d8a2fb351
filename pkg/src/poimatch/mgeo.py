"""Multi-modal interaction module: text + GC pre-training and the relevance heads."""

from __future__ import annotations

import copy
import dataclasses
import enum
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .gcfeat import GCRecord
from .geoenc import GeoEncoderConfig, GeoEncoderModel, collate, masked_feature_loss, plan_masking
from .nncore import (
    TransformerConfig,
    TransformerEncoder,
    init_parameters,
    listwise_loss,
    make_optimizer,
    optimizer_step,
    softmax_xent,
)
from .rng import stream

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIALS))
QUERY_DISC, POI_DISC = 0, 1


class TextTokenizer:
    """Whitespace-and-punctuation tokenizer over a corpus-built vocabulary."""

    def __init__(self, vocab: Sequence[str]):
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.vocab = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id = range(len(SPECIALS))

    @staticmethod
    def split(text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "TextTokenizer":
        counts = Counter(t for text in texts for t in cls.split(text))
        words = sorted(t for t, c in counts.items() if c >= min_count and t not in SPECIALS)
        return cls([*SPECIALS, *words])

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in self.split(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.vocab, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TextTokenizer":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class InteractionConfig:
    trunk: TransformerConfig = field(default_factory=lambda: TransformerConfig(layers=2, hidden=64, heads=4, max_seq=96))
    max_text: int = 48

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InteractionConfig":
        d = dict(d)
        d["trunk"] = TransformerConfig(**d["trunk"])
        return cls(**d)


class Role(enum.Enum):
    QUERY = "QUERY"
    POI = "POI"


@dataclass
class PairExample:
    """Content tokens (no specials) plus optional frozen GC object vectors (n, H)."""

    tokens: tuple[int, ...]
    gc: Tensor | None = None
    role: Role = Role.POI


class InteractionModel(nn.Module):
    def __init__(self, text_vocab: int, cfg: InteractionConfig, geo_cfg: GeoEncoderConfig,
                 seed: int = 17, dtype: torch.dtype = torch.float32):
        super().__init__()
        h = cfg.trunk.hidden
        if geo_cfg.trunk.hidden != h:
            raise ValueError(f"geographic encoder width {geo_cfg.trunk.hidden} != interaction width {h}")
        self.cfg = cfg
        self.text_vocab = text_vocab
        self.word = nn.Embedding(text_vocab, h)
        self.position = nn.Embedding(cfg.max_text, h)
        self.segment = nn.Embedding(2, h)
        self.emb_norm = nn.LayerNorm(h)
        self.trunk = TransformerEncoder(cfg.trunk)
        self.mlm_head = nn.Linear(h, text_vocab)
        self.mgm_heads = nn.ModuleList(nn.Linear(h, v) for v in geo_cfg.vocab_sizes)
        self.discriminator = nn.Embedding(2, h)
        self.sim_mlp = nn.Sequential(nn.Linear(h, h), nn.Tanh(), nn.Linear(h, 1))
        init_parameters(self, seed)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.word.weight.dtype

    def encode_rows(self, rows: Sequence[tuple[Sequence[int], Sequence[int], Sequence[Tensor]]]) -> tuple[Tensor, Tensor]:
        """Each row is (token ids, segment ids, GC parts); returns (B, T, H) hidden states and mask.

        Text takes position embeddings; GC vectors are appended after the text
        as given (discriminator rows already added by the caller).
        """
        lens = [len(r[0]) for r in rows]
        lt = max(lens)
        if lt > self.cfg.max_text:
            raise ValueError(f"text length {lt} exceeds max_text {self.cfg.max_text}")
        ids = torch.zeros(len(rows), lt, dtype=torch.long)
        segs = torch.zeros(len(rows), lt, dtype=torch.long)
        for i, (t, s, _) in enumerate(rows):
            ids[i, : len(t)] = torch.as_tensor(list(t), dtype=torch.long)
            segs[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        text = self.emb_norm(self.word(ids) + self.position(torch.arange(lt))[None] + self.segment(segs))
        totals = [n + sum(int(g.shape[0]) for g in r[2]) for n, r in zip(lens, rows)]
        width = max(totals)
        if width > self.cfg.trunk.max_seq:
            raise ValueError(f"sequence length {width} exceeds max_seq {self.cfg.trunk.max_seq}")
        if all(not r[2] for r in rows):
            x = text
        else:
            pieces = []
            for i, (n, r) in enumerate(zip(lens, rows)):
                parts = [text[i, :n], *(g.to(text.dtype) for g in r[2])]
                row = torch.cat(parts, dim=0)
                if row.shape[0] < width:
                    row = torch.cat([row, row.new_zeros(width - row.shape[0], row.shape[1])], dim=0)
                pieces.append(row)
            x = torch.stack(pieces)
        mask = torch.arange(x.shape[1])[None, :] < torch.tensor(totals)[:, None]
        return self.trunk(x, mask), mask


# -- sequence layouts --------------------------------------------------------


def single_row(tokens: Sequence[int], gc: Tensor | None,
               cls_id: int = CLS_ID, sep_id: int = SEP_ID) -> tuple[list[int], list[int], list[Tensor]]:
    ids = [cls_id, *tokens, sep_id]
    return ids, [0] * len(ids), [] if gc is None else [gc]


def cross_row(model: InteractionModel, query: PairExample, poi: PairExample,
              cls_id: int = CLS_ID, sep_id: int = SEP_ID, swap_discriminator: bool = False):
    q_ids = [cls_id, *query.tokens, sep_id]
    p_ids = [*poi.tokens, sep_id]
    qd, pd = (POI_DISC, QUERY_DISC) if swap_discriminator else (QUERY_DISC, POI_DISC)
    parts = []
    if query.gc is not None:
        parts.append(query.gc + model.discriminator.weight[qd])
    if poi.gc is not None:
        parts.append(poi.gc + model.discriminator.weight[pd])
    return q_ids + p_ids, [0] * len(q_ids) + [1] * len(p_ids), parts


def multimodal_forward(model: InteractionModel, text: Sequence[int], gc: Tensor | None = None) -> Tensor:
    """Hidden states for ``[CLS] text [SEP]`` followed by the GC object vectors, if any."""
    h, _ = model.encode_rows([single_row(text, gc)])
    n = len(text) + 2 + (0 if gc is None else gc.shape[0])
    return h[0, :n]


def bi_encode(model: InteractionModel, examples: Sequence[PairExample], batch_size: int = 512) -> Tensor:
    """(B, H) CLS vectors; each example is encoded on its own (no cross-attention)."""
    out = []
    for start in range(0, len(examples), batch_size):
        rows = [single_row(e.tokens, e.gc) for e in examples[start : start + batch_size]]
        h, _ = model.encode_rows(rows)
        out.append(h[:, 0])
    return torch.cat(out) if out else torch.zeros(0, model.cfg.trunk.hidden, dtype=model.dtype)


def cosine(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    return (F.normalize(a, dim=-1, eps=eps) * F.normalize(b, dim=-1, eps=eps)).sum(-1)


def bi_score(model: InteractionModel, query: PairExample, poi: PairExample) -> float:
    cls = bi_encode(model, [query, poi])
    return float(cosine(cls[0], cls[1]))


def cross_scores(model: InteractionModel, pairs: Sequence[tuple[PairExample, PairExample]],
                 swap_discriminator: bool = False, batch_size: int = 512) -> Tensor:
    out = []
    for start in range(0, len(pairs), batch_size):
        rows = [cross_row(model, q, p, swap_discriminator=swap_discriminator) for q, p in pairs[start : start + batch_size]]
        h, _ = model.encode_rows(rows)
        out.append(model.sim_mlp(h[:, 0]).squeeze(-1))
    return torch.cat(out) if out else torch.zeros(0, dtype=model.dtype)


def cross_score(model: InteractionModel, query: PairExample, poi: PairExample, swap_discriminator: bool = False) -> float:
    return float(cross_scores(model, [(query, poi)], swap_discriminator=swap_discriminator)[0])


# -- pre-training ------------------------------------------------------------


class Task(enum.Enum):
    MLM_SINGLE = "MLM_SINGLE"
    MLM_MULTI = "MLM_MULTI"
    MGM_MULTI = "MGM_MULTI"


ROUND_ROBIN = (Task.MLM_SINGLE, Task.MLM_MULTI, Task.MGM_MULTI)


@dataclass
class PretrainPair:
    """A text with the GC record of its geolocation (None when the location has no GC)."""

    tokens: tuple[int, ...]
    record: GCRecord | None
    gc: Tensor | None = None  # frozen encoder object vectors for ``record``


def mask_tokens(tokens: Sequence[int], vocab: int, mask_id: int, n_special: int, prob: float,
                rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """BERT-style 80/10/10 masking. Returns (inputs, targets) with target -1 where unmasked."""
    toks = list(tokens)
    u = rng.random(len(toks))
    v = rng.random(len(toks))
    r = rng.integers(n_special, vocab, size=len(toks)) if vocab > n_special else np.full(len(toks), mask_id)
    inputs, targets = [], []
    for t, ui, vi, ri in zip(toks, u, v, r):
        if ui < prob:
            targets.append(t)
            inputs.append(mask_id if vi < 0.8 else int(ri) if vi < 0.9 else t)
        else:
            targets.append(-1)
            inputs.append(t)
    return inputs, targets


def _zero(model: InteractionModel) -> Tensor:
    return model.word.weight.sum() * 0.0


def pretrain_step(model: InteractionModel, geo: GeoEncoderModel, batch: Sequence[PretrainPair], task: Task,
                  rng: np.random.Generator, mask_prob: float = 0.15) -> Tensor:
    """Loss of one pre-training task on ``batch`` (no optimizer update)."""
    if not isinstance(task, Task):
        raise ValueError(f"invalid task {task!r}")
    if task in (Task.MLM_SINGLE, Task.MLM_MULTI):
        rows, targets = [], []
        for pair in batch:
            inp, tgt = mask_tokens(pair.tokens, model.text_vocab, MASK_ID, len(SPECIALS), mask_prob, rng)
            gc = pair.gc if task is Task.MLM_MULTI else None
            rows.append(single_row(inp, gc))
            targets.append([-1, *tgt, -1])
        width = max(len(t) for t in targets)
        tgt = torch.tensor([t + [-1] * (width - len(t)) for t in targets], dtype=torch.long)
        if not bool((tgt >= 0).any()):
            return _zero(model)
        h, _ = model.encode_rows(rows)
        sel = tgt >= 0
        return softmax_xent(model.mlm_head(h[:, :width][sel]), tgt[sel]).mean()

    records = [p.record for p in batch if p.record is not None and len(p.record) > 0]
    if not records:
        return _zero(model)
    pairs = [p for p in batch if p.record is not None and len(p.record) > 0]
    codes, obj_mask = collate(records, geo.cfg)
    plan = plan_masking(codes, obj_mask, geo.cfg, mask_prob, rng)
    if not bool(plan.selected.any()):
        return _zero(model)
    with torch.no_grad():
        geo_out = geo(plan.codes, obj_mask)
    rows = []
    for i, p in enumerate(pairs):
        rows.append(single_row(p.tokens, geo_out[i, 1 : len(p.record) + 1]))
    h, _ = model.encode_rows(rows)
    n = codes.shape[1]
    h = F.pad(h, (0, 0, 0, n))
    gc_h = torch.stack([h[i, len(p.tokens) + 2 : len(p.tokens) + 2 + n] for i, p in enumerate(pairs)])
    return masked_feature_loss(model.mgm_heads, gc_h, codes, plan.selected)


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 512
    lr: float = 5e-5
    weight_decay: float = 0.02
    mask_prob: float = 0.15
    seed: int = 17
    tasks: tuple[Task, ...] = ROUND_ROBIN


def pretrain_round_robin(model: InteractionModel, geo: GeoEncoderModel, corpus: Sequence[PretrainPair],
                         cfg: PretrainConfig, progress=None) -> dict[str, list[tuple[int, int, float]]]:
    """Cycle the tasks per batch in fixed order; returns per-task traces of (step, epoch, loss)."""
    if not corpus:
        raise ValueError("empty pre-training corpus")
    model.train()
    opt = make_optimizer(model, cfg.lr, cfg.weight_decay)
    order_rng = stream(cfg.seed, "mm.order")
    mask_rng = stream(cfg.seed, "mm.mask")
    traces: dict[str, list[tuple[int, int, float]]] = {t.value: [] for t in cfg.tasks}
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(corpus))
        for start in range(0, len(order), cfg.batch_size):
            batch = [corpus[i] for i in order[start : start + cfg.batch_size]]
            task = cfg.tasks[step % len(cfg.tasks)]
            loss = pretrain_step(model, geo, batch, task, mask_rng, cfg.mask_prob)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite {task.value} loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            optimizer_step(opt)
            traces[task.value].append((step, epoch, float(loss.item())))
            step += 1
        if progress is not None:
            progress(epoch, traces)
    return traces


# -- fine-tuning -------------------------------------------------------------


class Head(enum.Enum):
    BI = "BI"
    CROSS = "CROSS"


@dataclass
class MatchQuery:
    id: str
    example: PairExample
    candidates: tuple[str, ...]
    gold: str
    query_type: str = "ADDRESS"
    has_location: bool = False


@dataclass
class MatchDataset:
    queries: list[MatchQuery]
    pois: dict[str, PairExample]

    def subset(self, ids: Iterable[str]) -> "MatchDataset":
        keep = set(ids)
        return MatchDataset([q for q in self.queries if q.id in keep], self.pois)


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 56
    lr: float = 5e-5
    weight_decay: float = 0.02
    temperature: float = 0.05
    seed: int = 17
    negatives: int | None = None  # sampled negatives per query and step; None keeps the full list


def candidate_scores(model: InteractionModel, dataset: MatchDataset, queries: Sequence[MatchQuery], head: Head,
                     poi_cls: dict[str, Tensor] | None = None) -> list[Tensor]:
    """Per-query score vectors aligned with each query's candidate list."""
    if head is Head.BI:
        if poi_cls is None:
            ids = sorted({c for q in queries for c in q.candidates})
            vecs = bi_encode(model, [dataset.pois[i] for i in ids])
            poi_cls = dict(zip(ids, vecs))
        qv = bi_encode(model, [q.example for q in queries])
        out = []
        for i, q in enumerate(queries):
            cand = torch.stack([poi_cls[c] for c in q.candidates])
            out.append(cosine(qv[i][None], cand))
        return out
    pairs = [(q.example, dataset.pois[c]) for q in queries for c in q.candidates]
    flat = cross_scores(model, pairs)
    out, pos = [], 0
    for q in queries:
        out.append(flat[pos : pos + len(q.candidates)])
        pos += len(q.candidates)
    return out


def finetune_loss(model: InteractionModel, dataset: MatchDataset, queries: Sequence[MatchQuery], head: Head,
                  temperature: float = 0.05) -> Tensor:
    """Listwise softmax cross-entropy with the gold POI as target (cosines divided by temperature)."""
    for q in queries:
        if q.gold not in q.candidates:
            raise ValueError(f"query {q.id!r}: candidate list without gold")
    scores = candidate_scores(model, dataset, queries, head)
    width = max(len(s) for s in scores)
    mat = torch.stack([F.pad(s, (0, width - len(s)), value=float("-inf")) for s in scores])
    if head is Head.BI:
        mat = mat / temperature
    gold = torch.tensor([q.candidates.index(q.gold) for q in queries])
    return listwise_loss(mat, gold)


def sample_negatives(query: MatchQuery, k: int, rng: np.random.Generator) -> MatchQuery:
    """Gold plus ``k`` negatives drawn without replacement, in a random order."""
    if k < 1:
        raise ValueError("negatives must be >= 1")
    others = [c for c in query.candidates if c != query.gold]
    if len(others) <= k:
        return query
    picked = [others[int(i)] for i in rng.choice(len(others), size=k, replace=False)]
    picked.insert(int(rng.integers(k + 1)), query.gold)
    return dataclasses.replace(query, candidates=tuple(picked))


def finetune(model: InteractionModel, dataset: MatchDataset, head: Head, cfg: FinetuneConfig,
             dev_eval: Callable[[InteractionModel], float] | None = None,
             progress=None) -> tuple[InteractionModel, list[dict]]:
    """Train a relevance head; returns the best-dev checkpoint (last epoch without ``dev_eval``)."""
    if not dataset.queries:
        raise ValueError("empty fine-tuning set")
    for q in dataset.queries:
        if q.gold not in q.candidates:
            raise ValueError(f"query {q.id!r}: candidate list without gold")
    opt = make_optimizer(model, cfg.lr, cfg.weight_decay)
    order_rng = stream(cfg.seed, f"ft.{head.value}.order")
    neg_rng = stream(cfg.seed, f"ft.{head.value}.negatives")
    history: list[dict] = []
    best_state, best_metric = None, float("-inf")
    for epoch in range(cfg.epochs):
        model.train()
        order = order_rng.permutation(len(dataset.queries))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset.queries[i] for i in order[start : start + cfg.batch_size]]
            if cfg.negatives is not None:
                batch = [sample_negatives(q, cfg.negatives, neg_rng) for q in batch]
            loss = finetune_loss(model, dataset, batch, head, cfg.temperature)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            optimizer_step(opt)
            losses.append(float(loss.item()))
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if dev_eval is not None:
            model.eval()
            with torch.no_grad():
                metric = dev_eval(model)
            entry["dev_recall@1"] = metric
            if metric > best_metric:
                best_metric = metric
                best_state = copy.deepcopy(model.state_dict())
        history.append(entry)
        if progress is not None:
            progress(entry)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history
