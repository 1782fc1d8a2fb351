"""Stage wiring: resolved run config, on-disk stage artifacts and the end-to-end run."""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import torch

from .evalkit.generator import GenSpec, generate_benchmark
from .evalkit.metrics import RankingResult, metric_block
from .evalkit.tasks import Axis, ablation_slice, run_ranking, run_retrieval
from .gcfeat import GcConfig, GCRecord, corpus_map_bounds, extract_gc, record_from_json, record_to_json
from .geodata import CORPUS_FILES, CorpusBundle, format_coord, load_corpus, save_corpus
from .geoenc import GeoEncoderConfig, GeoEncoderModel, GeoTrainConfig, encode_records, freeze, train_geo_encoder
from .mgeo import (
    FinetuneConfig,
    Head,
    InteractionConfig,
    InteractionModel,
    MatchDataset,
    MatchQuery,
    PairExample,
    PretrainConfig,
    PretrainPair,
    Role,
    TextTokenizer,
    finetune,
    pretrain_round_robin,
)
from .nncore import TransformerConfig, load_into, read_checkpoint, save_checkpoint, seed_everything
from .spatial import SpatialIndex

log = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
LOCK_FILE = ".lock"
MANIFEST_FILE = "manifest.json"
GC_POIS_FILE = "gc_pois.jl"
GC_QUERIES_FILE = "gc_queries.jl"
GEO_CKPT = "geo.ckpt"
MM_CKPT = "mm.ckpt"
FT_CKPT = "model.ckpt"
TOKENIZER_FILE = "tokenizer.json"
REPORT_FILE = "report.json"


class StageError(RuntimeError):
    """A stage could not run (missing upstream artifact, busy directory, bad input)."""


# -- run config --------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """One fine-tuned model: head plus which sides carry GC."""

    head: Head
    query_gc: bool = True
    poi_gc: bool = True

    @property
    def name(self) -> str:
        if not self.query_gc and not self.poi_gc:
            suffix = "-text"
        elif not self.query_gc:
            suffix = "-noqgc"
        elif not self.poi_gc:
            suffix = "-nopgc"
        else:
            suffix = ""
        return self.head.value.lower() + suffix


DEFAULT_VARIANTS = (
    Variant(Head.BI),
    Variant(Head.BI, False, False),
    Variant(Head.CROSS),
    Variant(Head.CROSS, False, False),
    Variant(Head.CROSS, False, True),
)


def _desk_trunk(max_seq: int) -> TransformerConfig:
    return TransformerConfig(layers=2, hidden=64, heads=4, ffn_mult=4, max_seq=max_seq)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 17
    profile: str = "desk"
    gen: GenSpec = field(default_factory=GenSpec)
    gc_k: int = 10
    gc_grid_n: int = 2000
    gc_n_max: int = 20
    gc_radius: float = 1000.0
    gc_line_eps: float = 5.0
    gc_id_vocab: int = 50_021
    geo_trunk: TransformerConfig = field(default_factory=lambda: _desk_trunk(21))
    mm: InteractionConfig = field(default_factory=lambda: InteractionConfig(_desk_trunk(96), max_text=48))
    geo_train: GeoTrainConfig = field(default_factory=lambda: GeoTrainConfig(epochs=15, batch_size=128, lr=1e-3))
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(epochs=30, batch_size=64, lr=1e-3))
    finetune: FinetuneConfig = field(
        default_factory=lambda: FinetuneConfig(epochs=8, batch_size=8, lr=5e-4, negatives=7))

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "RunConfig":
        if profile == "desk":
            return cls(**overrides)
        if profile == "paper":
            big = TransformerConfig(layers=4, hidden=256, heads=4, ffn_mult=4, max_seq=21)
            base = dict(
                profile="paper",
                geo_trunk=big,
                mm=InteractionConfig(dataclasses.replace(big, max_seq=96), max_text=48),
                geo_train=GeoTrainConfig(),
                pretrain=PretrainConfig(),
                finetune=FinetuneConfig(),
            )
            base.update(overrides)
            return cls(**base)
        raise ValueError(f"unknown profile {profile!r} (expected 'desk' or 'paper')")

    def gc_config(self, map_bounds) -> GcConfig:
        return GcConfig(map_bounds, self.gc_k, self.gc_grid_n, self.gc_n_max, self.gc_radius, self.gc_line_eps,
                        self.gc_id_vocab)

    @property
    def geo_config(self) -> GeoEncoderConfig:
        return GeoEncoderConfig(self.gc_k, self.gc_grid_n, self.gc_id_vocab, self.geo_trunk)

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, GenSpec):
                v = v.to_dict()
            elif dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
                if "tasks" in v:
                    v["tasks"] = [t.value for t in v["tasks"]]
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        from .mgeo import Task

        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "gen" in d:
            d["gen"] = GenSpec.from_dict(d["gen"])
        if "geo_trunk" in d:
            d["geo_trunk"] = TransformerConfig(**d["geo_trunk"])
        if "mm" in d:
            d["mm"] = InteractionConfig.from_dict(d["mm"])
        if "geo_train" in d:
            d["geo_train"] = GeoTrainConfig(**d["geo_train"])
        if "pretrain" in d:
            p = dict(d["pretrain"])
            if "tasks" in p:
                p["tasks"] = tuple(Task(t) for t in p["tasks"])
            d["pretrain"] = PretrainConfig(**p)
        if "finetune" in d:
            d["finetune"] = FinetuneConfig(**d["finetune"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    d.pop("stage", None)  # present in stage snapshots
    profile = d.pop("profile", "desk")
    base = RunConfig.for_profile(profile).to_dict()
    base.update(d)
    base["profile"] = profile
    return RunConfig.from_dict(base)


# -- directory helpers -------------------------------------------------------


@contextlib.contextmanager
def stage_dir(path: str | Path, cfg: RunConfig, stage: str) -> Iterator[Path]:
    """Create ``path``, hold its lock file for the stage, then write the config snapshot."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"{path} is locked by another stage ({lock} exists)") from None
    try:
        os.write(fd, f"{stage} pid={os.getpid()}\n".encode())
        os.close(fd)
        yield path
        snapshot = cfg.to_dict()
        snapshot["stage"] = stage
        (path / CONFIG_FILE).write_text(json.dumps(snapshot, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    finally:
        lock.unlink(missing_ok=True)


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}")
    return path


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_lines(path: Path, lines: Sequence[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# -- stage: benchmark --------------------------------------------------------


def stage_gen_bench(cfg: RunConfig, out: str | Path) -> CorpusBundle:
    with stage_dir(out, cfg, "gen-bench") as d:
        bundle = generate_benchmark(cfg.gen)
        save_corpus(bundle, d)
        manifest = {
            "counts": dict(zip(("objects", "pois", "queries"), bundle.counts)),
            "files": {name: sha256_file(d / name) for name in CORPUS_FILES},
            "gen": cfg.gen.to_dict(),
        }
        (d / MANIFEST_FILE).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return bundle


# -- stage: GC extraction ----------------------------------------------------


def _gc_key(gc: GcConfig, objects_digest: str, lng: float, lat: float) -> str:
    blob = json.dumps([gc.to_dict(), objects_digest, format_coord(lng), format_coord(lat)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _read_cache(path: Path) -> dict[str, tuple[str, GCRecord]]:
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            eid, key, rec = record_from_json(line)
            out[eid] = (key, rec)
    return out


def stage_extract_gc(cfg: RunConfig, corpus: str | Path, out: str | Path) -> dict[str, int]:
    """Write GC caches for POIs and located queries; returns counts of total and recomputed entries.

    Entries whose content key (GC config, object file hash, anchor) is unchanged are reused.
    """
    corpus = Path(corpus)
    bundle = load_corpus(corpus)
    gc = cfg.gc_config(corpus_map_bounds(bundle))
    objects_digest = sha256_file(corpus / CORPUS_FILES[0])
    index = SpatialIndex(bundle.objects)
    stats = {"entries": 0, "recomputed": 0}
    with stage_dir(out, cfg, "extract-gc") as d:
        for fname, items in (
            (GC_POIS_FILE, [(p.id, p.location) for p in bundle.pois]),
            (GC_QUERIES_FILE, [(q.id, q.location) for q in bundle.queries if q.location is not None]),
        ):
            cached = _read_cache(d / fname)
            lines = []
            for eid, loc in sorted(items):
                key = _gc_key(gc, objects_digest, loc.lng, loc.lat)
                hit = cached.get(eid)
                if hit is not None and hit[0] == key:
                    rec = hit[1]
                else:
                    rec = extract_gc(loc, index, gc)
                    stats["recomputed"] += 1
                lines.append(record_to_json(eid, rec, key))
            write_lines(d / fname, lines)
            stats["entries"] += len(lines)
        (d / "gc_config.json").write_text(json.dumps(gc.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return stats


def load_gc(gc_dir: str | Path) -> tuple[dict[str, GCRecord], dict[str, GCRecord]]:
    gc_dir = Path(gc_dir)
    pois = {k: r for k, (_, r) in _read_cache(require(gc_dir / GC_POIS_FILE, "POI GC cache")).items()}
    queries = {k: r for k, (_, r) in _read_cache(require(gc_dir / GC_QUERIES_FILE, "query GC cache")).items()}
    return pois, queries


# -- stage: geographic encoder -----------------------------------------------


def geo_training_records(bundle: CorpusBundle, poi_gc: dict[str, GCRecord], query_gc: dict[str, GCRecord]) -> list[GCRecord]:
    """POI records plus train-split query records, skipping locations with no nearby objects."""
    train = set(bundle.splits.get("train", ()))
    recs = [poi_gc[p.id] for p in bundle.pois]
    recs += [query_gc[q] for q in sorted(train) if q in query_gc]
    return [r for r in recs if len(r) > 0]


def stage_pretrain_geo(cfg: RunConfig, corpus: str | Path, gc_dir: str | Path, out: str | Path,
                       progress: Callable | None = None) -> list[tuple[int, float, float]]:
    bundle = load_corpus(corpus)
    poi_gc, query_gc = load_gc(gc_dir)
    seed_everything(cfg.seed)
    with stage_dir(out, cfg, "pretrain-geo") as d:
        model = GeoEncoderModel(cfg.geo_config, seed=cfg.seed)
        trace = train_geo_encoder(geo_training_records(bundle, poi_gc, query_gc), model,
                                  dataclasses.replace(cfg.geo_train, seed=cfg.seed), progress)
        save_checkpoint(d / GEO_CKPT, model.state_dict(), cfg.seed, {"geo": cfg.geo_config.to_dict()})
        write_lines(d / "trace.jl", [json.dumps({"step": s, "mgm": m, "gcl": g}) for s, m, g in trace])
    return trace


def load_geo(cfg: RunConfig, geo_dir: str | Path) -> GeoEncoderModel:
    tensors, _, _ = read_checkpoint(require(Path(geo_dir) / GEO_CKPT, "geographic encoder checkpoint"))
    model = GeoEncoderModel(cfg.geo_config, seed=cfg.seed)
    load_into(model, tensors)
    freeze(model)
    return model


def encode_gc_map(geo: GeoEncoderModel, records: dict[str, GCRecord]) -> dict[str, torch.Tensor | None]:
    """Entity id -> frozen object vectors (n, H), or None when the record is empty."""
    ids = sorted(records)
    out: dict[str, torch.Tensor | None] = {i: None for i in ids}
    nonempty = [i for i in ids if len(records[i]) > 0]
    for i, h in zip(nonempty, encode_records(geo, [records[i] for i in nonempty])):
        out[i] = h[1:]
    return out


# -- text side ---------------------------------------------------------------


def build_tokenizer(bundle: CorpusBundle) -> TextTokenizer:
    train = set(bundle.splits.get("train", ()))
    return TextTokenizer.build([p.text for p in bundle.pois] + [q.text for q in bundle.queries if q.id in train])


def _tokens(tok: TextTokenizer, text: str, cfg: RunConfig) -> tuple[int, ...]:
    return tuple(tok.encode(text)[: cfg.mm.max_text - 3])


def pretrain_corpus(cfg: RunConfig, bundle: CorpusBundle, tok: TextTokenizer,
                    poi_gc: dict[str, GCRecord], query_gc: dict[str, GCRecord],
                    poi_vec: dict, query_vec: dict) -> list[PretrainPair]:
    pairs = []
    for p in bundle.pois:
        rec = poi_gc.get(p.id)
        pairs.append(PretrainPair(_tokens(tok, p.text, cfg), rec if rec is not None and len(rec) else None,
                                  poi_vec.get(p.id)))
    train = set(bundle.splits.get("train", ()))
    for q in bundle.queries:
        if q.id in train:
            rec = query_gc.get(q.id)
            pairs.append(PretrainPair(_tokens(tok, q.text, cfg), rec if rec is not None and len(rec) else None,
                                      query_vec.get(q.id)))
    return pairs


def stage_pretrain_mm(cfg: RunConfig, corpus: str | Path, gc_dir: str | Path, geo_dir: str | Path,
                      out: str | Path, progress: Callable | None = None) -> dict:
    bundle = load_corpus(corpus)
    poi_gc, query_gc = load_gc(gc_dir)
    geo = load_geo(cfg, geo_dir)
    seed_everything(cfg.seed)
    tok = build_tokenizer(bundle)
    pairs = pretrain_corpus(cfg, bundle, tok, poi_gc, query_gc, encode_gc_map(geo, poi_gc), encode_gc_map(geo, query_gc))
    with stage_dir(out, cfg, "pretrain-mm") as d:
        model = InteractionModel(len(tok), cfg.mm, cfg.geo_config, seed=cfg.seed)
        traces = pretrain_round_robin(model, geo, pairs, dataclasses.replace(cfg.pretrain, seed=cfg.seed), progress)
        tok.save(d / TOKENIZER_FILE)
        save_checkpoint(d / MM_CKPT, model.state_dict(), cfg.seed, {"text_vocab": len(tok)})
        rows = [json.dumps({"task": t, "step": s, "epoch": e, "loss": v}) for t, tr in traces.items() for s, e, v in tr]
        write_lines(d / "trace.jl", rows)
    return traces


# -- fine-tuning and evaluation ----------------------------------------------


def match_dataset(cfg: RunConfig, bundle: CorpusBundle, tok: TextTokenizer, split: str,
                  poi_vec: dict, query_vec: dict, variant: Variant) -> MatchDataset:
    pois = {
        p.id: PairExample(_tokens(tok, p.text, cfg), poi_vec.get(p.id) if variant.poi_gc else None, Role.POI)
        for p in bundle.pois
    }
    queries = []
    for q in bundle.split_queries(split):
        gc = query_vec.get(q.id) if variant.query_gc else None
        queries.append(MatchQuery(q.id, PairExample(_tokens(tok, q.text, cfg), gc, Role.QUERY), q.candidates, q.gold,
                                  q.query_type.value, q.location is not None))
    return MatchDataset(queries, pois)


@dataclass
class Workspace:
    """Loaded artifacts shared by fine-tuning and evaluation."""

    cfg: RunConfig
    bundle: CorpusBundle
    tok: TextTokenizer
    geo: GeoEncoderModel
    poi_vec: dict
    query_vec: dict
    mm_state: dict | None

    def dataset(self, split: str, variant: Variant) -> MatchDataset:
        return match_dataset(self.cfg, self.bundle, self.tok, split, self.poi_vec, self.query_vec, variant)

    def fresh_model(self) -> InteractionModel:
        model = InteractionModel(len(self.tok), self.cfg.mm, self.cfg.geo_config, seed=self.cfg.seed)
        if self.mm_state is not None:
            load_into(model, self.mm_state)
        return model


def open_workspace(cfg: RunConfig, corpus: str | Path, gc_dir: str | Path, geo_dir: str | Path,
                   mm_dir: str | Path | None) -> Workspace:
    bundle = load_corpus(corpus)
    poi_gc, query_gc = load_gc(gc_dir)
    geo = load_geo(cfg, geo_dir)
    if mm_dir is not None:
        mm_dir = Path(mm_dir)
        tok = TextTokenizer.load(require(mm_dir / TOKENIZER_FILE, "tokenizer"))
        state, _, _ = read_checkpoint(require(mm_dir / MM_CKPT, "multi-modal checkpoint"))
    else:
        tok, state = build_tokenizer(bundle), None
    return Workspace(cfg, bundle, tok, geo, encode_gc_map(geo, poi_gc), encode_gc_map(geo, query_gc), state)


def dev_recall(ws: Workspace, variant: Variant) -> Callable[[InteractionModel], float]:
    dev = ws.dataset("dev", variant)

    def evaluate(model: InteractionModel) -> float:
        return metric_block(run_ranking(model, dev, variant.head), (1,), ())["recall@1"]

    return evaluate


def stage_finetune(ws: Workspace, variant: Variant, out: str | Path, progress: Callable | None = None) -> list[dict]:
    cfg = ws.cfg
    seed_everything(cfg.seed)
    with stage_dir(out, cfg, "finetune") as d:
        model = ws.fresh_model()
        model, history = finetune(model, ws.dataset("train", variant), variant.head,
                                  dataclasses.replace(cfg.finetune, seed=cfg.seed), dev_recall(ws, variant), progress)
        meta = {"head": variant.head.value, "query_gc": variant.query_gc, "poi_gc": variant.poi_gc,
                "text_vocab": len(ws.tok), "pretrained": ws.mm_state is not None}
        save_checkpoint(d / FT_CKPT, model.state_dict(), cfg.seed, meta)
        write_lines(d / "history.jl", [json.dumps(h, sort_keys=True) for h in history])
    return history


def load_finetuned(ws: Workspace, ft_dir: str | Path) -> tuple[InteractionModel, Variant]:
    tensors, _, meta = read_checkpoint(require(Path(ft_dir) / FT_CKPT, "fine-tuned checkpoint"))
    model = InteractionModel(len(ws.tok), ws.cfg.mm, ws.cfg.geo_config, seed=ws.cfg.seed)
    load_into(model, tensors)
    model.eval()
    return model, Variant(Head(meta["head"]), bool(meta["query_gc"]), bool(meta["poi_gc"]))


def evaluate_variant(ws: Workspace, model: InteractionModel, variant: Variant, splits=("dev", "test")) -> dict:
    out = {}
    for split in splits:
        ds = ws.dataset(split, variant)
        results = run_ranking(model, ds, variant.head)
        block = {"ranking": metric_block(results),
                 "by_query_type": ablation_slice(results, ds, Axis.QUERY_TYPE)}
        if variant.head is Head.BI:
            block["retrieval"] = metric_block(run_retrieval(model, ds, k_max=100))
        out[split] = block
    return out


def ablations(ws: Workspace, model: InteractionModel, variant: Variant, split: str = "dev") -> dict:
    """GC-percentage and truncation sweeps for a GC-trained model."""
    ds = ws.dataset(split, variant)

    def rerun(d: MatchDataset) -> list[RankingResult]:
        return run_ranking(model, d, variant.head)

    return {
        "gc_percent": ablation_slice([], ds, Axis.GC_PERCENT, rerun),
        "truncation": ablation_slice([], ds, Axis.TRUNCATION, rerun, levels=(0.0, 0.25, 0.5)),
    }


def write_report(path: Path, cfg: RunConfig, body: dict) -> dict:
    report = {"meta": {"seed": cfg.seed, "config_hash": cfg.digest, "profile": cfg.profile}, **body}
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report


def run_pipeline(cfg: RunConfig, workdir: str | Path, variants: Sequence[Variant] = DEFAULT_VARIANTS,
                 progress: Callable[[str], None] | None = None) -> dict:
    """Every stage end to end under ``workdir``; returns the metrics report."""
    w = Path(workdir)
    say = progress or (lambda msg: log.info(msg))
    say("gen-bench")
    stage_gen_bench(cfg, w / "corpus")
    say("extract-gc")
    stage_extract_gc(cfg, w / "corpus", w / "gc")
    say("pretrain-geo")
    stage_pretrain_geo(cfg, w / "corpus", w / "gc", w / "geo")
    say("pretrain-mm")
    stage_pretrain_mm(cfg, w / "corpus", w / "gc", w / "geo", w / "mm")
    ws = open_workspace(cfg, w / "corpus", w / "gc", w / "geo", w / "mm")
    body: dict = {"models": {}}
    for v in variants:
        say(f"finetune {v.name}")
        stage_finetune(ws, v, w / f"ft-{v.name}")
        model, _ = load_finetuned(ws, w / f"ft-{v.name}")
        say(f"eval {v.name}")
        entry = evaluate_variant(ws, model, v)
        if v.query_gc and v.poi_gc:
            entry["ablation"] = ablations(ws, model, v)
        body["models"][v.name] = entry
    (w / "eval").mkdir(parents=True, exist_ok=True)
    return write_report(w / "eval" / REPORT_FILE, cfg, body)
