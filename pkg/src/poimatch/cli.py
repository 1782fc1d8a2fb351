"""Command-line entry point: one subcommand per stage plus an end-to-end run.

Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import sys
from pathlib import Path

import click

from .evalkit.generator import GenSpec, GenSpecError
from .evalkit.tasks import score_ranking, score_retrieval
from .geodata import CorpusError
from .mgeo import Head
from .nncore import CheckpointError
from .pipeline import (
    DEFAULT_VARIANTS,
    REPORT_FILE,
    RunConfig,
    StageError,
    Variant,
    ablations,
    evaluate_variant,
    load_finetuned,
    load_run_config,
    open_workspace,
    run_pipeline,
    stage_extract_gc,
    stage_finetune,
    stage_gen_bench,
    stage_pretrain_geo,
    stage_pretrain_mm,
    write_report,
)

RUNTIME_ERRORS = (StageError, CorpusError, CheckpointError, FloatingPointError, KeyError, ValueError, OSError)

DirIn = click.Path(exists=True, file_okay=False, path_type=Path)
DirOut = click.Path(file_okay=False, path_type=Path)
FileOut = click.Path(dir_okay=False, allow_dash=True, path_type=Path)


def _runtime(fn):
    """Map stage failures to exit code 1 with a one-line message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RUNTIME_ERRORS as e:
            msg = e.args[0] if isinstance(e, KeyError) and e.args else e
            click.echo(f"error: {msg}", err=True)
            sys.exit(1)

    return wrapper


def _cfg(ctx: click.Context) -> RunConfig:
    return ctx.obj["cfg"]


def _emit(lines, out: Path) -> None:
    text = "".join(line + "\n" for line in lines)
    if str(out) == "-":
        click.echo(text, nl=False)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _workspace_options(fn):
    for opt in reversed((
        click.option("--corpus", type=DirIn, required=True, help="Corpus directory from gen-bench."),
        click.option("--gc", "gc_dir", type=DirIn, required=True, help="GC cache directory from extract-gc."),
        click.option("--geo", "geo_dir", type=DirIn, required=True, help="Geographic encoder directory from pretrain-geo."),
        click.option("--mm", "mm_dir", type=DirIn, default=None,
                     help="Multi-modal pre-training directory; omit only for models trained with --from-scratch."),
    )):
        fn = opt(fn)
    return fn


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="JSON run config; unspecified fields fall back to the profile defaults.")
@click.option("--profile", type=click.Choice(["desk", "paper"]), default=None,
              help="Model and schedule scale when no --config is given (default desk).")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("-v", "--verbose", count=True, help="Log stage progress to stderr (-vv for debug).")
@click.pass_context
def main(ctx: click.Context, config_path: Path | None, profile: str | None, seed: int | None, verbose: int) -> None:
    """Geographic-context pre-training and query-POI matching."""
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if config_path is not None and profile is not None:
        raise click.UsageError("--config and --profile are mutually exclusive (set 'profile' inside the config)")
    try:
        cfg = load_run_config(config_path) if config_path is not None else RunConfig.for_profile(profile or "desk")
    except (ValueError, TypeError) as e:
        raise click.BadParameter(str(e), param_hint="--config") from e
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    ctx.obj = {"cfg": cfg}


@main.command("gen-bench")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="JSON benchmark spec overriding the run config's generator fields.")
@click.option("--out", type=DirOut, required=True, help="Output corpus directory.")
@click.pass_context
@_runtime
def gen_bench(ctx: click.Context, spec_path: Path | None, out: Path) -> None:
    """Generate the synthetic city, POIs and queries."""
    cfg = _cfg(ctx)
    if spec_path is not None:
        try:
            spec = GenSpec.from_dict({**cfg.gen.to_dict(), **json.loads(spec_path.read_text(encoding="utf-8"))})
        except (json.JSONDecodeError, GenSpecError, TypeError) as e:
            raise click.BadParameter(f"{spec_path}: {e}", param_hint="--spec") from e
        cfg = dataclasses.replace(cfg, gen=spec)
    b = stage_gen_bench(cfg, out)
    click.echo(f"wrote {len(b.objects)} objects, {len(b.pois)} POIs, {len(b.queries)} queries to {out}")


@main.command("extract-gc")
@click.option("--corpus", type=DirIn, required=True, help="Corpus directory from gen-bench.")
@click.option("--out", type=DirOut, required=True, help="GC cache directory (reused entries are skipped).")
@click.pass_context
@_runtime
def extract_gc(ctx: click.Context, corpus: Path, out: Path) -> None:
    """Extract geographic context for every POI and located query."""
    stats = stage_extract_gc(_cfg(ctx), corpus, out)
    click.echo(f"{stats['entries']} entries, {stats['recomputed']} recomputed")


@main.command("pretrain-geo")
@click.option("--corpus", type=DirIn, required=True, help="Corpus directory from gen-bench.")
@click.option("--gc", "gc_dir", type=DirIn, required=True, help="GC cache directory from extract-gc.")
@click.option("--out", type=DirOut, required=True, help="Output directory for the geographic encoder.")
@click.pass_context
@_runtime
def pretrain_geo(ctx: click.Context, corpus: Path, gc_dir: Path, out: Path) -> None:
    """Pre-train the geographic encoder (masked features plus geographic contrast)."""
    stage_pretrain_geo(_cfg(ctx), corpus, gc_dir, out)
    click.echo(f"geographic encoder written to {out}")


@main.command("pretrain-mm")
@click.option("--corpus", type=DirIn, required=True, help="Corpus directory from gen-bench.")
@click.option("--gc", "gc_dir", type=DirIn, required=True, help="GC cache directory from extract-gc.")
@click.option("--geo", "geo_dir", type=DirIn, required=True, help="Geographic encoder directory.")
@click.option("--out", type=DirOut, required=True, help="Output directory for the multi-modal checkpoint.")
@click.pass_context
@_runtime
def pretrain_mm(ctx: click.Context, corpus: Path, gc_dir: Path, geo_dir: Path, out: Path) -> None:
    """Pre-train the text and GC interaction module."""
    stage_pretrain_mm(_cfg(ctx), corpus, gc_dir, geo_dir, out)
    click.echo(f"multi-modal checkpoint written to {out}")


@main.command("finetune")
@_workspace_options
@click.option("--head", type=click.Choice(["bi", "cross"]), default="cross", show_default=True, help="Matching head.")
@click.option("--no-query-gc", is_flag=True, help="Drop GC on the query side.")
@click.option("--text-only", is_flag=True, help="Drop GC on both sides.")
@click.option("--from-scratch", is_flag=True, help="Start from random weights instead of a multi-modal checkpoint.")
@click.option("--out", type=DirOut, required=True, help="Output directory for the fine-tuned model.")
@click.pass_context
@_runtime
def finetune_cmd(ctx: click.Context, corpus: Path, gc_dir: Path, geo_dir: Path, mm_dir: Path | None, head: str,
                 no_query_gc: bool, text_only: bool, from_scratch: bool, out: Path) -> None:
    """Fine-tune a ranking head on the train split, keeping the best dev epoch."""
    if mm_dir is None and not from_scratch:
        raise click.UsageError("finetune needs --mm (a multi-modal checkpoint) unless --from-scratch is set")
    if mm_dir is not None and from_scratch:
        raise click.UsageError("--from-scratch and --mm are mutually exclusive")
    variant = Variant(Head(head.upper()), query_gc=not (no_query_gc or text_only), poi_gc=not text_only)
    ws = open_workspace(_cfg(ctx), corpus, gc_dir, geo_dir, mm_dir)

    def progress(entry):
        logging.getLogger("poimatch.cli").info("finetune %s", json.dumps(entry, sort_keys=True))

    history = stage_finetune(ws, variant, out, progress)
    best = max(h["dev_recall@1"] for h in history)
    click.echo(f"{variant.name}: {len(history)} epochs, best dev recall@1 {best:.4f}")


def _open_model(ctx: click.Context, corpus, gc_dir, geo_dir, mm_dir, model_dir):
    ws = open_workspace(_cfg(ctx), corpus, gc_dir, geo_dir, mm_dir)
    model, variant = load_finetuned(ws, model_dir)
    return ws, model, variant


def _score_lines(scored) -> list[str]:
    return [f"{q.id}\t{pid}\t{score:.6f}" for q, pairs in scored for pid, score in pairs]


@main.command("rank")
@_workspace_options
@click.option("--model", "model_dir", type=DirIn, required=True, help="Fine-tuned model directory.")
@click.option("--split", type=click.Choice(["train", "dev", "test"]), default="test", show_default=True,
              help="Query split to score.")
@click.option("--out", type=FileOut, default="-", show_default=True, help="Output file ('-' for stdout).")
@click.pass_context
@_runtime
def rank(ctx, corpus, gc_dir, geo_dir, mm_dir, model_dir, split, out) -> None:
    """Score each query's candidates; prints query, POI and score lines, best first."""
    ws, model, variant = _open_model(ctx, corpus, gc_dir, geo_dir, mm_dir, model_dir)
    _emit(_score_lines(score_ranking(model, ws.dataset(split, variant), variant.head)), out)


@main.command("retrieve")
@_workspace_options
@click.option("--model", "model_dir", type=DirIn, required=True, help="Fine-tuned bi-encoder directory.")
@click.option("--split", type=click.Choice(["train", "dev", "test"]), default="test", show_default=True,
              help="Query split to score.")
@click.option("--k-max", type=click.IntRange(min=1), default=100, show_default=True, help="POIs kept per query.")
@click.option("--out", type=FileOut, default="-", show_default=True, help="Output file ('-' for stdout).")
@click.pass_context
@_runtime
def retrieve(ctx, corpus, gc_dir, geo_dir, mm_dir, model_dir, split, k_max, out) -> None:
    """Retrieve from the full POI pool with a bi-encoder; same line format as rank."""
    ws, model, variant = _open_model(ctx, corpus, gc_dir, geo_dir, mm_dir, model_dir)
    if variant.head is not Head.BI:
        raise click.UsageError(f"{model_dir} holds a {variant.head.value.lower()} model; retrieve needs a bi-encoder")
    _emit(_score_lines(score_retrieval(model, ws.dataset(split, variant), k_max=k_max)), out)


@main.command("eval")
@_workspace_options
@click.option("--model", "model_dirs", type=DirIn, required=True, multiple=True,
              help="Fine-tuned model directory; repeat for several models.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Metrics report path.")
@click.pass_context
@_runtime
def eval_cmd(ctx, corpus, gc_dir, geo_dir, mm_dir, model_dirs, out) -> None:
    """Ranking (and, for bi-encoders, retrieval) metrics on dev and test."""
    ws = open_workspace(_cfg(ctx), corpus, gc_dir, geo_dir, mm_dir)
    models = {}
    for d in model_dirs:
        model, variant = load_finetuned(ws, d)
        models[variant.name] = evaluate_variant(ws, model, variant)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, ws.cfg, {"models": models})
    click.echo(f"report written to {out}")


@main.command("ablate")
@_workspace_options
@click.option("--model", "model_dirs", type=DirIn, required=True, multiple=True,
              help="Fine-tuned model directory; repeat for several models.")
@click.option("--split", type=click.Choice(["dev", "test"]), default="dev", show_default=True,
              help="Query split to sweep.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Ablation report path.")
@click.pass_context
@_runtime
def ablate(ctx, corpus, gc_dir, geo_dir, mm_dir, model_dirs, split, out) -> None:
    """Query-GC percentage and text-truncation sweeps."""
    ws = open_workspace(_cfg(ctx), corpus, gc_dir, geo_dir, mm_dir)
    models = {}
    for d in model_dirs:
        model, variant = load_finetuned(ws, d)
        models[variant.name] = ablations(ws, model, variant, split)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, ws.cfg, {"split": split, "models": models})
    click.echo(f"ablation report written to {out}")


@main.command("pipeline")
@click.option("--workdir", type=DirOut, required=True, help="Directory receiving every stage's outputs.")
@click.option("--variant", "variants", multiple=True, type=click.Choice([v.name for v in DEFAULT_VARIANTS]),
              help="Fine-tuned variants to train (default: all).")
@click.pass_context
@_runtime
def pipeline_cmd(ctx, workdir: Path, variants: tuple[str, ...]) -> None:
    """Run every stage end to end and write eval/report.json."""
    chosen = [v for v in DEFAULT_VARIANTS if not variants or v.name in variants]
    run_pipeline(_cfg(ctx), workdir, chosen, progress=lambda m: click.echo(m, err=True))
    click.echo(f"report written to {workdir / 'eval' / REPORT_FILE}")


if __name__ == "__main__":
    main()
