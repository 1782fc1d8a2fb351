import json

import pytest
from click.testing import CliRunner

from poimatch.cli import main
from poimatch.geodata import CORPUS_FILES
from poimatch.pipeline import CONFIG_FILE, LOCK_FILE, RunConfig, load_run_config

TINY = {
    "gen": {"n_lines": 8, "n_polygons": 10, "n_pois": 60, "n_queries": 90, "chain_size": 4,
            "train_candidates": 6, "eval_candidates": 10},
    "gc_grid_n": 64,
    "gc_id_vocab": 101,
    "geo_trunk": {"layers": 1, "hidden": 16, "heads": 2, "max_seq": 21},
    "mm": {"trunk": {"layers": 1, "hidden": 16, "heads": 2, "max_seq": 96}, "max_text": 48},
    "geo_train": {"epochs": 1, "batch_size": 64, "lr": 1e-3},
    "pretrain": {"epochs": 1, "batch_size": 64, "lr": 1e-3},
    "finetune": {"epochs": 1, "batch_size": 16, "lr": 1e-3, "negatives": 3},
}


def run(args, expect=0):
    res = CliRunner().invoke(main, [str(a) for a in args])
    assert res.exit_code == expect, res.output + repr(res.exception)
    return res


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """Every upstream stage run once through the CLI on a tiny config."""
    w = tmp_path_factory.mktemp("cli")
    cfg = w / "run.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", cfg]
    run([*base, "gen-bench", "--out", w / "corpus"])
    run([*base, "extract-gc", "--corpus", w / "corpus", "--out", w / "gc"])
    run([*base, "pretrain-geo", "--corpus", w / "corpus", "--gc", w / "gc", "--out", w / "geo"])
    run([*base, "pretrain-mm", "--corpus", w / "corpus", "--gc", w / "gc", "--geo", w / "geo", "--out", w / "mm"])
    ws = ["--corpus", w / "corpus", "--gc", w / "gc", "--geo", w / "geo", "--mm", w / "mm"]
    run([*base, "finetune", *ws, "--head", "bi", "--out", w / "ft-bi"])
    run([*base, "finetune", *ws, "--head", "cross", "--no-query-gc", "--out", w / "ft-cross-noqgc"])
    return w, base, ws


def test_help_documents_every_subcommand():
    out = run(["--help"]).output
    for cmd in ("gen-bench", "extract-gc", "pretrain-geo", "pretrain-mm", "finetune", "rank", "retrieve", "eval",
                "ablate", "pipeline"):
        assert cmd in out
        sub = run([cmd, "--help"]).output
        assert "Options:" in sub


def test_help_text_for_every_option():
    for name, cmd in main.commands.items():
        for p in cmd.params:
            if p.param_type_name == "option":
                assert p.help, f"{name} {p.name}"


def test_missing_spec_file_is_usage_error(tmp_path):
    res = run(["gen-bench", "--spec", tmp_path / "nope.json", "--out", tmp_path / "c"], expect=2)
    assert "nope.json" in res.output


def test_invalid_spec_content_is_usage_error(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"collision_rate": 3.0}))
    res = run(["gen-bench", "--spec", spec, "--out", tmp_path / "c"], expect=2)
    assert "collision_rate" in res.output


def test_gen_bench_is_deterministic(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(TINY["gen"]))
    for d in ("a", "b"):
        run(["gen-bench", "--spec", spec, "--out", tmp_path / d])
    for name in (*CORPUS_FILES, "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stage_outputs_and_config_snapshots(staged):
    w, _, _ = staged
    for d in ("corpus", "gc", "geo", "mm", "ft-bi", "ft-cross-noqgc"):
        assert (w / d / CONFIG_FILE).exists()
        assert not (w / d / LOCK_FILE).exists()
    snap = load_run_config(w / "mm" / CONFIG_FILE)
    assert snap.gen.n_pois == 60 and snap.mm.trunk.hidden == 16
    assert (w / "geo" / "trace.jl").read_text().strip()
    assert len((w / "ft-bi" / "history.jl").read_text().splitlines()) == 1


def test_extract_gc_rerun_recomputes_nothing(staged):
    w, base, _ = staged
    res = run([*base, "extract-gc", "--corpus", w / "corpus", "--out", w / "gc"])
    assert res.output.strip().endswith("0 recomputed")
    assert "60 POI" in run([*base, "gen-bench", "--out", w / "corpus2"]).output


def test_finetune_requires_multimodal_checkpoint(staged, tmp_path):
    w, base, ws = staged
    no_mm = ws[:-2]
    res = run([*base, "finetune", *no_mm, "--out", tmp_path / "x"], expect=2)
    assert "--from-scratch" in res.output
    run([*base, "finetune", *no_mm, "--head", "bi", "--text-only", "--from-scratch", "--out", tmp_path / "scratch"])
    assert (tmp_path / "scratch" / "model.ckpt").exists()


def test_missing_upstream_artifact_is_named(staged, tmp_path):
    w, base, ws = staged
    empty = tmp_path / "empty-mm"
    empty.mkdir()
    res = run([*base, "finetune", *ws[:-1], empty, "--out", tmp_path / "x"], expect=1)
    assert "tokenizer" in res.output


def test_locked_directory_refuses(staged, tmp_path):
    w, base, _ = staged
    out = tmp_path / "gc"
    out.mkdir()
    (out / LOCK_FILE).write_text("busy")
    res = run([*base, "extract-gc", "--corpus", w / "corpus", "--out", out], expect=1)
    assert "lock" in res.output


def _lines(text):
    return [line.split("\t") for line in text.splitlines()]


def test_rank_lines_sorted_per_query(staged):
    w, base, ws = staged
    out = run([*base, "rank", *ws, "--model", w / "ft-cross-noqgc", "--split", "dev"]).output
    rows = _lines(out)
    assert rows and all(len(r) == 3 for r in rows)
    by_q = {}
    for qid, pid, score in rows:
        by_q.setdefault(qid, []).append(float(score))
    assert all(len(s) == 10 and s == sorted(s, reverse=True) for s in by_q.values())


def test_retrieve_lines_and_head_check(staged):
    w, base, ws = staged
    rows = _lines(run([*base, "retrieve", *ws, "--model", w / "ft-bi", "--k-max", 5]).output)
    counts = {}
    for qid, _, _ in rows:
        counts[qid] = counts.get(qid, 0) + 1
    assert set(counts.values()) == {5}
    run([*base, "retrieve", *ws, "--model", w / "ft-cross-noqgc"], expect=2)


def test_eval_and_ablate_reports(staged):
    w, base, ws = staged
    run([*base, "eval", *ws, "--model", w / "ft-bi", "--model", w / "ft-cross-noqgc", "--out", w / "eval.json"])
    rep = json.loads((w / "eval.json").read_text())
    assert set(rep["models"]) == {"bi", "cross-noqgc"}
    assert "retrieval" in rep["models"]["bi"]["test"]
    assert rep["meta"]["config_hash"] == load_run_config(w / "mm" / CONFIG_FILE).digest
    run([*base, "ablate", *ws, "--model", w / "ft-bi", "--out", w / "abl.json"])
    abl = json.loads((w / "abl.json").read_text())["models"]["bi"]
    assert set(abl["gc_percent"]) == {"0%", "25%", "50%", "75%", "100%"}


def test_seed_and_profile_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gen": TINY["gen"]}))
    run(["--config", cfg, "--seed", 5, "gen-bench", "--out", tmp_path / "c"])
    assert load_run_config(tmp_path / "c" / CONFIG_FILE).seed == 5
    run(["--config", cfg, "--profile", "paper", "gen-bench", "--out", tmp_path / "d"], expect=2)
    assert RunConfig.for_profile("paper").geo_trunk.hidden == 256


def test_bad_config_field_is_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"colour": 1}))
    assert "colour" in run(["--config", cfg, "gen-bench", "--out", tmp_path / "c"], expect=2).output
