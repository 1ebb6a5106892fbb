import json
import shutil

import numpy as np
import pytest

from sidsearch import cli
from sidsearch.config import load_config
from sidsearch.pipeline import Run, mode_run, parse_mode
from sidsearch.distill import DistillConfig

TINY = """
[DEFAULT]
seed = 3
[world]
n_items = 300
n_users = 30
n_queries = 80
sessions = 700
[codec]
L = 3
K = 8
iters = 8
[model]
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_len = 48
[train]
batch_size = 8
stage1_steps = 4
stage2_steps = 3
stage3_steps = 3
[rl]
G = 4
steps = 2
prompts_per_step = 4
[eval]
beam = 8
modes = ('self', 'ema', 'codi_l1+proj')
"""


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def full_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert cli.main(["full-run", "--config", str(tiny_cfg), "--out", str(out), "--trace"]) == 0
    return out


def test_full_run_writes_every_artifact(full_run):
    for rel in ("config.json", "codebooks.json", "metrics.jsonl", "run.log", "corpus/logs.jsonl",
                "reports/codec.json", "trace_tpma.jsonl", "checkpoints/s3_sd_codi_l1_proj.json"):
        assert (full_run / rel).exists(), rel
    for proto in ("ladder", "headtail", "sides", "modes", "rl"):
        assert (full_run / "reports" / f"{proto}.csv").exists()
        assert (full_run / "reports" / f"{proto}.jsonl").exists()
    snap = json.loads((full_run / "config.json").read_text())
    assert snap["seed"] == 3 and snap["codec"]["K"] == 8
    rows = [json.loads(x) for x in (full_run / "metrics.jsonl").read_text().splitlines()]
    assert {"s1_base", "s3_sd", "s3_sd_ema"} <= {r.get("run") for r in rows}


def test_snapshot_reproduces_the_run_byte_for_byte(full_run, tmp_path):
    out = tmp_path / "b"
    assert cli.main(["full-run", "--config", str(full_run / "config.json"), "--out", str(out)]) == 0
    for f in sorted((full_run / "reports").iterdir()):
        assert (out / "reports" / f.name).read_bytes() == f.read_bytes(), f.name
    for f in sorted((full_run / "checkpoints").iterdir()):
        assert (out / "checkpoints" / f.name).read_bytes() == f.read_bytes(), f.name


def test_headtail_slices_follow_the_tier_partition(full_run):
    run = Run(load_config(full_run / "config.json", env={}), full_run)
    tiers = [pv.tier for pv in run.data.test_pvs]
    rows = [json.loads(x) for x in (full_run / "reports" / "headtail.jsonl").read_text().splitlines()]
    for r in rows:
        want = len(tiers) if r["slice"] == "all" else tiers.count(r["slice"])
        assert r["n_pv"] == want
    for r in (json.loads(x) for x in (full_run / "reports" / "ladder.jsonl").read_text().splitlines()):
        assert 0 <= r["mrr"] <= r["hr"] <= 1 and r["valid_sid_rate"] == 1.0


def test_skip_rl_leaves_sft_rungs_only(tiny_cfg, full_run, tmp_path):
    out = tmp_path / "c"
    shutil.copytree(full_run / "corpus", out / "corpus")
    assert cli.main(["full-run", "--config", str(tiny_cfg), "--out", str(out), "--skip", "rl"]) == 0
    models = {json.loads(x)["model"] for x in (out / "reports" / "ladder.jsonl").read_text().splitlines()}
    assert models == {"untrained", "baseline", "+ CoT tasks", "+ self-distill"}
    assert not (out / "reports" / "rl.csv").exists()
    assert not (out / "checkpoints" / "rl_tpma.json").exists()


def test_stages_are_restartable(tiny_cfg, full_run, tmp_path):
    out = tmp_path / "d"
    shutil.copytree(full_run, out)
    (out / "reports" / "sides.csv").unlink()
    (out / "checkpoints" / "rl_grpo.json").unlink()
    assert cli.main(["rl", "--algo", "grpo", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    assert cli.main(["eval", "--protocol", "sides", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    assert (out / "checkpoints" / "rl_grpo.json").read_bytes() == (full_run / "checkpoints" / "rl_grpo.json").read_bytes()
    assert (out / "reports" / "sides.csv").read_bytes() == (full_run / "reports" / "sides.csv").read_bytes()


def test_individual_subcommands(tiny_cfg, tmp_path, monkeypatch):
    out = tmp_path / "e"
    monkeypatch.setenv("SIDSEARCH_OUT", str(out))
    for argv in (["gen-corpus"], ["train-sid"], ["sft", "--stage", "1"], ["sft", "--stage", "2"],
                 ["distill", "--mode", "joint"]):
        assert cli.main(argv + ["--config", str(tiny_cfg)]) == 0, argv
    assert (out / "corpus" / "keywords.jsonl").exists()
    assert {p.stem for p in (out / "checkpoints").iterdir()} == {"s1_base", "s1_cot", "s2_base", "s2_cot",
                                                                 "s3_sd_joint"}


def test_exit_codes(tiny_cfg, full_run, tmp_path, monkeypatch):
    bad = tmp_path / "bad.ini"
    bad.write_text("[rl]\nG = lots\n")
    assert cli.main(["gen-corpus", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["distill", "--mode", "mentor", "--config", str(tiny_cfg), "--out", str(tmp_path / "x")]) == 2
    # evaluating against an empty checkpoint directory is a missing-input error
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["eval", "--protocol", "sides", "--config", str(tiny_cfg), "--out", str(tmp_path / "y"),
                     "--corpus", str(full_run / "corpus"), "--checkpoint-dir", str(empty)]) == 3
    assert cli.main(["rl", "--algo", "grpo", "--config", str(tiny_cfg), "--out", str(tmp_path / "z")]) == 3
    monkeypatch.setattr(Run, "evaluate", lambda self, protocols=None: ["MRR exceeds HR"])
    assert cli.main(["eval", "--config", str(tiny_cfg), "--out", str(full_run)]) == 1


def test_eval_reads_external_checkpoints(tiny_cfg, full_run, tmp_path):
    out = tmp_path / "f"
    assert cli.main(["eval", "--protocol", "ladder", "--config", str(tiny_cfg), "--out", str(out),
                     "--corpus", str(full_run / "corpus"), "--checkpoint-dir", str(full_run / "checkpoints")]) == 0
    assert (out / "reports" / "ladder.csv").read_bytes() == (full_run / "reports" / "ladder.csv").read_bytes()


def test_untrained_sides_are_indistinguishable(tiny_cfg, full_run, tmp_path):
    out = tmp_path / "g"
    shutil.copytree(full_run / "corpus", out / "corpus")
    shutil.copy(full_run / "codebooks.json", out / "codebooks.json")
    run = Run(load_config(tiny_cfg, env={}), out)
    params, _ = run.load("init")
    for name, meta in (("s3_cot", {}), ("s3_rag", {"keywords": True}), ("s3_sd", {})):
        run._save(name, params, {"prompt": meta})
    rows = [r for r in run.protocol("sides") if r["slice"] == "click"]
    hrs = np.array([r["hr"] for r in rows])
    n = rows[0]["n_pv"]
    p = hrs.mean()
    sigma = np.sqrt(2 * max(p * (1 - p), 1.0 / n) / n)     # two-proportion standard error
    assert np.ptp(hrs) <= 3 * sigma
    assert rows[2]["hr"] == rows[1]["hr"] and rows[0]["hr"] == rows[3]["hr"]   # same weights, same prompts


def test_mode_names():
    assert mode_run("self") == "s3_sd" and mode_run("codi_l1+proj+sd") == "s3_sd_codi_l1_proj_sd"
    d = parse_mode("codi_l1+proj+sd", DistillConfig())
    assert d.mode == "codi_l1" and d.codi_proj and d.codi_kl
    for bad in ("ema+proj", "codi_l1+fast"):
        with pytest.raises(ValueError):
            parse_mode(bad, DistillConfig())
