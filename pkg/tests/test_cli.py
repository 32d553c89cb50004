import json
import subprocess
import sys

import pytest

from cxrgen.cli import main
from cxrgen.evaluation.report import TABLE_COLUMNS

SMALL_CONFIG = """\
[warmup]
max_steps = 2
batch_size = 4

[stage1]
max_steps = 2
batch_size = 4

[stage2]
max_steps = 2
batch_size = 4

[stage3]
max_steps = 2
batch_size = 4

[model]
patch_size = 8
e_dim = 16
e_layers = 1
e_heads = 2
p_hidden = 16
l_dim = 16
l_layers = 1
l_heads = 2
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_CONFIG)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_synthesize_twice_same_hash(tmp_path):
    assert run("synthesize", "--n", 100, "--seed", 7, "--out", tmp_path / "a") == 0
    assert run("synthesize", "--n", 100, "--seed", 7, "--out", tmp_path / "b") == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["corpus_sha256"] == mb["corpus_sha256"]
    assert ma["code_version"] and ma["seed"] == 7


def test_bad_mix_exits_1(tmp_path, capsys):
    assert run("synthesize", "--n", 100, "--mix", "caption=0.9", "--out", tmp_path) == 1
    assert "BadProportions" in capsys.readouterr().err


def test_unknown_command_and_bad_flags(tmp_path, capsys):
    assert run("distill", "--out", tmp_path) == 1
    assert "UnknownCommand" in capsys.readouterr().err
    assert run() == 1
    assert run("synthesize", "--n", "lots", "--out", tmp_path) == 1


def test_missing_config_exits_1(tmp_path, capsys):
    run("synthesize", "--n", 60, "--out", tmp_path / "c")
    code = run("train", "--corpus", tmp_path / "c" / "corpus.jsonl", "--config", tmp_path / "none.ini",
               "--out", tmp_path / "t")
    assert code == 1 and "MissingConfig" in capsys.readouterr().err


def test_train_rejects_frozen_set_violation(tmp_path, capsys):
    run("synthesize", "--n", 60, "--out", tmp_path / "c")
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL_CONFIG.replace("[stage1]\n", "[stage1]\ntrainable = E\n"))
    code = run("train", "--corpus", tmp_path / "c" / "corpus.jsonl", "--config", bad, "--out", tmp_path / "t")
    assert code == 1 and "FrozenSetViolation" in capsys.readouterr().err
    assert not (tmp_path / "t" / "stage1.ckpt").exists()


def test_corrupt_corpus_names_record(tmp_path, capsys):
    run("synthesize", "--n", 60, "--out", tmp_path / "c")
    path = tmp_path / "c" / "corpus.jsonl"
    lines = path.read_text().splitlines()
    obj = json.loads(lines[3])
    obj["kind"] = "poem"
    lines[3] = json.dumps(obj)
    path.write_text("\n".join(lines) + "\n")
    assert run("train", "--corpus", path, "--out", tmp_path / "t") == 1
    assert obj["record_id"] in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "small.ini"
    cfg.write_text(SMALL_CONFIG)
    for name in ("a", "b"):
        assert run("pipeline", "--n", 60, "--seed", 5, "--config", cfg, "--max-new-tokens", 12,
                   "--out", root / name) == 0
    return root


def test_pipeline_artifact_set(pipeline_run):
    names = sorted(p.name for p in (pipeline_run / "a").iterdir())
    assert names == ["corpus.jsonl", "manifest.json", "metrics.json", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt"]
    m = json.loads((pipeline_run / "a" / "manifest.json").read_text())
    assert m["stage_order"] == [1, 2, 3]
    assert {"seed", "config_sha256", "corpus_sha256", "code_version"} <= set(m)
    assert m["config"].startswith("[warmup]")


def test_pipeline_metric_report_byte_identical(pipeline_run):
    a = (pipeline_run / "a" / "metrics.json").read_bytes()
    assert a == (pipeline_run / "b" / "metrics.json").read_bytes()
    report = json.loads(a)
    assert report["columns"] == list(TABLE_COLUMNS)


def test_pipeline_refuses_nonempty_out(pipeline_run, small_config):
    assert run("pipeline", "--n", 60, "--config", small_config, "--out", pipeline_run / "a") == 1


def test_generate_and_summarize_outputs(pipeline_run, tmp_path):
    run_dir = pipeline_run / "a"
    for cmd, name in (("generate", "generation.jsonl"), ("summarize", "summarization.jsonl")):
        assert run(cmd, "--corpus", run_dir / "corpus.jsonl", "--checkpoint", run_dir / "stage3.ckpt",
                   "--max-new-tokens", 5, "--out", tmp_path / cmd) == 0
        rows = [json.loads(x) for x in (tmp_path / cmd / name).read_text().splitlines()]
        assert rows and {"record_id", "instruction", "reference", "hypothesis"} <= set(rows[0])
        assert json.loads((tmp_path / cmd / "manifest.json").read_text())["outputs"]


def test_evaluate_with_latency(pipeline_run, tmp_path):
    run_dir = pipeline_run / "a"
    out = tmp_path / "m.json"
    assert run("evaluate", "--run", run_dir, "--max-new-tokens", 4, "--latency", "--out", out) == 0
    lat = json.loads(out.read_text())["latency"]
    for stats in lat.values():
        assert stats["min"] <= stats["mean"] <= stats["max"]


def test_evaluate_missing_stage2_checkpoint(pipeline_run, tmp_path, capsys):
    import shutil

    run_dir = tmp_path / "copy"
    shutil.copytree(pipeline_run / "a", run_dir)
    (run_dir / "stage2.ckpt").unlink()
    assert run("evaluate", "--run", run_dir, "--out", tmp_path / "m.json") == 1
    assert "MissingArtifact" in capsys.readouterr().err
    code = run("evaluate", "--corpus", run_dir / "corpus.jsonl", "--checkpoint", run_dir / "stage3.ckpt",
               "--out", tmp_path / "m.json")
    assert code == 1 and not (tmp_path / "m.json").exists()


def test_ablate_table_shape(tmp_path, small_config):
    assert run("ablate", "--n", 60, "--seed", 3, "--config", small_config, "--max-new-tokens", 6,
               "--out", tmp_path) == 0
    lines = (tmp_path / "ablation.tsv").read_text().splitlines()
    head = lines[0].split("\t")
    assert head[1:8] == [f"gen {c}" for c in TABLE_COLUMNS] and head[8:] == [f"sum {c}" for c in TABLE_COLUMNS]
    assert [line.split("\t")[0] for line in lines[1:]] == ["baseline", "(a)", "(b)", "full"]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cxrgen", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "cxrgen" in out.stdout
