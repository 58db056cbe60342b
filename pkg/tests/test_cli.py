import csv
import json

import pytest
import yaml

from protodet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_sweep

TINY = {
    "model": {"d_model": 16, "n_heads": 2, "ffn_dim": 32, "enc_layers": 1, "dec_layers": 1, "d_text": 8, "n_q": 6},
    "jitter": {"n_neg": 1},
    "train": {"stage1_steps": 2, "stage2_steps": 2, "lr": 1e-3},
    "episode": {"n_way": 2, "shots": 1, "n_query": 2, "image_size": 32, "max_objects": 2},
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(TINY))
    return tmp_path


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def episode_dir(workdir):
    assert run("generate", "--config", workdir / "cfg.yaml", "--shots", 1, "--out", workdir / "ep") == EXIT_OK
    return workdir / "ep"


def test_generate_requires_out(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate"])
    assert exc.value.code == EXIT_USAGE


def test_unknown_config_key_is_data_error(workdir):
    code = run("generate", "--config", workdir / "cfg.yaml", "--set", "model.nope=1", "--out", workdir / "x")
    assert code == EXIT_DATA


def test_generate_is_reproducible(workdir):
    cfg = workdir / "cfg.yaml"
    run("generate", "--config", cfg, "--seed", 4, "--out", workdir / "a")
    run("generate", "--config", cfg, "--seed", 4, "--out", workdir / "b")
    files = sorted(p.relative_to(workdir / "a") for p in (workdir / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (workdir / "a" / rel).read_bytes() == (workdir / "b" / rel).read_bytes()


def test_train_stage1_logs_visual_only(workdir, episode_dir):
    out = workdir / "run1"
    assert run("train", "--config", workdir / "cfg.yaml", "--episode", episode_dir, "--stage", 1, "--out", out) == EXIT_OK
    recs = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert recs and {r["branch"] for r in recs} == {"visual", "total"}
    assert all("config_hash" in r and "seed" in r for r in recs)
    assert (out / "stage1.ckpt").exists() and not (out / "stage2.ckpt").exists()


def test_full_pipeline(workdir, episode_dir):
    cfg = workdir / "cfg.yaml"
    out = workdir / "run"
    assert run("train", "--config", cfg, "--episode", episode_dir, "--stage", "both", "--out", out) == EXIT_OK
    assert (out / "stage1.ckpt").exists() and (out / "stage2.ckpt").exists()

    # a stage-2 checkpoint cannot seed stage-1 training
    code = run("train", "--config", cfg, "--episode", episode_dir, "--stage", 1, "--resume", out / "stage2.ckpt", "--out", workdir / "bad")
    assert code != EXIT_OK

    ev = workdir / "eval"
    for branch in ("text", "visual", "ensemble"):
        code = run("eval", "--config", cfg, "--checkpoint", out / "stage2.ckpt", "--episode", episode_dir, "--branch", branch, "--out", ev)
        assert code == EXIT_OK
    for branch in ("text", "visual", "ensemble"):
        metrics = json.loads((ev / f"metrics_{branch}.json").read_text())
        assert 0.0 <= metrics["mAP"] <= 1.0 and "AP50" in metrics
        dets = json.loads((ev / f"detections_{branch}.json").read_text())["detections"]
        for d in dets:
            assert d["category_id"] >= 1 and len(d["bbox"]) == 4

    protos = workdir / "protos.csv"
    assert run("export-prototypes", "--config", cfg, "--checkpoint", out / "stage2.ckpt", "--episode", episode_dir, "--out", protos) == EXIT_OK
    lines = protos.read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    rows = list(csv.DictReader(lines[1:]))
    kinds = {r["kind"] for r in rows}
    assert "class" in kinds
    assert all(r["label"].startswith("neg:") for r in rows if r["kind"] != "class")


def test_eval_hash_mismatch_refused(workdir, episode_dir):
    cfg = workdir / "cfg.yaml"
    out = workdir / "run"
    run("train", "--config", cfg, "--episode", episode_dir, "--stage", 1, "--out", out)
    code = run("eval", "--config", cfg, "--set", "train.lr=0.5", "--checkpoint", out / "stage1.ckpt", "--episode", episode_dir, "--out", workdir / "ev")
    assert code == EXIT_DATA


def test_ablate_n_neg(workdir, episode_dir):
    out = workdir / "sweep.csv"
    code = run("ablate", "--config", workdir / "cfg.yaml", "--sweep", "n_neg=0,1,3,5", "--episode", episode_dir, "--out", out)
    assert code == EXIT_OK
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert [r["n_neg"] for r in rows] == ["0", "1", "3", "5"]
    assert len({r["config_hash"] for r in rows}) == 4


def test_parse_sweep():
    assert parse_sweep("n_neg=0,1,3") == ("n_neg", [0, 1, 3])
    assert parse_sweep("level=0..3")[1] == [0, 1, 2, 3]
    assert parse_sweep("alpha=0,0.5")[1] == [0.0, 0.5]


def test_resume_with_mismatched_hash_refused(workdir, episode_dir):
    cfg = workdir / "cfg.yaml"
    out = workdir / "run"
    assert run("train", "--config", cfg, "--episode", episode_dir, "--stage", 1, "--out", out) == EXIT_OK
    code = run(
        "train", "--config", cfg, "--set", "jitter.n_neg=4", "--episode", episode_dir,
        "--stage", 2, "--resume", out / "stage1.ckpt", "--out", workdir / "r2",
    )
    assert code == EXIT_DATA
    # the matching config resumes stage 2 from the stage-1 weights
    assert run("train", "--config", cfg, "--episode", episode_dir, "--stage", 2, "--resume", out / "stage1.ckpt", "--out", workdir / "r3") == EXIT_OK
    assert (workdir / "r3" / "stage2.ckpt").exists()
